fn main() {
    std::process::exit(ptwalk::cli::main_with_args(std::env::args_os()));
}
