use std::path::Path;
use std::process::{Command, Output};

fn ptwalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptwalk")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Data lines of a CSV with `#` comments stripped, as records.
fn records(text: &str) -> Vec<Vec<String>> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn spectrum_emits_header_and_grid() {
    let o = ptwalk(&["spectrum", "--va", "0.75", "--vb", "0.25", "--gamma", "0.3", "--nk", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# ptwalk"));
    assert!(text.contains("# spec.gamma = 0.3"));
    let recs = records(&text);
    assert_eq!(recs[0], ["k", "lambda_re", "lambda_im"]);
    assert_eq!(recs.len(), 9);
    // k = π: λ = sqrt((v_a - v_b)² - γ²) = 0.4
    let at_pi: Vec<f64> = recs[5].iter().map(|x| x.parse().unwrap()).collect();
    assert!((at_pi[1] - 0.4).abs() < 1e-12 && at_pi[2].abs() < 1e-12);
    assert!(stderr(&o).contains("pt-symmetric"));
}

#[test]
fn phase_single_point() {
    let o = ptwalk(&["phase", "--va", "0.25", "--vb", "0.75", "--gamma", "0.5"]);
    assert!(o.status.success());
    let recs = records(&stdout(&o));
    assert_eq!(recs[1][3], "pt-broken");
    assert_eq!(recs[1][4], "true");
}

#[test]
fn usage_errors_exit_2_and_name_field() {
    for (args, field) in [
        (vec!["meandisp", "--theta", "4"], "theta"),
        (vec!["evolve", "--n", "4"], "n"),
        (vec!["sweep-gamma-map", "--gamma-min", "0.01"], "gamma_min"),
        (vec!["meandisp", "--eta", "-1"], "eta"),
    ] {
        let o = ptwalk(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains(field), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(ptwalk(&["meandisp", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ptwalk(&["bogus"]).status.code(), Some(2));
}

#[test]
fn strict_reports_non_convergence() {
    let args = ["meandisp", "--va", "0.5", "--gamma", "0.5", "--n", "11", "--t-max", "5"];
    let o = ptwalk(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("not-converged"));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(ptwalk(&strict).status.code(), Some(3));
}

#[test]
fn meandisp_json_embeds_config() {
    let o = ptwalk(&["meandisp", "--va", "0.25", "--gamma", "0.6", "--n", "21", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["config"]["task"]["spec"]["n_dimers"], 21);
    let row = &doc["rows"][0];
    assert!((row["mean_disp"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert!((row["analytic"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(row["flag"], "ok");
}

#[test]
fn config_file_and_out_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("walk.toml");
    std::fs::write(&cfg, "va = 0.75\nvb = 0.25\ngamma = 0.5\nn = 7\nt_max = 2.0\nstride = 50\n").unwrap();
    let out = dir.path().join("walk.csv");
    let o = ptwalk(&[
        "evolve",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# spec.n_dimers = 5"));
    assert!(text.contains("# spec.intra = 0.75"));
    let recs = records(&text);
    assert_eq!(recs[0], ["t", "cell", "sublattice", "intensity"]);
    // 5 cells × 2 sublattices per sample
    assert_eq!((recs.len() - 1) % 10, 0);
    assert_eq!(recs[1][0], "0");
    assert_eq!(recs.last().unwrap()[0], "2");
}

fn sweep_csv(dir: &Path, jobs: &str) -> String {
    let out = dir.join(format!("sweep{jobs}.csv"));
    let o = ptwalk(&[
        "sweep-coupling",
        "--va-min",
        "0.1",
        "--va-max",
        "0.9",
        "--va-count",
        "5",
        "--theta",
        "0,pi",
        "--n",
        "21",
        "--jobs",
        jobs,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::read_to_string(out).unwrap()
}

#[test]
fn sweep_output_is_deterministic_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let one = sweep_csv(dir.path(), "1");
    let two = sweep_csv(dir.path(), "2");
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("# jobs") && !l.starts_with("# opts.jobs")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&one), strip(&two));
    let recs = records(&one);
    assert_eq!(recs[0][..11], ["v_a", "v_b", "gamma", "theta", "phi", "eta", "mean_disp", "tail", "converged", "phase", "flag"]);
    assert_eq!(recs[0][11], "analytic");
    assert_eq!(recs.len(), 11);
    let north_first: f64 = recs[1][6].parse().unwrap();
    assert!((north_first - 1.0).abs() < 0.05);
}
