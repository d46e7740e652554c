//! Site intensities of a walk on a short open chain, written as CSV.
//!
//! `cargo run --example intensity_map > walk.csv`

use ptwalk::lattice::{localized_state, BlochState, Boundary, LatticeSpec};
use ptwalk::propagate::{evolve_linear, intensity_map, write_intensity_csv, Hamiltonian, StepControl};

fn main() -> ptwalk::Result<()> {
    let spec = LatticeSpec::new(7, 0.75, 0.25, 0.5, Boundary::Open)?;
    let psi0 = localized_state(&spec, 0, BlochState::north())?;
    let ctrl = StepControl::new(&spec, 10.0).with_stride(25);
    let traj = evolve_linear(&Hamiltonian::pt(&spec), &psi0, &ctrl)?;
    let rows = intensity_map(&traj)?;
    eprintln!("{} samples, final norm {:.4}", traj.samples.len(), traj.last().map_or(0.0, |s| s.norm_sqr()));
    write_intensity_csv(&rows, &["N=7 open, v_a=0.75 v_b=0.25 gamma=0.5, PT gauge".into()], std::io::stdout().lock())
}
