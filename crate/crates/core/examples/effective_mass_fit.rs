//! Effective mass recovered from quasiclassical drifts versus min(v_a, v_b²/v_a).

use std::f64::consts::PI;

use ptwalk::lattice::BlochState;
use ptwalk::sweep::{sweep_mass_fit, SweepOptions};

fn main() -> ptwalk::Result<()> {
    let states: Vec<_> = [PI / 2.0, PI / 6.0, -PI / 2.0]
        .iter()
        .map(|&phi| BlochState::new(PI / 2.0, phi))
        .collect::<ptwalk::Result<_>>()?;
    let report = sweep_mass_fit(&[0.2, 0.4, 0.6, 0.8], &[0.5, 1.0, 2.0], &states, &SweepOptions::linear())?;
    for f in &report.fits {
        let expected = f.v_a.min(f.v_b * f.v_b / f.v_a);
        println!(
            "v_a={:.2}: fitted {:.5}, expected {:.5} ({:+.2}%)",
            f.v_a,
            f.mu_inverse,
            expected,
            100.0 * (f.mu_inverse / expected - 1.0)
        );
    }
    Ok(())
}
