//! Quasiclassical part of ⟨Δm⟩ over (v_a/v_t, γ/v_t) against the drift model.

use std::f64::consts::PI;

use ptwalk::lattice::BlochState;
use ptwalk::sweep::{sweep_gamma_map, Axis, GammaMapSweep, SweepOptions};

fn main() -> ptwalk::Result<()> {
    let cfg = GammaMapSweep {
        v_a: Axis::new("va", 0.1, 0.9, 5)?,
        gamma: Axis::new("gamma", 0.25, 1.0, 4)?,
        state: BlochState::new(PI / 2.0, PI / 2.0)?,
    };
    let table = sweep_gamma_map(&cfg, &SweepOptions::linear())?;
    println!("{:>5} {:>6} {:>10} {:>10}", "v_a", "gamma", "measured", "model");
    for r in &table.rows {
        println!("{:>5.2} {:>6.2} {:>10.5} {:>10.5}", r.v_a, r.gamma, r.extra[0], r.extra[1]);
    }
    Ok(())
}
