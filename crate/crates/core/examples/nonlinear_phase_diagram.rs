//! Kerr-induced change of ⟨Δm⟩ on a coarse (v_a/v_t, γ/v_t) grid.
//!
//! Broken-phase points grow exponentially in the PT gauge, so the step
//! budget is kept small; such points come back flagged rather than stalling.

use ptwalk::sweep::{sweep_nonlinear, Axis, NonlinearSweep, SweepOptions};

fn main() -> ptwalk::Result<()> {
    let cfg = NonlinearSweep {
        v_a: Axis::new("va", 0.1, 0.9, 5)?,
        gamma: Axis::new("gamma", 0.1, 1.0, 4)?,
        eta: 0.01,
    };
    let opts = SweepOptions {
        max_steps: 100_000,
        ..SweepOptions::nonlinear()
    };
    let table = sweep_nonlinear(&cfg, &opts)?;
    println!("{:>5} {:>6} {:>13} {:>12} {}", "v_a", "gamma", "phase", "delta", "flag");
    for r in &table.rows {
        println!("{:>5.2} {:>6.3} {:>13} {:>12.3e} {}", r.v_a, r.gamma, r.phase.as_str(), r.extra[1], r.flag);
    }
    eprintln!("{:.1}s", table.wall_time_s);
    Ok(())
}
