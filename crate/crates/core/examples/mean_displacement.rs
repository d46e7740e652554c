//! ⟨Δm⟩ on both sides of the transition, real space next to the closed form.

use std::f64::consts::PI;

use ptwalk::bloch::analytic_mean_disp;
use ptwalk::lattice::{BlochState, Boundary, LatticeSpec};
use ptwalk::observables::{default_horizon, linear_mean_disp, DEFAULT_TOL};
use ptwalk::propagate::StepControl;

fn main() -> ptwalk::Result<()> {
    let states = [
        ("north", BlochState::north()),
        ("south", BlochState::south()),
        ("equator phi=pi/2", BlochState::new(PI / 2.0, PI / 2.0)?),
    ];
    for va in [0.25, 0.75] {
        let spec = LatticeSpec::from_ratio(41, va, 0.5, Boundary::Open)?;
        for (name, bloch) in states {
            let ctrl = StepControl::new(&spec, default_horizon(&spec));
            let r = linear_mean_disp(&spec, bloch, &ctrl, DEFAULT_TOL)?;
            println!(
                "v_a={va} {name:>16}: <dm> = {:+.5} (closed form {:+.5}), horizon {:.1}, converged {}",
                r.value,
                analytic_mean_disp(&spec, bloch)?,
                r.horizon,
                r.converged
            );
        }
    }
    Ok(())
}
