//! The same ⟨Δm⟩ three ways: periodic lattice, Brillouin-zone quadrature,
//! closed form.

use std::f64::consts::PI;

use ptwalk::bloch::{analytic_mean_disp, kspace_mean_disp, QuadratureControl};
use ptwalk::lattice::{BlochState, Boundary, LatticeSpec};
use ptwalk::observables::{default_horizon, linear_mean_disp};
use ptwalk::propagate::StepControl;

fn main() -> ptwalk::Result<()> {
    let quad = QuadratureControl::default();
    println!("{:>5} {:>5} {:>6} {:>6} {:>12} {:>12} {:>12}", "v_a", "gamma", "theta", "phi", "real", "k-space", "closed");
    for (va, g, theta, phi) in [(0.25, 0.5, PI / 3.0, PI / 4.0), (0.75, 0.6, 2.0 * PI / 3.0, -PI / 3.0), (0.2, 0.8, PI / 2.0, PI / 2.0)] {
        let spec = LatticeSpec::from_ratio(41, va, g, Boundary::Periodic)?;
        let bloch = BlochState::new(theta, phi)?;
        let real = linear_mean_disp(&spec, bloch, &StepControl::new(&spec, default_horizon(&spec)), 1e-7)?;
        let k = kspace_mean_disp(&spec, bloch, &quad)?;
        println!(
            "{va:>5} {g:>5} {theta:>6.3} {phi:>6.3} {:>12.8} {:>12.8} {:>12.8}",
            real.value,
            k.result.value,
            analytic_mean_disp(&spec, bloch)?
        );
    }
    Ok(())
}
