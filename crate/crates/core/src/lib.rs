//! Quantum walks on lossy and PT-symmetric SSH dimer lattices.
//!
//! The crate computes the mean displacement ⟨Δm⟩ of a walker launched in the
//! central dimer by three independent routes:
//!
//! * real-space time integration on a finite lattice ([`propagate`] +
//!   [`observables`]),
//! * momentum-space quadrature over the Brillouin zone ([`bloch::kspace_mean_disp`]),
//! * the closed form `cos²(θ/2)·W + sinθ sinφ·μ⁻¹/(4γ)` ([`bloch::analytic_mean_disp`]).
//!
//! On top of these, [`sweep`] drives parameter grids (coupling sweeps,
//! γ-maps, Kerr-nonlinear phase diagrams) and [`cli`] exposes them as the
//! `ptwalk` command.
//!
//! Units: all energies are in units of the total coupling `v_t = v_a + v_b`
//! when built through [`LatticeSpec::from_ratio`]; times are `t·v_t`.

pub mod bloch;
pub mod cli;
pub mod error;
pub mod lattice;
pub mod observables;
pub mod propagate;
pub mod quadrature;
pub mod sweep;

pub use error::{Error, Result};
pub use lattice::{BlochState, Boundary, ComplexMatrix, LatticeSpec, SiteIndex, Sublattice, WaveFunction};
pub use num_complex::Complex64;

/// Shortest round-trip form, switching to exponent notation outside
/// `[1e-4, 1e15)` so tiny tails do not print as long runs of zeros.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}
