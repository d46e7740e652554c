//! Band structure, PT phase and winding for a few couplings.

use std::f64::consts::PI;

use ptwalk::bloch::{band_eigenvalues, full_breaking_scale, pt_threshold, winding_number, DEFAULT_NK};
use ptwalk::lattice::{Boundary, LatticeSpec};
use ptwalk::sweep::classify_phase;

fn main() -> ptwalk::Result<()> {
    for (va, vb, gamma) in [(0.75, 0.25, 0.3), (0.25, 0.75, 0.5), (0.5, 0.5, 0.2), (0.3, 0.2, 0.8)] {
        let spec = LatticeSpec::new(41, va, vb, gamma, Boundary::Periodic)?;
        let phase = classify_phase(&spec);
        let winding = match winding_number(&spec, DEFAULT_NK) {
            Ok(w) if w.well_defined => w.winding.to_string(),
            _ => "undefined (gap closed)".to_string(),
        };
        println!(
            "v_a={va} v_b={vb} gamma={gamma}: {} (gamma_PT={:.3}, full breaking at {:.3}), winding {winding}",
            phase.phase,
            pt_threshold(&spec),
            full_breaking_scale(&spec),
        );
        for k in [0.0, PI / 2.0, PI] {
            let l = band_eigenvalues(&spec, k).lambda_plus;
            println!("  k={k:.4}  lambda+ = {:+.6} {:+.6}i", l.re, l.im);
        }
    }
    Ok(())
}
