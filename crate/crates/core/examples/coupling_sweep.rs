//! Topological step of ⟨Δm⟩ in v_a/v_t for north, equator and south starts.

use std::f64::consts::PI;

use ptwalk::lattice::BlochState;
use ptwalk::sweep::{sweep_coupling, Axis, CouplingSweep, SweepOptions};

fn main() -> ptwalk::Result<()> {
    let cfg = CouplingSweep {
        v_a: Axis::new("va", 0.0, 1.0, 11)?,
        gamma: 0.5,
        states: vec![BlochState::north(), BlochState::new(PI / 2.0, 0.0)?, BlochState::south()],
    };
    let table = sweep_coupling(&cfg, &SweepOptions::linear())?;
    table.write_csv(&["coupling sweep, N=41 open, gamma=0.5 v_t".into()], std::io::stdout().lock())?;
    eprintln!("{} rows, {} not converged, {:.1}s", table.rows.len(), table.failures(), table.wall_time_s);
    Ok(())
}
