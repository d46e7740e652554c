//! Parameter-grid drivers.
//!
//! Each grid point is an independent task; tasks run on a rayon pool and are
//! collected in grid order, so output is identical for any worker count.
//! Failed points stay in the table as flagged rows.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{analytic_mean_disp, pt_threshold};
use crate::error::{Error, Result};
use crate::lattice::{BlochState, Boundary, LatticeSpec, DEFAULT_DIMERS};
use crate::observables::{
    default_horizon, fit_effective_mass, linear_mean_disp, nonlinear_mean_disp, quasiclassical_part, MassFit,
    MeanDispResult, QuasiclassicalModel, QuasiclassicalSample, DEFAULT_TOL,
};
use crate::propagate::{NonlinearSpec, StepControl, DEFAULT_MAX_STEPS, DEFAULT_REL_TOL};
use crate::format_float;

/// Lattice size used for the Kerr-nonlinear phase diagrams.
pub const NONLINEAR_DIMERS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PtSymmetric,
    PtBroken,
    FullyBroken,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PtSymmetric => "pt-symmetric",
            Phase::PtBroken => "pt-broken",
            Phase::FullyBroken => "fully-broken",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub v_a: f64,
    pub v_b: f64,
    pub gamma: f64,
    pub phase: Phase,
    /// `γ` sits on `|v_a − v_b|` or on `v_a + v_b` (within `1e-12·v_t`).
    pub boundary: bool,
}

/// Symmetric for `γ < |v_a − v_b|`, fully broken for `γ > v_a + v_b`,
/// broken otherwise. Points on either threshold go to the broken phase and
/// carry the boundary flag.
pub fn classify_phase(spec: &LatticeSpec) -> PhasePoint {
    let band = 1e-12 * spec.total_coupling();
    let gap = pt_threshold(spec);
    let top = spec.total_coupling();
    let g = spec.gamma;
    let boundary = (g - gap).abs() <= band || (g - top).abs() <= band;
    let phase = if g < gap - band {
        Phase::PtSymmetric
    } else if g > top + band {
        Phase::FullyBroken
    } else {
        Phase::PtBroken
    };
    PhasePoint {
        v_a: spec.intra,
        v_b: spec.inter,
        gamma: g,
        phase,
        boundary,
    }
}

/// Evenly spaced values `min..=max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(name: &str, min: f64, max: f64, count: usize) -> Result<Self> {
        let axis = Axis {
            name: name.to_string(),
            min,
            max,
            count,
        };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::param("axis", format!("{}: count must be >= 2, got {}", self.name, self.count)));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::param("axis", format!("{}: need min < max, got {}..{}", self.name, self.min, self.max)));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| if i + 1 == self.count { self.max } else { self.min + step * i as f64 })
            .collect()
    }
}

/// Up to two axes; points enumerate the first axis slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: Vec<Axis>,
}

impl SweepGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::param("grid", format!("need 1 or 2 axes, got {}", axes.len())));
        }
        for a in &axes {
            a.validate()?;
        }
        Ok(SweepGrid { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.axes {
            let vals = axis.values();
            out = out
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// Settings shared by every point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub n_dimers: usize,
    pub boundary: Boundary,
    /// Convergence tolerance of the ⟨Δm⟩ integral.
    pub tol: f64,
    pub rel_tol: f64,
    pub max_steps: u64,
    /// Overrides the default step `0.02/(v_a + v_b + γ)`.
    pub dt: Option<f64>,
    /// Overrides the default horizon cap.
    pub t_max: Option<f64>,
    /// Worker threads; 0 picks the rayon default.
    pub jobs: usize,
}

impl SweepOptions {
    pub fn linear() -> Self {
        SweepOptions {
            n_dimers: DEFAULT_DIMERS,
            boundary: Boundary::Open,
            tol: DEFAULT_TOL,
            rel_tol: DEFAULT_REL_TOL,
            max_steps: DEFAULT_MAX_STEPS,
            dt: None,
            t_max: None,
            jobs: 0,
        }
    }

    pub fn nonlinear() -> Self {
        SweepOptions {
            n_dimers: NONLINEAR_DIMERS,
            ..Self::linear()
        }
    }

    pub fn step_control(&self, spec: &LatticeSpec) -> StepControl {
        let mut ctrl = StepControl::new(spec, self.t_max.unwrap_or_else(|| default_horizon(spec)))
            .with_rel_tol(self.rel_tol)
            .with_max_steps(self.max_steps);
        if let Some(dt) = self.dt {
            ctrl = ctrl.with_dt(dt);
        }
        ctrl
    }

    fn spec(&self, v_a_ratio: f64, gamma_ratio: f64) -> Result<LatticeSpec> {
        LatticeSpec::from_ratio(self.n_dimers, v_a_ratio, gamma_ratio, self.boundary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub v_a: f64,
    pub v_b: f64,
    pub gamma: f64,
    pub theta: f64,
    pub phi: f64,
    pub eta: f64,
    pub mean_disp: f64,
    pub tail: f64,
    pub converged: bool,
    pub phase: Phase,
    pub flag: String,
    /// Values for the table's extra columns, in order.
    pub extra: Vec<f64>,
}

pub const BASE_COLUMNS: [&str; 11] = [
    "v_a", "v_b", "gamma", "theta", "phi", "eta", "mean_disp", "tail", "converged", "phase", "flag",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: String,
    pub grid: SweepGrid,
    pub extra_columns: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub wall_time_s: f64,
}

impl SweepTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.converged).count()
    }

    pub fn columns(&self) -> Vec<String> {
        BASE_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.extra_columns.iter().cloned())
            .collect()
    }

    /// `#` comment lines, header row, one row per point.
    pub fn write_csv<W: Write>(&self, comments: &[String], mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Io {
            context: format!("writing {} table", self.kind),
            source: e,
        };
        for c in comments {
            writeln!(out, "# {c}").map_err(io)?;
        }
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(self.columns()).map_err(ser)?;
        for r in &self.rows {
            let mut rec: Vec<String> = [r.v_a, r.v_b, r.gamma, r.theta, r.phi, r.eta, r.mean_disp, r.tail]
                .iter()
                .map(|&x| format_float(x))
                .collect();
            rec.push(r.converged.to_string());
            rec.push(r.phase.to_string());
            rec.push(r.flag.clone());
            rec.extend(r.extra.iter().map(|&x| format_float(x)));
            w.write_record(&rec).map_err(ser)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    /// Grid metadata, failure count and wall time.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "sweep": self.kind,
            "grid": self.grid,
            "rows": self.rows.len(),
            "failures": self.failures(),
            "wall_time_s": self.wall_time_s,
        })
    }
}

pub(crate) fn flag_for(result: Option<&MeanDispResult>, phase: &PhasePoint) -> String {
    let mut parts = Vec::new();
    match result {
        None => parts.push("error"),
        Some(r) if r.status.is_failure() => parts.push(r.status.as_str()),
        Some(r) if !r.converged => parts.push("not-converged"),
        Some(_) => parts.push("ok"),
    }
    if phase.boundary {
        parts.push("boundary");
    }
    parts.join("|")
}

fn run_pool<T: Sync, R: Send>(jobs: usize, tasks: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::param("jobs", e.to_string()))?;
    Ok(pool.install(|| tasks.par_iter().map(&f).collect()))
}

fn check_ratio_axis(axis: &Axis) -> Result<()> {
    axis.validate()?;
    if axis.min < 0.0 || axis.max > 1.0 {
        return Err(Error::param("v_a", format!("{}: v_a/v_t must lie in [0, 1]", axis.name)));
    }
    Ok(())
}

/// Row for a point whose lattice could not even be built.
fn error_row(v_a: f64, gamma: f64, bloch: BlochState, eta: f64, n_extra: usize) -> SweepRow {
    SweepRow {
        v_a,
        v_b: 1.0 - v_a,
        gamma,
        theta: bloch.theta,
        phi: bloch.phi,
        eta,
        mean_disp: f64::NAN,
        tail: f64::INFINITY,
        converged: false,
        phase: Phase::PtBroken,
        flag: "error".into(),
        extra: vec![f64::NAN; n_extra],
    }
}

fn row(spec: &LatticeSpec, bloch: BlochState, eta: f64, r: &MeanDispResult, extra: Vec<f64>) -> SweepRow {
    let phase = classify_phase(spec);
    SweepRow {
        v_a: spec.intra,
        v_b: spec.inter,
        gamma: spec.gamma,
        theta: bloch.theta,
        phi: bloch.phi,
        eta,
        mean_disp: r.value,
        tail: r.tail_estimate,
        converged: r.converged,
        phase: phase.phase,
        flag: flag_for(Some(r), &phase),
        extra,
    }
}

/// ⟨Δm⟩ against `v_a/v_t` at fixed `γ/v_t`, one curve per Bloch state,
/// with the closed-form value alongside (`NaN` where it is undefined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSweep {
    pub v_a: Axis,
    pub gamma: f64,
    pub states: Vec<BlochState>,
}

pub fn sweep_coupling(cfg: &CouplingSweep, opts: &SweepOptions) -> Result<SweepTable> {
    check_ratio_axis(&cfg.v_a)?;
    if !(cfg.gamma > 0.0) {
        return Err(Error::param("gamma", "coupling sweep needs gamma > 0"));
    }
    if cfg.states.is_empty() {
        return Err(Error::param("states", "need at least one Bloch state"));
    }
    let start = Instant::now();
    let tasks: Vec<(BlochState, f64)> = cfg
        .states
        .iter()
        .flat_map(|&b| cfg.v_a.values().into_iter().map(move |va| (b, va)))
        .collect();
    let rows = run_pool(opts.jobs, &tasks, |&(bloch, va)| {
        let spec = match opts.spec(va, cfg.gamma) {
            Ok(s) => s,
            Err(_) => return error_row(va, cfg.gamma, bloch, 0.0, 1),
        };
        let analytic = analytic_mean_disp(&spec, bloch).unwrap_or(f64::NAN);
        match linear_mean_disp(&spec, bloch, &opts.step_control(&spec), opts.tol) {
            Ok(r) => row(&spec, bloch, 0.0, &r, vec![analytic]),
            Err(_) => error_row(va, cfg.gamma, bloch, 0.0, 1),
        }
    })?;
    Ok(SweepTable {
        kind: "coupling".into(),
        grid: SweepGrid::new(vec![cfg.v_a.clone()])?,
        extra_columns: vec!["analytic".into()],
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Quasiclassical part `⟨Δm⟩(θ, φ) − ⟨Δm⟩(θ, 0)` over `(v_a/v_t, γ/v_t)`,
/// next to the drift model `p0·μ⁻¹/(4γ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaMapSweep {
    pub v_a: Axis,
    pub gamma: Axis,
    pub state: BlochState,
}

pub fn sweep_gamma_map(cfg: &GammaMapSweep, opts: &SweepOptions) -> Result<SweepTable> {
    check_ratio_axis(&cfg.v_a)?;
    cfg.gamma.validate()?;
    if cfg.gamma.min < 0.05 {
        return Err(Error::param("gamma", format!("gamma axis must stay >= 0.05 v_t, got {}", cfg.gamma.min)));
    }
    let start = Instant::now();
    let grid = SweepGrid::new(vec![cfg.v_a.clone(), cfg.gamma.clone()])?;
    let points = grid.points();
    let base_state = BlochState::new(cfg.state.theta, 0.0)?;
    let rows = run_pool(opts.jobs, &points, |p| {
        let (va, g) = (p[0], p[1]);
        let spec = match opts.spec(va, g) {
            Ok(s) => s,
            Err(_) => return error_row(va, g, cfg.state, 0.0, 2),
        };
        let ctrl = opts.step_control(&spec);
        let model = QuasiclassicalModel::new(&spec, cfg.state).map(|m| m.drift).unwrap_or(f64::NAN);
        let full = linear_mean_disp(&spec, cfg.state, &ctrl, opts.tol);
        let base = linear_mean_disp(&spec, base_state, &ctrl, opts.tol);
        match (full, base) {
            (Ok(full), Ok(base)) => {
                let quasi = quasiclassical_part(&spec, cfg.state, g, &base, &full).unwrap_or(f64::NAN);
                // the row is only as good as the worse of the two runs
                let worst = if base.converged { full } else { base };
                let mut r = row(&spec, cfg.state, 0.0, &worst, vec![quasi, model]);
                r.mean_disp = full.value;
                r
            }
            _ => error_row(va, g, cfg.state, 0.0, 2),
        }
    })?;
    Ok(SweepTable {
        kind: "gamma-map".into(),
        grid,
        extra_columns: vec!["quasiclassical".into(), "model".into()],
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Change of ⟨Δm⟩ caused by the Kerr term, walker started on `|0, A⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearSweep {
    pub v_a: Axis,
    pub gamma: Axis,
    pub eta: f64,
}

/// Each row carries the nonlinear ⟨Δm⟩ in `mean_disp` and the extra columns
/// `baseline` (linear run on the same lattice) and `delta`. At `η = 0` the
/// nonlinear run is skipped and `delta` is exactly zero.
pub fn sweep_nonlinear(cfg: &NonlinearSweep, opts: &SweepOptions) -> Result<SweepTable> {
    check_ratio_axis(&cfg.v_a)?;
    cfg.gamma.validate()?;
    if cfg.gamma.min <= 0.0 {
        return Err(Error::param("gamma", "gamma axis must be positive"));
    }
    let nl = NonlinearSpec::new(cfg.eta)?;
    let start = Instant::now();
    let grid = SweepGrid::new(vec![cfg.v_a.clone(), cfg.gamma.clone()])?;
    let points = grid.points();
    let bloch = BlochState::north();
    let rows = run_pool(opts.jobs, &points, |p| {
        let (va, g) = (p[0], p[1]);
        let spec = match opts.spec(va, g) {
            Ok(s) => s,
            Err(_) => return error_row(va, g, bloch, cfg.eta, 2),
        };
        let ctrl = opts.step_control(&spec);
        let baseline = match linear_mean_disp(&spec, bloch, &ctrl, opts.tol) {
            Ok(b) => b,
            Err(_) => return error_row(va, g, bloch, cfg.eta, 2),
        };
        if nl.eta == 0.0 {
            return row(&spec, bloch, cfg.eta, &baseline, vec![baseline.value, 0.0]);
        }
        match nonlinear_mean_disp(&spec, &nl, bloch, &ctrl, opts.tol) {
            Ok(full) => {
                let delta = full.value - baseline.value;
                let worst = if baseline.converged { full } else { baseline };
                let mut r = row(&spec, bloch, cfg.eta, &worst, vec![baseline.value, delta]);
                r.mean_disp = full.value;
                r
            }
            Err(_) => error_row(va, g, bloch, cfg.eta, 2),
        }
    })?;
    Ok(SweepTable {
        kind: "nonlinear".into(),
        grid,
        extra_columns: vec!["baseline".into(), "delta".into()],
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Quasiclassical samples over `v_a/v_t × γ/v_t × states` and the
/// per-`v_a` effective-mass fit. Non-converged points are dropped from the
/// fit and counted in `skipped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassFitReport {
    pub samples: Vec<QuasiclassicalSample>,
    pub fits: Vec<MassFit>,
    pub skipped: usize,
    pub wall_time_s: f64,
}

pub fn sweep_mass_fit(v_a: &[f64], gammas: &[f64], states: &[BlochState], opts: &SweepOptions) -> Result<MassFitReport> {
    if v_a.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::param("v_a", "v_a/v_t must lie in [0, 1]"));
    }
    if gammas.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::param("gamma", "all gamma values must be positive"));
    }
    let start = Instant::now();
    let tasks: Vec<(f64, f64, BlochState)> = v_a
        .iter()
        .flat_map(|&va| gammas.iter().flat_map(move |&g| states.iter().map(move |&b| (va, g, b))))
        .collect();
    let results = run_pool(opts.jobs, &tasks, |&(va, g, b)| -> Result<Option<QuasiclassicalSample>> {
        let spec = opts.spec(va, g)?;
        let ctrl = opts.step_control(&spec);
        let base = linear_mean_disp(&spec, BlochState::new(b.theta, 0.0)?, &ctrl, opts.tol)?;
        let full = linear_mean_disp(&spec, b, &ctrl, opts.tol)?;
        Ok(quasiclassical_part(&spec, b, g, &base, &full).ok().map(|value| QuasiclassicalSample {
            spec,
            bloch: b,
            gamma: g,
            value,
        }))
    })?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    let fits = fit_effective_mass(&samples)?;
    Ok(MassFitReport {
        samples,
        fits,
        skipped,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Shorthand used by the `phase` subcommand: a full `(v_a/v_t, γ/v_t)` grid
/// of classifications.
pub fn phase_grid(v_a: &Axis, gamma: &Axis) -> Result<Vec<PhasePoint>> {
    check_ratio_axis(v_a)?;
    gamma.validate()?;
    SweepGrid::new(vec![v_a.clone(), gamma.clone()])?
        .points()
        .iter()
        .map(|p| LatticeSpec::from_ratio(3, p[0], p[1], Boundary::Open).map(|s| classify_phase(&s)))
        .collect()
}
