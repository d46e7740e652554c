//! Real-space time evolution.
//!
//! Linear runs step with a precomputed one-step propagator `exp(-iH dt)`.
//! Kerr-nonlinear runs use classical RK4 with step-doubling error control.
//! Both can either store a [`WaveTrajectory`] or stream every state into an
//! [`Observer`], which may stop the run early.

use std::io::Write;
use std::ops::ControlFlow;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_h_lossy, build_h_pt, ComplexMatrix, LatticeSpec, Sublattice, WaveFunction};
use crate::format_float;

pub const DEFAULT_REL_TOL: f64 = 1e-8;
pub const DEFAULT_INTENSITY_CAP: f64 = 1e12;
pub const DEFAULT_MAX_STEPS: u64 = 10_000_000;
pub const MIN_STEP: f64 = 1e-12;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    /// Linear step; for nonlinear runs the initial and largest step.
    pub dt: f64,
    pub t_max: f64,
    /// Local error tolerance of the adaptive nonlinear stepper, per unit time
    /// and relative to the norm.
    pub rel_tol: f64,
    pub intensity_cap: f64,
    /// Keep every `stride`-th state when storing a trajectory.
    pub stride: usize,
    /// Accepted-step budget of a nonlinear run.
    pub max_steps: u64,
}

impl StepControl {
    /// `dt = 0.02 / (v_a + v_b + γ)`.
    pub fn default_dt(spec: &LatticeSpec) -> f64 {
        0.02 / (spec.intra + spec.inter + spec.gamma)
    }

    pub fn new(spec: &LatticeSpec, t_max: f64) -> Self {
        StepControl {
            dt: Self::default_dt(spec),
            t_max,
            rel_tol: DEFAULT_REL_TOL,
            intensity_cap: DEFAULT_INTENSITY_CAP,
            stride: 1,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::param("t_max", format!("must be positive, got {}", self.t_max)));
        }
        if !(self.rel_tol > 1e-14 && self.rel_tol < 1e-2) {
            return Err(Error::param("rel_tol", format!("must lie in (1e-14, 1e-2), got {}", self.rel_tol)));
        }
        if !(self.intensity_cap > 1.0) {
            return Err(Error::param("intensity_cap", format!("must exceed 1, got {}", self.intensity_cap)));
        }
        if self.stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::param("max_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    LinearPt,
    LinearLossy,
    NonlinearPt,
}

impl TrajectoryKind {
    /// Whether ⟨Δm⟩ carries the `e^{-2γt}` weight for this gauge.
    pub fn pt_gauge(self) -> bool {
        !matches!(self, TrajectoryKind::LinearLossy)
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// Reached `t_max`.
    Completed,
    /// The observer asked to stop.
    Stopped,
    /// Intensity exceeded the cap or became non-finite.
    Diverged,
    /// Adaptive step fell below [`MIN_STEP`].
    Stalled,
    BudgetExhausted,
}

impl RunStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, RunStatus::Diverged | RunStatus::Stalled | RunStatus::BudgetExhausted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Stopped => "stopped",
            RunStatus::Diverged => "diverged",
            RunStatus::Stalled => "stalled",
            RunStatus::BudgetExhausted => "budget",
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearSpec {
    pub eta: f64,
}

impl NonlinearSpec {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::param("eta", format!("must be finite and >= 0, got {eta}")));
        }
        Ok(NonlinearSpec { eta })
    }
}

/// A lattice Hamiltonian tagged with the gauge it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub spec: LatticeSpec,
    pub kind: TrajectoryKind,
    pub matrix: ComplexMatrix,
}

impl Hamiltonian {
    pub fn pt(spec: &LatticeSpec) -> Self {
        Hamiltonian {
            spec: *spec,
            kind: TrajectoryKind::LinearPt,
            matrix: build_h_pt(spec),
        }
    }

    pub fn lossy(spec: &LatticeSpec) -> Self {
        Hamiltonian {
            spec: *spec,
            kind: TrajectoryKind::LinearLossy,
            matrix: build_h_lossy(spec),
        }
    }

    /// Any square matrix of dimension `2N`.
    pub fn custom(spec: &LatticeSpec, kind: TrajectoryKind, matrix: ComplexMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        if matrix.nrows() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: matrix.nrows(),
            });
        }
        Ok(Hamiltonian {
            spec: *spec,
            kind,
            matrix,
        })
    }
}

/// Receives every state of a run, in time order, starting with `t = 0`.
pub trait Observer {
    fn observe(&mut self, t: f64, amplitudes: &[Complex64]) -> ControlFlow<()>;
}

impl<F: FnMut(f64, &[Complex64]) -> ControlFlow<()>> Observer for F {
    fn observe(&mut self, t: f64, amplitudes: &[Complex64]) -> ControlFlow<()> {
        self(t, amplitudes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub steps: u64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveTrajectory {
    /// Strictly increasing times, first at `t = 0`.
    pub samples: Vec<WaveFunction>,
    pub spec: LatticeSpec,
    pub kind: TrajectoryKind,
    pub status: RunStatus,
    pub steps: u64,
}

impl WaveTrajectory {
    pub fn last(&self) -> Option<&WaveFunction> {
        self.samples.last()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.time)
    }
}

fn check_state(spec: &LatticeSpec, psi0: &WaveFunction) -> Result<()> {
    if psi0.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: psi0.len(),
        });
    }
    if !psi0.is_finite() {
        return Err(Error::param("psi0", "amplitudes must be finite"));
    }
    Ok(())
}

fn over_cap(psi: &[Complex64], cap: f64) -> bool {
    psi.iter().any(|z| !(z.norm_sqr() <= cap))
}

/// `exp(-iH dt)` by scaling and squaring.
pub fn step_propagator(h: &ComplexMatrix, dt: f64) -> ComplexMatrix {
    (h * Complex64::new(0.0, -dt)).exp()
}

/// Steps `Ψ(t_n) = Uⁿ Ψ(0)` and streams each state into `observer`.
///
/// `dt` is shrunk slightly if needed so that `t_max` is hit exactly.
pub fn evolve_linear_observed<O: Observer + ?Sized>(
    h: &Hamiltonian,
    psi0: &WaveFunction,
    ctrl: &StepControl,
    observer: &mut O,
) -> Result<RunSummary> {
    ctrl.validate()?;
    check_state(&h.spec, psi0)?;
    let n_steps = (ctrl.t_max / ctrl.dt - 1e-9).ceil().max(1.0) as u64;
    let dt = ctrl.t_max / n_steps as f64;
    let u = step_propagator(&h.matrix, dt);

    let mut cur = DVector::from_column_slice(&psi0.amplitudes);
    let mut next = DVector::from_element(cur.len(), ZERO);
    let mut summary = RunSummary {
        status: RunStatus::Completed,
        steps: 0,
        t_end: 0.0,
    };
    if observer.observe(0.0, cur.as_slice()).is_break() {
        summary.status = RunStatus::Stopped;
        return Ok(summary);
    }
    for n in 1..=n_steps {
        next.gemv(Complex64::new(1.0, 0.0), &u, &cur, ZERO);
        std::mem::swap(&mut cur, &mut next);
        let t = if n == n_steps { ctrl.t_max } else { n as f64 * dt };
        summary.steps = n;
        summary.t_end = t;
        let diverged = over_cap(cur.as_slice(), ctrl.intensity_cap);
        if observer.observe(t, cur.as_slice()).is_break() {
            summary.status = RunStatus::Stopped;
            break;
        }
        if diverged {
            summary.status = RunStatus::Diverged;
            break;
        }
    }
    Ok(summary)
}

struct Recorder {
    samples: Vec<WaveFunction>,
    stride: usize,
    seen: usize,
    // last state offered, kept so the end point is always stored
    last: Option<WaveFunction>,
}

impl Recorder {
    fn new(stride: usize) -> Self {
        Recorder {
            samples: Vec::new(),
            stride,
            seen: 0,
            last: None,
        }
    }

    fn offer(&mut self, t: f64, psi: &[Complex64]) {
        if self.seen % self.stride == 0 {
            self.samples.push(WaveFunction::new(psi.to_vec(), t));
            self.last = None;
        } else {
            self.last = Some(WaveFunction::new(psi.to_vec(), t));
        }
        self.seen += 1;
    }

    fn finish(mut self) -> Vec<WaveFunction> {
        if let Some(last) = self.last.take() {
            self.samples.push(last);
        }
        self.samples
    }
}

/// Stored-trajectory form of [`evolve_linear_observed`].
///
/// A diverged run is returned truncated, with `status` set accordingly.
pub fn evolve_linear(h: &Hamiltonian, psi0: &WaveFunction, ctrl: &StepControl) -> Result<WaveTrajectory> {
    let mut rec = Recorder::new(ctrl.stride);
    let summary = evolve_linear_observed(h, psi0, ctrl, &mut |t: f64, psi: &[Complex64]| {
        rec.offer(t, psi);
        ControlFlow::Continue(())
    })?;
    Ok(WaveTrajectory {
        samples: rec.finish(),
        spec: h.spec,
        kind: h.kind,
        status: summary.status,
        steps: summary.steps,
    })
}

/// Compressed-row copy of the (sparse) lattice Hamiltonian.
struct SparseH {
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl SparseH {
    fn from_dense(m: &ComplexMatrix) -> Self {
        let mut row_start = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != ZERO {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_start.push(cols.len());
        }
        SparseH { row_start, cols, vals }
    }
}

/// `dΨ/dt = -i (H Ψ + η |Ψ|² Ψ)`.
fn kerr_rhs(h: &SparseH, eta: f64, psi: &[Complex64], out: &mut [Complex64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = psi[r] * (eta * psi[r].norm_sqr());
        for j in h.row_start[r]..h.row_start[r + 1] {
            acc += h.vals[j] * psi[h.cols[j]];
        }
        *o = -I * acc;
    }
}

struct Rk4 {
    k1: Vec<Complex64>,
    k2: Vec<Complex64>,
    k3: Vec<Complex64>,
    k4: Vec<Complex64>,
    tmp: Vec<Complex64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Rk4 {
            k1: vec![ZERO; n],
            k2: vec![ZERO; n],
            k3: vec![ZERO; n],
            k4: vec![ZERO; n],
            tmp: vec![ZERO; n],
        }
    }

    fn step(&mut self, h: &SparseH, eta: f64, psi: &[Complex64], dt: f64, out: &mut [Complex64]) {
        let n = psi.len();
        kerr_rhs(h, eta, psi, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = psi[i] + self.k1[i] * (0.5 * dt);
        }
        kerr_rhs(h, eta, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = psi[i] + self.k2[i] * (0.5 * dt);
        }
        kerr_rhs(h, eta, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = psi[i] + self.k3[i] * dt;
        }
        kerr_rhs(h, eta, &self.tmp, &mut self.k4);
        for i in 0..n {
            out[i] = psi[i] + (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]) * (dt / 6.0);
        }
    }
}

fn l2(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Integrates `i dΨ/dt = H_PT Ψ + η diag(|Ψ_m|²) Ψ` and streams states.
///
/// Each accepted step of size `h` is checked against two half steps. The
/// step is halved while `‖fine − coarse‖ > rel_tol·‖Ψ‖·h` and doubled
/// (up to `ctrl.dt`) when the error falls below a sixteenth of that bound.
/// The half-step state and the end state are both passed to the observer,
/// so consecutive samples come in equally spaced pairs.
pub fn evolve_nonlinear_observed<O: Observer + ?Sized>(
    spec: &LatticeSpec,
    nl: &NonlinearSpec,
    psi0: &WaveFunction,
    ctrl: &StepControl,
    observer: &mut O,
) -> Result<RunSummary> {
    ctrl.validate()?;
    spec.validate()?;
    NonlinearSpec::new(nl.eta)?;
    check_state(spec, psi0)?;
    let h = SparseH::from_dense(&build_h_pt(spec));
    let eta = nl.eta;
    let n = psi0.len();
    let mut rk = Rk4::new(n);
    let mut psi = psi0.amplitudes.clone();
    let mut coarse = vec![ZERO; n];
    let mut mid = vec![ZERO; n];
    let mut fine = vec![ZERO; n];

    let mut summary = RunSummary {
        status: RunStatus::Completed,
        steps: 0,
        t_end: 0.0,
    };
    if observer.observe(0.0, &psi).is_break() {
        summary.status = RunStatus::Stopped;
        return Ok(summary);
    }
    let mut t = 0.0;
    let mut dt = ctrl.dt.min(ctrl.t_max);
    while t < ctrl.t_max {
        let remaining = ctrl.t_max - t;
        let last = dt >= remaining * (1.0 - 1e-12);
        let step = if last { remaining } else { dt };
        rk.step(&h, eta, &psi, step, &mut coarse);
        rk.step(&h, eta, &psi, 0.5 * step, &mut mid);
        rk.step(&h, eta, &mid, 0.5 * step, &mut fine);
        let err = coarse.iter().zip(&fine).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let norm = l2(&fine);
        // below the roundoff floor the estimate carries no information
        let bound = (ctrl.rel_tol * norm * step).max(64.0 * f64::EPSILON * norm);
        if !err.is_finite() || !bound.is_finite() {
            summary.status = RunStatus::Diverged;
            break;
        }
        if err > bound {
            dt = 0.5 * step;
            if dt < MIN_STEP {
                summary.status = RunStatus::Stalled;
                break;
            }
            continue;
        }
        t = if last { ctrl.t_max } else { t + step };
        std::mem::swap(&mut psi, &mut fine);
        summary.steps += 1;
        summary.t_end = t;
        if observer.observe(t - 0.5 * step, &mid).is_break() || observer.observe(t, &psi).is_break() {
            summary.status = RunStatus::Stopped;
            break;
        }
        if over_cap(&psi, ctrl.intensity_cap) {
            summary.status = RunStatus::Diverged;
            break;
        }
        if summary.steps >= ctrl.max_steps && t < ctrl.t_max {
            summary.status = RunStatus::BudgetExhausted;
            break;
        }
        if !last && err < bound / 16.0 {
            dt = (2.0 * step).min(ctrl.dt);
        }
    }
    Ok(summary)
}

/// Stored-trajectory form of [`evolve_nonlinear_observed`]; keeps accepted
/// step end points only.
pub fn evolve_nonlinear(
    spec: &LatticeSpec,
    nl: &NonlinearSpec,
    psi0: &WaveFunction,
    ctrl: &StepControl,
) -> Result<WaveTrajectory> {
    let mut rec = Recorder::new(ctrl.stride);
    let mut half = false;
    let summary = evolve_nonlinear_observed(spec, nl, psi0, ctrl, &mut |t: f64, psi: &[Complex64]| {
        // skip the half-step states
        if !half {
            rec.offer(t, psi);
        }
        half = !half;
        ControlFlow::Continue(())
    })?;
    Ok(WaveTrajectory {
        samples: rec.finish(),
        spec: *spec,
        kind: TrajectoryKind::NonlinearPt,
        status: summary.status,
        steps: summary.steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntensityRow {
    pub t: f64,
    pub cell: i64,
    pub sublattice: Sublattice,
    pub intensity: f64,
}

/// `|Ψ_m(t)|²` per sample, time-major, then cell, then A/B.
pub fn intensity_map(traj: &WaveTrajectory) -> Result<Vec<IntensityRow>> {
    if traj.samples.is_empty() {
        return Err(Error::param("trajectory", "no samples"));
    }
    let mut rows = Vec::with_capacity(traj.samples.len() * traj.spec.dim());
    for s in &traj.samples {
        for (i, z) in s.amplitudes.iter().enumerate() {
            let site = traj.spec.site(i);
            rows.push(IntensityRow {
                t: s.time,
                cell: site.cell,
                sublattice: site.sublattice,
                intensity: z.norm_sqr(),
            });
        }
    }
    Ok(rows)
}

/// Writes `#`-prefixed comment lines, then `t,cell,sublattice,intensity`.
pub fn write_intensity_csv<W: Write>(rows: &[IntensityRow], comments: &[String], mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        context: "writing intensity table".into(),
        source: e,
    };
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["t", "cell", "sublattice", "intensity"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for r in rows {
        w.write_record(&[format_float(r.t), r.cell.to_string(), r.sublattice.to_string(), format_float(r.intensity)])
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::max_growth_rate;
    use crate::lattice::{build_h0, localized_state, BlochState, Boundary, SiteIndex};
    use proptest::prelude::*;

    fn spec(n: usize, va: f64, vb: f64, g: f64, b: Boundary) -> LatticeSpec {
        LatticeSpec::new(n, va, vb, g, b).unwrap()
    }

    fn dist(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn control_validation() {
        let s = spec(5, 0.5, 0.5, 0.2, Boundary::Open);
        let c = StepControl::new(&s, 10.0);
        assert!((c.dt - 0.02 / 1.2).abs() < 1e-15);
        assert!(c.validate().is_ok());
        assert!(c.with_dt(0.0).validate().is_err());
        assert!(c.with_rel_tol(1e-15).validate().is_err());
        assert!(c.with_rel_tol(0.1).validate().is_err());
        assert!(c.with_stride(0).validate().is_err());
        assert!(NonlinearSpec::new(-0.1).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let s = spec(5, 0.5, 0.5, 0.2, Boundary::Open);
        let psi = WaveFunction::new(vec![ZERO; 4], 0.0);
        assert!(matches!(
            evolve_linear(&Hamiltonian::pt(&s), &psi, &StepControl::new(&s, 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(Hamiltonian::custom(&s, TrajectoryKind::LinearPt, ComplexMatrix::zeros(4, 4)).is_err());
    }

    #[test]
    fn hermitian_norm_conserved() {
        let s = spec(41, 0.3, 0.7, 0.0, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::new(1.0, 0.4).unwrap()).unwrap();
        let traj = evolve_linear(&Hamiltonian::pt(&s), &psi0, &StepControl::new(&s, 50.0)).unwrap();
        assert_eq!(traj.status, RunStatus::Completed);
        assert!((traj.last().unwrap().time - 50.0).abs() < 1e-12);
        for w in &traj.samples {
            assert!((w.norm_sqr() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eigenvector_only_picks_up_phase() {
        let s = spec(7, 0.4, 0.6, 0.0, Boundary::Periodic);
        let eig = build_h0(&s).symmetric_eigen();
        let v = eig.eigenvectors.column(3).into_owned();
        let psi0 = WaveFunction::new(v.as_slice().to_vec(), 0.0);
        let traj = evolve_linear(&Hamiltonian::pt(&s), &psi0, &StepControl::new(&s, 20.0)).unwrap();
        for w in &traj.samples {
            let overlap: Complex64 = psi0.amplitudes.iter().zip(&w.amplitudes).map(|(a, b)| a.conj() * b).sum();
            assert!((overlap.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_direct_exponential() {
        let s = spec(9, 0.35, 0.65, 0.4, Boundary::Open);
        let psi0 = localized_state(&s, 1, BlochState::new(0.7, 2.0).unwrap()).unwrap();
        let h = Hamiltonian::pt(&s);
        let t_max = 13.7;
        let traj = evolve_linear(&h, &psi0, &StepControl::new(&s, t_max)).unwrap();
        let direct = (&h.matrix * Complex64::new(0.0, -t_max)).exp() * DVector::from_column_slice(&psi0.amplitudes);
        let end = traj.last().unwrap();
        assert!((end.time - t_max).abs() < 1e-12);
        assert!(dist(&end.amplitudes, direct.as_slice()) < 1e-8);
    }

    #[test]
    fn pt_and_lossy_gauges() {
        let s = spec(11, 0.45, 0.55, 0.6, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::new(2.0, 1.0).unwrap()).unwrap();
        let ctrl = StepControl::new(&s, 15.0);
        let pt = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
        let lossy = evolve_linear(&Hamiltonian::lossy(&s), &psi0, &ctrl).unwrap();
        assert_eq!(pt.samples.len(), lossy.samples.len());
        for (a, b) in pt.samples.iter().zip(&lossy.samples) {
            let scale = (-s.gamma * a.time).exp();
            for (x, y) in a.amplitudes.iter().zip(&b.amplitudes) {
                assert!((x * scale - y).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn lossy_norm_decay_rate() {
        let s = spec(21, 0.3, 0.7, 0.5, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::new(1.3, 0.5).unwrap()).unwrap();
        let ctrl = StepControl::new(&s, 20.0).with_dt(5e-4);
        let traj = evolve_linear(&Hamiltonian::lossy(&s), &psi0, &ctrl).unwrap();
        let n = traj.samples.len();
        for j in 1..=20 {
            let i = j * (n - 2) / 21;
            let (a, b, c) = (&traj.samples[i - 1], &traj.samples[i], &traj.samples[i + 1]);
            let deriv = (c.norm_sqr() - a.norm_sqr()) / (c.time - a.time);
            let b_weight: f64 = b.amplitudes.iter().skip(1).step_by(2).map(|z| z.norm_sqr()).sum();
            let rhs = -4.0 * s.gamma * b_weight;
            assert!((deriv - rhs).abs() <= 1e-6 * rhs.abs(), "t={}: {deriv} vs {rhs}", b.time);
        }
    }

    #[test]
    fn norm_bounded_in_symmetric_phase_and_grows_in_broken() {
        let sym = spec(41, 0.2, 0.8, 0.3, Boundary::Periodic);
        let psi0 = localized_state(&sym, 0, BlochState::north()).unwrap();
        let traj = evolve_linear(&Hamiltonian::pt(&sym), &psi0, &StepControl::new(&sym, 60.0)).unwrap();
        let norms: Vec<f64> = traj.samples.iter().map(|w| w.norm_sqr()).collect();
        let (lo, hi) = norms.iter().fold((f64::MAX, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(hi / lo < 1e4);

        let broken = spec(41, 0.4, 0.6, 0.5, Boundary::Periodic);
        let traj = evolve_linear(&Hamiltonian::pt(&broken), &psi0, &StepControl::new(&broken, 40.0)).unwrap();
        let n = traj.samples.len();
        let (a, b) = (&traj.samples[9 * n / 10], &traj.samples[n - 1]);
        let rate = (b.norm_sqr().ln() - a.norm_sqr().ln()) / (b.time - a.time);
        assert!(rate > 0.0 && rate <= 2.0 * max_growth_rate(&broken) + 1e-3, "{rate}");
    }

    #[test]
    fn divergence_truncates() {
        let s = spec(11, 0.5, 0.5, 0.5, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let mut ctrl = StepControl::new(&s, 500.0);
        ctrl.intensity_cap = 1e4;
        let traj = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
        assert_eq!(traj.status, RunStatus::Diverged);
        assert!(traj.last().unwrap().time < 500.0);
        assert!(traj.samples.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn stride_keeps_end_point() {
        let s = spec(5, 0.5, 0.5, 0.1, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let ctrl = StepControl::new(&s, 1.0).with_dt(0.1).with_stride(3);
        let traj = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
        let times: Vec<f64> = traj.times().collect();
        assert_eq!(times.len(), 5);
        assert!((times[4] - 1.0).abs() < 1e-12);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn nonlinear_without_kerr_is_linear() {
        let s = spec(11, 0.3, 0.7, 0.4, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::new(0.9, 1.1).unwrap()).unwrap();
        let ctrl = StepControl::new(&s, 10.0).with_rel_tol(1e-11);
        let nl = evolve_nonlinear(&s, &NonlinearSpec::new(0.0).unwrap(), &psi0, &ctrl).unwrap();
        let lin = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
        assert_eq!(nl.status, RunStatus::Completed);
        let (a, b) = (nl.last().unwrap(), lin.last().unwrap());
        assert!((a.time - b.time).abs() < 1e-12);
        assert!(dist(&a.amplitudes, &b.amplitudes) < 1e-8);
    }

    #[test]
    fn nonlinear_conservative_limit() {
        let s = spec(11, 0.3, 0.7, 0.0, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::new(0.9, 1.1).unwrap()).unwrap();
        let ctrl = StepControl::new(&s, 30.0);
        let traj = evolve_nonlinear(&s, &NonlinearSpec::new(1.0).unwrap(), &psi0, &ctrl).unwrap();
        for w in &traj.samples {
            assert!((w.norm_sqr() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn nonlinear_phase_covariance() {
        let s = spec(9, 0.6, 0.4, 0.3, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::new(0.5, 0.0).unwrap()).unwrap();
        let rot = Complex64::from_polar(1.0, 0.77);
        let ctrl = StepControl::new(&s, 8.0);
        let nl = NonlinearSpec::new(0.5).unwrap();
        let a = evolve_nonlinear(&s, &nl, &psi0, &ctrl).unwrap();
        let b = evolve_nonlinear(&s, &nl, &psi0.scaled(rot), &ctrl).unwrap();
        let (x, y) = (a.last().unwrap(), b.last().unwrap());
        let rotated: Vec<Complex64> = x.amplitudes.iter().map(|z| z * rot).collect();
        assert!(dist(&rotated, &y.amplitudes) < 1e-8);
    }

    #[test]
    fn nonlinear_budget_and_cap() {
        let s = spec(9, 0.5, 0.5, 0.5, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let ctrl = StepControl::new(&s, 100.0).with_max_steps(10);
        let r = evolve_nonlinear(&s, &NonlinearSpec::new(0.1).unwrap(), &psi0, &ctrl).unwrap();
        assert_eq!(r.status, RunStatus::BudgetExhausted);
        assert_eq!(r.steps, 10);
        let mut ctrl = StepControl::new(&s, 1000.0);
        ctrl.intensity_cap = 1e6;
        let r = evolve_nonlinear(&s, &NonlinearSpec::new(0.0).unwrap(), &psi0, &ctrl).unwrap();
        assert_eq!(r.status, RunStatus::Diverged);
    }

    #[test]
    fn nonlinear_observer_sees_paired_samples() {
        let s = spec(7, 0.3, 0.7, 0.2, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let mut times = Vec::new();
        let ctrl = StepControl::new(&s, 3.0).with_rel_tol(1e-10);
        evolve_nonlinear_observed(&s, &NonlinearSpec::new(0.2).unwrap(), &psi0, &ctrl, &mut |t: f64, _: &[Complex64]| {
            times.push(t);
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(times.len() % 2, 1);
        for pair in times[..].windows(3).step_by(2) {
            assert!(((pair[1] - pair[0]) - (pair[2] - pair[1])).abs() < 1e-12);
        }
        assert!((times.last().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn intensity_examples() {
        let s = spec(7, 0.75, 0.25, 0.5, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let traj = evolve_linear(&Hamiltonian::pt(&s), &psi0, &StepControl::new(&s, 2.0)).unwrap();
        let rows = intensity_map(&traj).unwrap();
        assert_eq!(rows.len(), traj.samples.len() * 14);
        for r in &rows[..14] {
            let expect = if r.cell == 0 && r.sublattice == Sublattice::A { 1.0 } else { 0.0 };
            assert_eq!(r.intensity, expect);
        }
        assert_eq!((rows[0].cell, rows[0].sublattice), (-3, Sublattice::A));
        assert_eq!((rows[1].cell, rows[1].sublattice), (-3, Sublattice::B));
        assert_eq!(s.index(SiteIndex::a(0)).unwrap(), 6);

        let herm = spec(7, 0.75, 0.25, 0.0, Boundary::Open);
        let traj = evolve_linear(&Hamiltonian::pt(&herm), &psi0, &StepControl::new(&herm, 5.0)).unwrap();
        for chunk in intensity_map(&traj).unwrap().chunks(14) {
            let total: f64 = chunk.iter().map(|r| r.intensity).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }

        let broken = spec(7, 0.5, 0.5, 0.5, Boundary::Open);
        let traj = evolve_linear(&Hamiltonian::pt(&broken), &psi0, &StepControl::new(&broken, 40.0)).unwrap();
        let totals: Vec<f64> = intensity_map(&traj).unwrap().chunks(14).map(|c| c.iter().map(|r| r.intensity).sum()).collect();
        let late = &totals[totals.len() * 3 / 4..];
        assert!(late.windows(2).all(|w| w[1] > w[0]));

        let mut buf = Vec::new();
        write_intensity_csv(&intensity_map(&traj).unwrap()[..2], &["n_dimers = 7".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# n_dimers = 7\nt,cell,sublattice,intensity\n0,-3,A,0\n"));
    }

    #[test]
    fn rk4_order_on_broken_point() {
        let s = spec(9, 0.3, 0.7, 0.6, Boundary::Open);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let nl = NonlinearSpec::new(0.1).unwrap();
        let end = |tol: f64| {
            let ctrl = StepControl::new(&s, 6.0).with_dt(0.5).with_rel_tol(tol);
            evolve_nonlinear(&s, &nl, &psi0, &ctrl).unwrap().last().unwrap().amplitudes.clone()
        };
        let reference = end(1e-13);
        let e1 = dist(&end(1.6e-6), &reference);
        let e2 = dist(&end(1e-7), &reference);
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "{e1} {e2} {ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gauge_identity_holds(va in 0.05f64..0.95, g in 0.05f64..1.2, theta in 0.0f64..3.14, phi in 0.0f64..6.28) {
            let s = spec(9, va, 1.0 - va, g, Boundary::Open);
            let psi0 = localized_state(&s, 0, BlochState::new(theta, phi).unwrap()).unwrap();
            let ctrl = StepControl::new(&s, 5.0);
            let pt = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
            let lossy = evolve_linear(&Hamiltonian::lossy(&s), &psi0, &ctrl).unwrap();
            for (a, b) in pt.samples.iter().zip(&lossy.samples) {
                let scale = (-g * a.time).exp();
                for (x, y) in a.amplitudes.iter().zip(&b.amplitudes) {
                    prop_assert!((x * scale - y).norm() < 1e-10);
                }
            }
        }
    }
}
