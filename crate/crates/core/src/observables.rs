//! Mean displacement of the walker and its quasiclassical part.
//!
//! `⟨Δm⟩ = 4γ Σ_m m ∫₀^∞ w(t) |⟨m,B|Ψ(t)⟩|² dt` with `w = e^{-2γt}` for
//! PT-gauge trajectories and `w = 1` for the lossy gauge. The two agree
//! because `Ψ_L = e^{-γt} Ψ_PT`.

use std::ops::ControlFlow;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bloch::effective_mass_inverse;
use crate::error::{Error, Result};
use crate::lattice::{localized_state, BlochState, LatticeSpec};
use crate::propagate::{
    evolve_linear_observed, evolve_nonlinear_observed, Hamiltonian, NonlinearSpec, Observer, StepControl,
    TrajectoryKind, WaveTrajectory,
};
use crate::quadrature::SimpsonAccumulator;

pub use crate::propagate::RunStatus;

pub const DEFAULT_TOL: f64 = 1e-4;
/// Horizon cap for streamed ⟨Δm⟩ runs, in units of `1/v_t`.
pub const DEFAULT_T_CAP: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanDispResult {
    pub value: f64,
    /// Bound on the part of the integral beyond `horizon`; infinite when the
    /// run failed.
    pub tail_estimate: f64,
    pub horizon: f64,
    pub converged: bool,
    pub status: RunStatus,
}

impl MeanDispResult {
    /// Ballistic front `2·max(v_a, v_b)·T` has reached the lattice edge.
    pub fn reaches_edge(&self, spec: &LatticeSpec) -> bool {
        2.0 * spec.intra.max(spec.inter) * self.horizon > spec.half_width() as f64
    }
}

/// Streams states into the ⟨Δm⟩ integral and stops the run once the last
/// window of length `1/γ` contributes less than `tol·max(1, |⟨Δm⟩|)` and the
/// remainder bound is below `tol`.
///
/// The remainder is bounded by `M·w(t)‖Ψ‖²`, since the weighted norm only
/// drains through the B sites at rate `4γ`; when the last two windows shrink
/// geometrically their extrapolated sum is used if smaller.
#[derive(Debug, Clone)]
pub struct MeanDispAccumulator {
    gamma: f64,
    pt_gauge: bool,
    tol: f64,
    window: f64,
    half_width: i64,
    signed: SimpsonAccumulator,
    absolute: SimpsonAccumulator,
    window_start: f64,
    window_start_abs: f64,
    last_window: Option<f64>,
    prev_window: Option<f64>,
    weighted_norm: f64,
    t: f64,
    tail: f64,
    converged: bool,
}

impl MeanDispAccumulator {
    pub fn new(spec: &LatticeSpec, kind: TrajectoryKind, tol: f64) -> Result<Self> {
        if spec.gamma <= 0.0 {
            return Err(Error::param("gamma", "mean displacement needs gamma > 0"));
        }
        if !(tol > 0.0) {
            return Err(Error::param("tol", format!("must be positive, got {tol}")));
        }
        Ok(MeanDispAccumulator {
            gamma: spec.gamma,
            pt_gauge: kind.pt_gauge(),
            tol,
            window: 1.0 / spec.gamma,
            half_width: spec.half_width() as i64,
            signed: SimpsonAccumulator::new(),
            absolute: SimpsonAccumulator::new(),
            window_start: 0.0,
            window_start_abs: 0.0,
            last_window: None,
            prev_window: None,
            weighted_norm: 1.0,
            t: 0.0,
            tail: f64::INFINITY,
            converged: false,
        })
    }

    pub fn value(&self) -> f64 {
        self.signed.value()
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    fn remainder_bound(&self) -> f64 {
        let rigorous = self.half_width as f64 * self.weighted_norm;
        let geometric = match (self.prev_window, self.last_window) {
            (Some(p), Some(l)) if p > 0.0 && l < p => {
                let r = l / p;
                l * r / (1.0 - r)
            }
            (Some(_), Some(l)) if l == 0.0 => 0.0,
            _ => f64::INFINITY,
        };
        rigorous.min(geometric)
    }

    pub fn finish(&self, status: RunStatus) -> MeanDispResult {
        let failed = status.is_failure();
        MeanDispResult {
            value: self.value(),
            tail_estimate: if failed { f64::INFINITY } else { self.remainder_bound() },
            horizon: self.t,
            converged: self.converged && !failed,
            status,
        }
    }
}

impl Observer for MeanDispAccumulator {
    fn observe(&mut self, t: f64, amplitudes: &[Complex64]) -> ControlFlow<()> {
        let w = if self.pt_gauge { (-2.0 * self.gamma * t).exp() } else { 1.0 };
        let mut signed = 0.0;
        let mut absolute = 0.0;
        let mut norm = 0.0;
        for (cell, pair) in amplitudes.chunks_exact(2).enumerate() {
            let m = cell as i64 - self.half_width;
            let b = pair[1].norm_sqr();
            signed += m as f64 * b;
            absolute += m.abs() as f64 * b;
            norm += pair[0].norm_sqr() + b;
        }
        let scale = 4.0 * self.gamma * w;
        self.signed.push(t, scale * signed);
        self.absolute.push(t, scale * absolute);
        self.weighted_norm = w * norm;
        self.t = t;

        if t - self.window_start >= self.window {
            let abs_now = self.absolute.value();
            self.prev_window = self.last_window;
            self.last_window = Some(abs_now - self.window_start_abs);
            self.window_start = t;
            self.window_start_abs = abs_now;
            self.tail = self.remainder_bound();
            let last = self.last_window.unwrap_or(f64::INFINITY);
            if self.prev_window.is_some()
                && last < self.tol * self.value().abs().max(1.0)
                && self.tail <= self.tol
            {
                self.converged = true;
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    }
}

/// ⟨Δm⟩ of a stored trajectory; reads samples until the integral converges.
pub fn mean_displacement(traj: &WaveTrajectory, gamma: f64, tol: f64) -> Result<MeanDispResult> {
    if (gamma - traj.spec.gamma).abs() > 1e-12 * gamma.max(1.0) {
        return Err(Error::param("gamma", format!("{gamma} does not match the trajectory ({})", traj.spec.gamma)));
    }
    let mut acc = MeanDispAccumulator::new(&traj.spec, traj.kind, tol)?;
    for s in &traj.samples {
        if acc.observe(s.time, &s.amplitudes).is_break() {
            return Ok(acc.finish(RunStatus::Stopped));
        }
    }
    Ok(acc.finish(traj.status))
}

/// Default streamed horizon, `DEFAULT_T_CAP / v_t`.
pub fn default_horizon(spec: &LatticeSpec) -> f64 {
    DEFAULT_T_CAP / spec.total_coupling()
}

/// ⟨Δm⟩ of the linear walk started in cell 0, streamed through the lossy
/// gauge (bounded amplitudes at every γ).
pub fn linear_mean_disp(spec: &LatticeSpec, bloch: BlochState, ctrl: &StepControl, tol: f64) -> Result<MeanDispResult> {
    let psi0 = localized_state(spec, 0, bloch)?;
    let h = Hamiltonian::lossy(spec);
    let mut acc = MeanDispAccumulator::new(spec, h.kind, tol)?;
    let summary = evolve_linear_observed(&h, &psi0, ctrl, &mut acc)?;
    Ok(acc.finish(summary.status))
}

/// ⟨Δm⟩ of the Kerr-nonlinear PT walk started in cell 0.
pub fn nonlinear_mean_disp(
    spec: &LatticeSpec,
    nl: &NonlinearSpec,
    bloch: BlochState,
    ctrl: &StepControl,
    tol: f64,
) -> Result<MeanDispResult> {
    let psi0 = localized_state(spec, 0, bloch)?;
    let mut acc = MeanDispAccumulator::new(spec, TrajectoryKind::NonlinearPt, tol)?;
    let summary = evolve_nonlinear_observed(spec, nl, &psi0, ctrl, &mut acc)?;
    Ok(acc.finish(summary.status))
}

/// Drift picture of the non-quantized part: momentum `p0 = sinθ sinφ`,
/// lifetime `τ = 1/(4γ)`, displacement `p0·μ⁻¹·τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiclassicalModel {
    pub p0: f64,
    pub tau: f64,
    pub mu_inverse: f64,
    pub drift: f64,
}

impl QuasiclassicalModel {
    pub fn new(spec: &LatticeSpec, bloch: BlochState) -> Result<Self> {
        if spec.gamma <= 0.0 {
            return Err(Error::param("gamma", "drift time 1/(4 gamma) needs gamma > 0"));
        }
        let p0 = bloch.transverse_momentum();
        let tau = 0.25 / spec.gamma;
        let mu_inverse = effective_mass_inverse(spec).map(|m| m.mu_inverse).unwrap_or(0.0);
        Ok(QuasiclassicalModel {
            p0,
            tau,
            mu_inverse,
            drift: p0 * mu_inverse * tau,
        })
    }
}

/// `full − base`, where `base` was run at `(θ, 0)` and `full` at `(θ, φ)`.
pub fn quasiclassical_part(
    spec: &LatticeSpec,
    bloch: BlochState,
    gamma: f64,
    base: &MeanDispResult,
    full: &MeanDispResult,
) -> Result<f64> {
    if !(gamma > 0.0) || (gamma - spec.gamma).abs() > 1e-12 * gamma.max(1.0) {
        return Err(Error::param("gamma", format!("{gamma} must be positive and match the lattice")));
    }
    if !base.converged || !full.converged {
        return Err(Error::NotConverged(format!(
            "quasiclassical part at theta={}, phi={} needs converged inputs",
            bloch.theta, bloch.phi
        )));
    }
    Ok(full.value - base.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiclassicalSample {
    pub spec: LatticeSpec,
    pub bloch: BlochState,
    pub gamma: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassFit {
    pub v_a: f64,
    pub v_b: f64,
    /// Fitted slope of the quasiclassical part against `p0/(4γ)`.
    pub mu_inverse: f64,
    pub intercept: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub samples: usize,
}

/// Least-squares line through `(p0/(4γ), value)` for each distinct `v_a`.
///
/// Samples with `p0 = 0` carry no information and are ignored; each `v_a`
/// needs three informative samples with distinct abscissae.
pub fn fit_effective_mass(samples: &[QuasiclassicalSample]) -> Result<Vec<MassFit>> {
    let mut sorted: Vec<&QuasiclassicalSample> = samples
        .iter()
        .filter(|s| s.bloch.transverse_momentum().abs() > 1e-12)
        .collect();
    sorted.sort_by(|a, b| a.spec.intra.total_cmp(&b.spec.intra));
    let mut fits = Vec::new();
    for group in sorted.chunk_by(|a, b| (a.spec.intra - b.spec.intra).abs() <= 1e-12) {
        let v_a = group[0].spec.intra;
        if group.len() < 3 {
            return Err(Error::param("samples", format!("v_a = {v_a}: need >= 3 samples with p0 != 0, got {}", group.len())));
        }
        let pts: Vec<(f64, f64)> = group
            .iter()
            .map(|s| (s.bloch.transverse_momentum() / (4.0 * s.gamma), s.value))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let scale: f64 = pts.iter().map(|p| p.0 * p.0).sum::<f64>().max(f64::MIN_POSITIVE);
        if sxx <= 1e-14 * scale {
            return Err(Error::RankDeficient(format!("v_a = {v_a}: all p0/(4 gamma) identical")));
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let residual = (pts.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum::<f64>() / n).sqrt();
        fits.push(MassFit {
            v_a,
            v_b: group[0].spec.inter,
            mu_inverse: slope,
            intercept,
            residual,
            samples: group.len(),
        });
    }
    Ok(fits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;
    use crate::propagate::evolve_linear;
    use std::f64::consts::PI;

    fn spec(n: usize, va: f64, g: f64) -> LatticeSpec {
        LatticeSpec::from_ratio(n, va, g, Boundary::Open).unwrap()
    }

    fn streamed(s: &LatticeSpec, b: BlochState) -> MeanDispResult {
        linear_mean_disp(s, b, &StepControl::new(s, default_horizon(s)), DEFAULT_TOL).unwrap()
    }

    #[test]
    fn topological_and_trivial_plateaus() {
        let r = streamed(&spec(41, 0.25, 0.5), BlochState::north());
        assert!(r.converged, "{r:?}");
        assert!((r.value - 1.0).abs() <= 0.05, "{r:?}");
        assert!(r.tail_estimate <= DEFAULT_TOL);
        let r = streamed(&spec(41, 0.75, 0.5), BlochState::north());
        assert!(r.value.abs() <= 0.05, "{r:?}");
    }

    #[test]
    fn south_pole_is_null() {
        for va in [0.1, 0.5, 0.8] {
            let r = streamed(&spec(41, va, 0.5), BlochState::south());
            assert!(r.value.abs() <= 0.05, "{va}: {r:?}");
        }
    }

    #[test]
    fn pt_and_lossy_routes_agree() {
        let s = spec(21, 0.35, 0.6);
        let psi0 = localized_state(&s, 0, BlochState::new(1.1, 0.7).unwrap()).unwrap();
        let ctrl = StepControl::new(&s, 25.0);
        let pt = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
        let lossy = evolve_linear(&Hamiltonian::lossy(&s), &psi0, &ctrl).unwrap();
        let a = mean_displacement(&pt, s.gamma, 1e-6).unwrap();
        let b = mean_displacement(&lossy, s.gamma, 1e-6).unwrap();
        assert!((a.value - b.value).abs() <= 1e-8, "{a:?} {b:?}");
        assert!(mean_displacement(&pt, 0.3, 1e-6).is_err());
    }

    #[test]
    fn diverged_run_is_not_converged() {
        let s = spec(11, 0.5, 0.5);
        let psi0 = localized_state(&s, 0, BlochState::north()).unwrap();
        let mut ctrl = StepControl::new(&s, 200.0);
        ctrl.intensity_cap = 10.0;
        let traj = evolve_linear(&Hamiltonian::pt(&s), &psi0, &ctrl).unwrap();
        let r = mean_displacement(&traj, 0.5, 1e-12).unwrap();
        assert!(!r.converged);
        assert_eq!(r.status, RunStatus::Diverged);
        assert!(r.tail_estimate.is_infinite());
        assert!(r.value.is_finite());
    }

    #[test]
    fn rejects_zero_gamma() {
        let s = spec(11, 0.3, 0.0);
        assert!(MeanDispAccumulator::new(&s, TrajectoryKind::LinearLossy, 1e-4).is_err());
        assert!(QuasiclassicalModel::new(&s, BlochState::north()).is_err());
    }

    #[test]
    fn model_values() {
        let m = QuasiclassicalModel::new(&spec(41, 0.4, 0.5), BlochState::new(PI / 2.0, PI / 2.0).unwrap()).unwrap();
        assert!((m.p0 - 1.0).abs() < 1e-15);
        assert!((m.tau - 0.5).abs() < 1e-15);
        assert!((m.drift - 0.2).abs() < 1e-15);
    }

    #[test]
    fn quasiclassical_sign_flip() {
        let s = spec(41, 0.3, 0.5);
        let base = streamed(&s, BlochState::new(PI / 2.0, 0.0).unwrap());
        let up_state = BlochState::new(PI / 2.0, PI / 2.0).unwrap();
        let down_state = BlochState::new(PI / 2.0, -PI / 2.0).unwrap();
        let up = quasiclassical_part(&s, up_state, 0.5, &base, &streamed(&s, up_state)).unwrap();
        let down = quasiclassical_part(&s, down_state, 0.5, &base, &streamed(&s, down_state)).unwrap();
        assert!(up > 0.0 && down < 0.0);
        assert!((up + down).abs() <= 0.02 * up.abs(), "{up} {down}");
        assert_eq!(quasiclassical_part(&s, up_state, 0.5, &base, &base).unwrap(), 0.0);
        let mut bad = base;
        bad.converged = false;
        assert!(quasiclassical_part(&s, up_state, 0.5, &base, &bad).is_err());
    }

    #[test]
    fn fit_recovers_synthetic_mass() {
        let mut samples = Vec::new();
        for va in [0.2, 0.7] {
            for (i, g) in [0.25, 0.5, 1.0, 2.0].into_iter().enumerate() {
                let s = spec(41, va, g);
                let b = BlochState::new(PI / 2.0, 0.3 + 0.4 * i as f64).unwrap();
                let value = QuasiclassicalModel::new(&s, b).unwrap().drift;
                samples.push(QuasiclassicalSample { spec: s, bloch: b, gamma: g, value });
            }
        }
        let fits = fit_effective_mass(&samples).unwrap();
        assert_eq!(fits.len(), 2);
        assert!((fits[0].mu_inverse - 0.2).abs() < 1e-10);
        assert!((fits[1].mu_inverse - 0.09 / 0.7).abs() < 1e-10);
        assert!(fits[0].residual < 1e-12);
    }

    #[test]
    fn fit_rejects_degenerate_design() {
        let s = spec(41, 0.3, 0.5);
        let b = BlochState::new(PI / 2.0, PI / 2.0).unwrap();
        let same: Vec<_> = (0..3)
            .map(|i| QuasiclassicalSample { spec: s, bloch: b, gamma: 0.5, value: i as f64 })
            .collect();
        assert!(matches!(fit_effective_mass(&same), Err(Error::RankDeficient(_))));
        assert!(fit_effective_mass(&same[..2]).is_err());
    }
}
