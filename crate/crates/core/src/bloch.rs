//! Momentum-space analytics of the PT-symmetric SSH chain.
//!
//! For each momentum `k` the Hamiltonian reduces to `h(k)·σ` with
//! `h_x + i h_y = v_a + v_b e^{ik}` and `h_z = iγ`. Everything here is a
//! function of `λ² = |v_a + v_b e^{ik}|² - γ²`, which is real; `cos(λt)` and
//! `sin(λt)/λ` are even in `λ` and are evaluated without choosing a root.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BlochState, LatticeSpec};
use crate::observables::{MeanDispResult, RunStatus};
use crate::quadrature::gauss_legendre8;

pub const DEFAULT_NK: usize = 2048;
pub const MIN_WINDING_NK: usize = 64;
/// Relative gap below which the winding is undefined (`ε_branch / v_t`).
pub const BRANCH_EPS: f64 = 1e-9;
/// Below this value of `|λ|·t` the even functions switch to Taylor series.
const TAYLOR_SWITCH: f64 = 1e-4;
const WINDING_MAX_NK: usize = 1 << 24;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `h(k)·σ` at one momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochHamiltonian {
    pub k: f64,
    pub h_x: f64,
    pub h_y: f64,
    /// Always `iγ`.
    pub h_z: Complex64,
}

impl BlochHamiltonian {
    /// `[[h_z, h_x - i h_y], [h_x + i h_y, -h_z]]`.
    pub fn matrix(&self) -> Matrix2<Complex64> {
        let off_lower = Complex64::new(self.h_x, self.h_y);
        let off_upper = Complex64::new(self.h_x, -self.h_y);
        Matrix2::new(self.h_z, off_upper, off_lower, -self.h_z)
    }

    /// `λ² = h_x² + h_y² + h_z²`.
    pub fn lambda_sq(&self) -> f64 {
        self.h_x * self.h_x + self.h_y * self.h_y - self.h_z.im * self.h_z.im
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarFactor {
    pub u: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandEigen {
    pub lambda_plus: Complex64,
    pub lambda_minus: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindingResult {
    pub winding: i32,
    pub well_defined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveMass {
    pub mu_inverse: f64,
}

fn off_diagonal(spec: &LatticeSpec, k: f64) -> Complex64 {
    Complex64::new(spec.intra, 0.0) + Complex64::from_polar(spec.inter, k)
}

fn lambda_sq(spec: &LatticeSpec, k: f64) -> f64 {
    spec.intra * spec.intra + spec.inter * spec.inter + 2.0 * spec.intra * spec.inter * k.cos()
        - spec.gamma * spec.gamma
}

pub fn bloch_hamiltonian(spec: &LatticeSpec, k: f64) -> BlochHamiltonian {
    let z = off_diagonal(spec, k);
    BlochHamiltonian {
        k,
        h_x: z.re,
        h_y: z.im,
        h_z: Complex64::new(0.0, spec.gamma),
    }
}

/// `λ± = ±sqrt(λ²)` on the principal branch: real pair for `λ² ≥ 0`,
/// imaginary pair otherwise.
pub fn band_eigenvalues(spec: &LatticeSpec, k: f64) -> BandEigen {
    let l2 = lambda_sq(spec, k);
    let lam = if l2 >= 0.0 {
        Complex64::new(l2.sqrt(), 0.0)
    } else {
        Complex64::new(0.0, (-l2).sqrt())
    };
    BandEigen {
        lambda_plus: lam,
        lambda_minus: -lam,
    }
}

/// PT-breaking threshold `γ_PT = |v_a - v_b|`.
pub fn pt_threshold(spec: &LatticeSpec) -> f64 {
    (spec.intra - spec.inter).abs()
}

/// Above `γ = v_a + v_b` every eigenvalue is complex.
pub fn full_breaking_scale(spec: &LatticeSpec) -> f64 {
    spec.total_coupling()
}

/// Largest `Im λ(k)` over the Brillouin zone, `sqrt(max(0, γ² - (v_a - v_b)²))`.
pub fn max_growth_rate(spec: &LatticeSpec) -> f64 {
    let gap = pt_threshold(spec);
    (spec.gamma * spec.gamma - gap * gap).max(0.0).sqrt()
}

/// `(cos(λt), sin(λt)/λ)` as functions of `λ²`, each multiplied by `e^{-γt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EvenParts {
    pub cos: f64,
    pub sinc: f64,
}

pub(crate) fn even_parts(l2: f64, t: f64, damping: f64) -> EvenParts {
    let x2 = l2 * t * t;
    if x2.abs() < TAYLOR_SWITCH * TAYLOR_SWITCH {
        let env = (-damping * t).exp();
        return EvenParts {
            cos: env * (1.0 - x2 / 2.0 + x2 * x2 / 24.0),
            sinc: env * t * (1.0 - x2 / 6.0 + x2 * x2 / 120.0),
        };
    }
    if l2 > 0.0 {
        let lam = l2.sqrt();
        let env = (-damping * t).exp();
        let (s, c) = (lam * t).sin_cos();
        EvenParts {
            cos: env * c,
            sinc: env * s / lam,
        }
    } else {
        let kappa = (-l2).sqrt();
        let x = kappa * t;
        if x < 20.0 {
            let env = (-damping * t).exp();
            EvenParts {
                cos: env * x.cosh(),
                sinc: env * x.sinh() / kappa,
            }
        } else {
            // e^{-γt} cosh(κt) = ½ e^{(κ-γ)t} (1 + e^{-2κt})
            let grow = 0.5 * ((kappa - damping) * t).exp();
            let small = (-2.0 * x).exp();
            EvenParts {
                cos: grow * (1.0 + small),
                sinc: grow * (1.0 - small) / kappa,
            }
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::param("t", format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// `G(k, t) = cos(λt)·1 - i (h·σ) sin(λt)/λ`.
///
/// At an exceptional point (`λ = 0`) this is `1 - i (h·σ) t`.
pub fn propagator_k(spec: &LatticeSpec, k: f64, t: f64) -> Result<Matrix2<Complex64>> {
    check_time(t)?;
    let h = bloch_hamiltonian(spec, k);
    let p = even_parts(h.lambda_sq(), t, 0.0);
    Ok(Matrix2::identity() * Complex64::new(p.cos, 0.0) - h.matrix() * (I * p.sinc))
}

/// Magnitude and phase of `v_a + v_b e^{ik}`.
pub fn polar_factor(spec: &LatticeSpec, k: f64) -> Result<PolarFactor> {
    let z = off_diagonal(spec, k);
    let u = z.norm();
    if u <= 1e-14 * spec.total_coupling() {
        return Err(Error::BranchPoint { gap: u });
    }
    Ok(PolarFactor { u, theta: z.arg() })
}

/// `(g_A, g_B) = (u sin(λt)/λ, cos(λt) - γ sin(λt)/λ)`.
pub fn g_functions(spec: &LatticeSpec, k: f64, t: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    let u = off_diagonal(spec, k).norm();
    let p = even_parts(lambda_sq(spec, k), t, 0.0);
    Ok((u * p.sinc, p.cos - spec.gamma * p.sinc))
}

/// `e^{-γt}·(g_A, g_B)`, finite wherever the product is, even when
/// `g_A`, `g_B` alone would overflow.
pub fn g_functions_damped(spec: &LatticeSpec, k: f64, t: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    let u = off_diagonal(spec, k).norm();
    let p = even_parts(lambda_sq(spec, k), t, spec.gamma);
    Ok((u * p.sinc, p.cos - spec.gamma * p.sinc))
}

/// Winding of `arg(v_a + v_b e^{ik})` over one Brillouin zone.
///
/// The grid is refined beyond `n_k` when needed so that each phase increment
/// stays below π/2; `well_defined` is false if the refinement cap is hit or
/// the accumulated phase is not an integer multiple of 2π.
pub fn winding_number(spec: &LatticeSpec, n_k: usize) -> Result<WindingResult> {
    if n_k < MIN_WINDING_NK {
        return Err(Error::param("n_k", format!("need at least {MIN_WINDING_NK} points, got {n_k}")));
    }
    let gap = pt_threshold(spec);
    if gap <= BRANCH_EPS * spec.total_coupling() {
        return Err(Error::BranchPoint { gap });
    }
    // max |dΘ/dk| = v_b / |v_a - v_b| at k = π
    let needed = (4.0 * spec.inter / gap).ceil();
    let mut n = n_k;
    let mut capped = false;
    if needed > n as f64 {
        if needed > WINDING_MAX_NK as f64 {
            n = WINDING_MAX_NK;
            capped = true;
        } else {
            n = needed as usize;
        }
    }
    let dk = 2.0 * PI / n as f64;
    let mut prev = off_diagonal(spec, 0.0);
    let mut total = 0.0;
    let mut max_step: f64 = 0.0;
    for j in 1..=n {
        let z = off_diagonal(spec, dk * j as f64);
        let step = (z / prev).arg();
        max_step = max_step.max(step.abs());
        total += step;
        prev = z;
    }
    let turns = total / (2.0 * PI);
    let winding = turns.round();
    let well_defined = !capped && max_step < PI / 2.0 && (turns - winding).abs() < 1e-6;
    Ok(WindingResult {
        winding: winding as i32,
        well_defined,
    })
}

/// `μ⁻¹ = min(v_a, v_b²/v_a)`.
pub fn effective_mass_inverse(spec: &LatticeSpec) -> Result<EffectiveMass> {
    if spec.intra <= 0.0 {
        return Err(Error::Singular("effective mass needs v_a > 0".into()));
    }
    Ok(EffectiveMass {
        mu_inverse: spec.intra.min(spec.inter * spec.inter / spec.intra),
    })
}

/// Brillouin-zone form of `μ⁻¹`: `-(1/π) ∮ dk (∂_k u) sin Θ`, with `∂_k u`
/// from central differences. Returns 0 at `v_a = 0`, where `u` is constant.
pub fn effective_mass_quadrature(spec: &LatticeSpec, n_k: usize) -> f64 {
    if spec.intra == 0.0 {
        return 0.0;
    }
    let h = 1e-5;
    let dk = 2.0 * PI / n_k as f64;
    let sum: f64 = (0..n_k)
        .map(|j| {
            let k = dk * j as f64;
            let z = off_diagonal(spec, k);
            if z.norm() == 0.0 {
                return 0.0;
            }
            let du = (off_diagonal(spec, k + h).norm() - off_diagonal(spec, k - h).norm()) / (2.0 * h);
            du * z.arg().sin()
        })
        .sum();
    -sum * dk / PI
}

/// Mean displacement of an infinite lattice,
/// `cos²(θ/2)·W + sinθ sinφ·μ⁻¹/(4γ)`.
///
/// `μ⁻¹` takes its limit 0 at `v_a = 0`. Refuses `γ = 0`, where the drift
/// term diverges.
pub fn analytic_mean_disp(spec: &LatticeSpec, bloch: BlochState) -> Result<f64> {
    if spec.gamma <= 0.0 {
        return Err(Error::param("gamma", "closed form needs gamma > 0"));
    }
    let w = winding_number(spec, DEFAULT_NK)?;
    let mu_inv = effective_mass_inverse(spec).map(|m| m.mu_inverse).unwrap_or(0.0);
    let c = (0.5 * bloch.theta).cos();
    Ok(c * c * w.winding as f64 + bloch.transverse_momentum() * mu_inv / (4.0 * spec.gamma))
}

/// Controls for [`kspace_mean_disp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureControl {
    pub n_k: usize,
    /// Gauss–Legendre panel width in time, in units of `1/v_t`.
    pub panel: f64,
    /// Tolerance on the estimated remainder of the time integral.
    pub tol: f64,
    /// Hard cap on the time horizon, in units of `1/v_t`.
    pub t_cap: f64,
    /// Step of the central difference in `k`.
    pub dk: f64,
}

impl Default for QuadratureControl {
    fn default() -> Self {
        QuadratureControl {
            n_k: DEFAULT_NK,
            panel: 0.25,
            tol: 1e-8,
            t_cap: 2000.0,
            dk: 1e-5,
        }
    }
}

/// Time after which the integrand envelope `e^{-2(γ - Im λ_max) t}` drops
/// below `1e-10`; infinite when `Im λ_max = γ`.
pub fn envelope_horizon(spec: &LatticeSpec) -> f64 {
    let rate = 2.0 * (spec.gamma - max_growth_rate(spec));
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        1e10f64.ln() / rate
    }
}

/// Brillouin-zone evaluation of the mean displacement,
/// `-4iγ ∫dt e^{-2γt} ∮ dk/2π g* ∂_k g` with
/// `g(k, t) = ⟨k, B|G(k, t)|ψ₀⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KspaceMeanDisp {
    pub result: MeanDispResult,
    /// Imaginary part of the integral; zero up to quadrature error.
    pub imag_residue: f64,
}

pub fn kspace_mean_disp(spec: &LatticeSpec, bloch: BlochState, quad: &QuadratureControl) -> Result<KspaceMeanDisp> {
    if spec.gamma <= 0.0 {
        return Err(Error::param("gamma", "k-space mean displacement needs gamma > 0"));
    }
    if quad.n_k < 8 {
        return Err(Error::param("n_k", format!("too few momenta: {}", quad.n_k)));
    }
    let vt = spec.total_coupling();
    let gamma = spec.gamma;
    let (ca, cb) = bloch.amplitudes();
    let a_coef = -I * ca;
    let dk = 2.0 * PI / quad.n_k as f64;
    let h = quad.dk;

    // per momentum: (z, λ²) at k - h, k + h, k
    let stencil: Vec<[(Complex64, f64); 3]> = (0..quad.n_k)
        .map(|j| {
            let k = dk * j as f64;
            [k - h, k + h, k].map(|kk| (off_diagonal(spec, kk), lambda_sq(spec, kk)))
        })
        .collect();

    // damped amplitude e^{-γt} g(k, t)
    let g_at = |z: Complex64, l2: f64, t: f64| {
        let p = even_parts(l2, t, gamma);
        a_coef * z * p.sinc + cb * (p.cos - gamma * p.sinc)
    };
    let integrand = |t: f64| {
        let mut acc = Complex64::new(0.0, 0.0);
        for s in &stencil {
            let gm = g_at(s[0].0, s[0].1, t);
            let gp = g_at(s[1].0, s[1].1, t);
            let g0 = g_at(s[2].0, s[2].1, t);
            acc += g0.conj() * (gp - gm) / (2.0 * h);
        }
        -4.0 * I * gamma * acc / quad.n_k as f64
    };

    let rate = 2.0 * (gamma - max_growth_rate(spec));
    let horizon = envelope_horizon(spec);
    let t_end = horizon.min(quad.t_cap / vt);
    let panel = quad.panel / vt.max(gamma);
    let n_panels = (t_end / panel).ceil().max(1.0) as usize;

    let mut total = Complex64::new(0.0, 0.0);
    let mut last_abs = 0.0f64;
    let mut t_reached = 0.0;
    for p in 0..n_panels {
        let a = p as f64 * panel;
        let b = (a + panel).min(t_end);
        let mut piece = Complex64::new(0.0, 0.0);
        let mut peak = 0.0f64;
        for (t, w) in gauss_legendre8(a, b) {
            let f = integrand(t);
            peak = peak.max(f.norm());
            piece += f * w;
        }
        total += piece;
        last_abs = peak;
        t_reached = b;
    }
    let tail = if rate > 0.0 { last_abs / rate } else { f64::INFINITY };
    let converged = horizon.is_finite() && horizon <= quad.t_cap / vt && tail <= quad.tol;
    Ok(KspaceMeanDisp {
        result: MeanDispResult {
            value: total.re,
            tail_estimate: tail,
            horizon: t_reached,
            converged,
            status: RunStatus::Completed,
        },
        imag_residue: total.im,
    })
}
