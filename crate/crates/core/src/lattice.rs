//! Finite SSH dimer lattices: Hamiltonian pieces and localized initial states.
//!
//! Site layout is cell-major: cells run `m = -M..=M`, and within each cell
//! the A site precedes the B site, so `(m, A)` lives at `2(m + M)` and
//! `(m, B)` at `2(m + M) + 1`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense complex operator on the `2N`-dimensional site space.
pub type ComplexMatrix = DMatrix<Complex64>;

pub const DEFAULT_DIMERS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Boundary::Open => f.write_str("open"),
            Boundary::Periodic => f.write_str("periodic"),
        }
    }
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "open" => Ok(Boundary::Open),
            "periodic" => Ok(Boundary::Periodic),
            other => Err(Error::param("boundary", format!("unknown boundary `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sublattice {
    A,
    B,
}

impl std::fmt::Display for Sublattice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sublattice::A => f.write_str("A"),
            Sublattice::B => f.write_str("B"),
        }
    }
}

/// Physical parameters of a dimer lattice.
///
/// `intra` is the coupling inside a dimer (`v_a`), `inter` the coupling
/// between neighbouring dimers (`v_b`), `gamma` the gain/loss strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub n_dimers: usize,
    pub intra: f64,
    pub inter: f64,
    pub gamma: f64,
    pub boundary: Boundary,
}

impl LatticeSpec {
    pub fn new(n_dimers: usize, intra: f64, inter: f64, gamma: f64, boundary: Boundary) -> Result<Self> {
        let spec = LatticeSpec {
            n_dimers,
            intra,
            inter,
            gamma,
            boundary,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Build from `v_a/v_t` and `γ/v_t` with `v_t = 1`.
    pub fn from_ratio(n_dimers: usize, intra_ratio: f64, gamma_ratio: f64, boundary: Boundary) -> Result<Self> {
        if !(0.0..=1.0).contains(&intra_ratio) {
            return Err(Error::param("v_a/v_t", format!("{intra_ratio} outside [0, 1]")));
        }
        Self::new(n_dimers, intra_ratio, 1.0 - intra_ratio, gamma_ratio, boundary)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dimers < 3 || self.n_dimers % 2 == 0 {
            return Err(Error::InvalidLattice(format!(
                "n_dimers must be odd and >= 3, got {}",
                self.n_dimers
            )));
        }
        for (name, v) in [("v_a", self.intra), ("v_b", self.inter), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidLattice(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.intra + self.inter <= 0.0 {
            return Err(Error::InvalidLattice("v_a + v_b must be positive".into()));
        }
        Ok(())
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.gamma = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    /// `M` in `N = 2M + 1`.
    pub fn half_width(&self) -> usize {
        self.n_dimers / 2
    }

    pub fn dim(&self) -> usize {
        2 * self.n_dimers
    }

    /// Total coupling `v_t = v_a + v_b`.
    pub fn total_coupling(&self) -> f64 {
        self.intra + self.inter
    }

    pub fn index(&self, site: SiteIndex) -> Result<usize> {
        let m = self.half_width() as i64;
        if site.cell.abs() > m {
            return Err(Error::CellOutOfRange { cell: site.cell, max: m });
        }
        let base = 2 * (site.cell + m) as usize;
        Ok(match site.sublattice {
            Sublattice::A => base,
            Sublattice::B => base + 1,
        })
    }

    pub fn site(&self, index: usize) -> SiteIndex {
        let m = self.half_width() as i64;
        SiteIndex {
            cell: (index / 2) as i64 - m,
            sublattice: if index % 2 == 0 { Sublattice::A } else { Sublattice::B },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SiteIndex {
    pub cell: i64,
    pub sublattice: Sublattice,
}

impl SiteIndex {
    pub fn a(cell: i64) -> Self {
        SiteIndex {
            cell,
            sublattice: Sublattice::A,
        }
    }

    pub fn b(cell: i64) -> Self {
        SiteIndex {
            cell,
            sublattice: Sublattice::B,
        }
    }
}

/// Point `(θ, φ)` on the Bloch sphere of a single dimer:
/// `cos(θ/2)|A⟩ + e^{iφ} sin(θ/2)|B⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub theta: f64,
    pub phi: f64,
}

impl BlochState {
    /// `phi` is reduced into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !(0.0..=PI).contains(&theta) {
            return Err(Error::param("theta", format!("{theta} outside [0, π]")));
        }
        if !phi.is_finite() {
            return Err(Error::param("phi", format!("{phi} is not finite")));
        }
        Ok(BlochState {
            theta,
            phi: phi.rem_euclid(2.0 * PI),
        })
    }

    pub fn north() -> Self {
        BlochState { theta: 0.0, phi: 0.0 }
    }

    pub fn south() -> Self {
        BlochState { theta: PI, phi: 0.0 }
    }

    /// Amplitudes on (A, B).
    pub fn amplitudes(&self) -> (Complex64, Complex64) {
        let (s, c) = (0.5 * self.theta).sin_cos();
        (Complex64::new(c, 0.0), Complex64::from_polar(s, self.phi))
    }

    /// Dimensionless transverse momentum `sinθ·sinφ`.
    pub fn transverse_momentum(&self) -> f64 {
        self.theta.sin() * self.phi.sin()
    }
}

/// Amplitudes on the `2N` sites at time `time` (in units of `1/v_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
}

impl WaveFunction {
    pub fn new(amplitudes: Vec<Complex64>, time: f64) -> Self {
        WaveFunction { amplitudes, time }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        WaveFunction {
            amplitudes: self.amplitudes.iter().map(|a| a * factor).collect(),
            time: self.time,
        }
    }
}

/// Hermitian hopping part `H₀`.
pub fn build_h0(spec: &LatticeSpec) -> ComplexMatrix {
    let n = spec.n_dimers;
    let mut h = ComplexMatrix::zeros(spec.dim(), spec.dim());
    let va = Complex64::new(spec.intra, 0.0);
    let vb = Complex64::new(spec.inter, 0.0);
    for c in 0..n {
        let (a, b) = (2 * c, 2 * c + 1);
        h[(a, b)] += va;
        h[(b, a)] += va;
        // (m, A) <-> (m + 1, B)
        if c + 1 < n {
            let b_next = 2 * (c + 1) + 1;
            h[(a, b_next)] += vb;
            h[(b_next, a)] += vb;
        }
    }
    if spec.boundary == Boundary::Periodic {
        // wrap bond (M, A) <-> (-M, B), no twist
        let a_last = 2 * (n - 1);
        h[(a_last, 1)] += vb;
        h[(1, a_last)] += vb;
    }
    h
}

/// Balanced gain/loss: `+iγ` on A sites, `-iγ` on B sites.
pub fn build_gamma_pt(spec: &LatticeSpec) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&nalgebra::DVector::from_fn(spec.dim(), |i, _| {
        if i % 2 == 0 {
            Complex64::new(0.0, spec.gamma)
        } else {
            Complex64::new(0.0, -spec.gamma)
        }
    }))
}

/// Passive loss `-2iγ` on B sites only; equals `Γ_PT - iγ·1`.
pub fn build_gamma_lossy(spec: &LatticeSpec) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&nalgebra::DVector::from_fn(spec.dim(), |i, _| {
        if i % 2 == 0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(0.0, -2.0 * spec.gamma)
        }
    }))
}

pub fn build_h_pt(spec: &LatticeSpec) -> ComplexMatrix {
    build_h0(spec) + build_gamma_pt(spec)
}

pub fn build_h_lossy(spec: &LatticeSpec) -> ComplexMatrix {
    build_h0(spec) + build_gamma_lossy(spec)
}

/// Walker confined to one dimer in the Bloch-sphere state `bloch`.
pub fn localized_state(spec: &LatticeSpec, cell: i64, bloch: BlochState) -> Result<WaveFunction> {
    let ia = spec.index(SiteIndex::a(cell))?;
    let (ca, cb) = bloch.amplitudes();
    let mut amps = vec![Complex64::new(0.0, 0.0); spec.dim()];
    amps[ia] = ca;
    amps[ia + 1] = cb;
    Ok(WaveFunction::new(amps, 0.0))
}

/// Permutation `|m, X⟩ -> |m + 1, X⟩` (cyclic).
pub fn translation_matrix(spec: &LatticeSpec) -> ComplexMatrix {
    let dim = spec.dim();
    let mut t = ComplexMatrix::zeros(dim, dim);
    for i in 0..dim {
        t[((i + 2) % dim, i)] = Complex64::new(1.0, 0.0);
    }
    t
}
