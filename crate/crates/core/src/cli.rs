//! The `ptwalk` command line.
//!
//! Every subcommand shares one flag set; a TOML file given with `--config`
//! supplies values that flags then override. Resolved settings are written
//! as `#` comments at the top of every CSV (or under `"config"` in JSON).

use std::f64::consts::PI;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};

use crate::bloch::{
    analytic_mean_disp, band_eigenvalues, kspace_mean_disp, pt_threshold, winding_number, QuadratureControl,
    DEFAULT_NK,
};
use crate::error::{Error, Result};
use crate::lattice::{localized_state, BlochState, Boundary, LatticeSpec, DEFAULT_DIMERS};
use crate::observables::{default_horizon, linear_mean_disp, nonlinear_mean_disp, MeanDispResult, DEFAULT_TOL};
use crate::propagate::{
    evolve_linear, evolve_nonlinear, intensity_map, write_intensity_csv, Hamiltonian, NonlinearSpec, StepControl,
    DEFAULT_MAX_STEPS, DEFAULT_REL_TOL,
};
use crate::sweep::{
    classify_phase, phase_grid, sweep_coupling, sweep_gamma_map, sweep_mass_fit, sweep_nonlinear, Axis,
    CouplingSweep, GammaMapSweep, NonlinearSweep, SweepOptions, SweepTable, NONLINEAR_DIMERS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ptwalk", version, about = "Quantum walks on lossy and PT-symmetric SSH lattices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Complex band structure λ(k) on a uniform k grid.
    Spectrum(Params),
    /// Site intensities |Ψ_m(t)|² of a single walk.
    Evolve(Params),
    /// ⟨Δm⟩ of one walk, with the closed-form and k-space values.
    Meandisp(Params),
    /// ⟨Δm⟩ against v_a/v_t for one or more Bloch states.
    SweepCoupling(Params),
    /// Quasiclassical part over a (v_a/v_t, γ/v_t) grid.
    SweepGammaMap(Params),
    /// Kerr-induced change of ⟨Δm⟩ over a (v_a/v_t, γ/v_t) grid.
    SweepNonlinear(Params),
    /// Effective mass from quasiclassical drifts.
    FitMass(Params),
    /// PT phase of a point or of a (v_a/v_t, γ/v_t) grid.
    Phase(Params),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Spectrum(_) => "spectrum",
            Command::Evolve(_) => "evolve",
            Command::Meandisp(_) => "meandisp",
            Command::SweepCoupling(_) => "sweep-coupling",
            Command::SweepGammaMap(_) => "sweep-gamma-map",
            Command::SweepNonlinear(_) => "sweep-nonlinear",
            Command::FitMass(_) => "fit-mass",
            Command::Phase(_) => "phase",
        }
    }

    fn params(&self) -> &Params {
        match self {
            Command::Spectrum(p)
            | Command::Evolve(p)
            | Command::Meandisp(p)
            | Command::SweepCoupling(p)
            | Command::SweepGammaMap(p)
            | Command::SweepNonlinear(p)
            | Command::FitMass(p)
            | Command::Phase(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gauge {
    Pt,
    Lossy,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(Option::<Either>::deserialize(d)?.map(|e| match e {
        Either::One(x) => vec![x],
        Either::Many(v) => v,
    }))
}

/// Angle in radians; also accepts multiples of `pi` such as `pi/2`,
/// `-pi/2`, `2pi/3`.
pub fn parse_angle(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim().to_ascii_lowercase();
    if let Ok(x) = t.parse::<f64>() {
        return Ok(x);
    }
    let (sign, body) = match t.strip_prefix('-') {
        Some(rest) => (-1.0, rest),
        None => (1.0, t.as_str()),
    };
    let bad = || format!("cannot read `{s}` as an angle");
    let (num, den) = match body.split_once('/') {
        Some((n, d)) => (n, d.parse::<f64>().map_err(|_| bad())?),
        None => (body, 1.0),
    };
    let factor = match num.strip_suffix("pi") {
        Some("") => 1.0,
        Some(f) => f.trim_end_matches('*').parse::<f64>().map_err(|_| bad())?,
        None => return Err(bad()),
    };
    Ok(sign * factor * PI / den)
}

/// Flags shared by all subcommands. Every field is optional so that the
/// config file and the defaults can fill gaps.
#[derive(Debug, Clone, Default, PartialEq, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// TOML file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Number of dimers N (odd, >= 3).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub boundary: Option<Boundary>,
    /// Intra-dimer coupling v_a; with v_b omitted, v_b = 1 - v_a.
    #[arg(long, allow_hyphen_values = true)]
    pub va: Option<f64>,
    /// Inter-dimer coupling v_b.
    #[arg(long, allow_hyphen_values = true)]
    pub vb: Option<f64>,
    /// Gain/loss strength γ (default 0.5·v_t); for sweeps, in units of v_t.
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    /// Polar angle(s) of the initial Bloch state, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_angle, allow_hyphen_values = true)]
    #[serde(deserialize_with = "one_or_many")]
    pub theta: Option<Vec<f64>>,
    /// Azimuthal angle(s); paired with --theta, or broadcast if single.
    #[arg(long, value_delimiter = ',', value_parser = parse_angle, allow_hyphen_values = true)]
    #[serde(deserialize_with = "one_or_many")]
    pub phi: Option<Vec<f64>>,
    /// Kerr coefficient η.
    #[arg(long, allow_hyphen_values = true)]
    pub eta: Option<f64>,

    #[arg(long, allow_hyphen_values = true)]
    pub dt: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub t_max: Option<f64>,
    /// Local error tolerance of the nonlinear stepper.
    #[arg(long, allow_hyphen_values = true)]
    pub rel_tol: Option<f64>,
    /// Convergence tolerance of ⟨Δm⟩.
    #[arg(long, allow_hyphen_values = true)]
    pub tol: Option<f64>,
    /// Accepted-step budget per nonlinear run.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Keep every n-th state (evolve).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum)]
    pub gauge: Option<Gauge>,
    /// Momentum grid size (spectrum, k-space quadrature).
    #[arg(long)]
    pub nk: Option<usize>,

    #[arg(long, allow_hyphen_values = true)]
    pub va_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub va_max: Option<f64>,
    #[arg(long)]
    pub va_count: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma_max: Option<f64>,
    #[arg(long)]
    pub gamma_count: Option<usize>,
    /// v_a/v_t values for fit-mass.
    #[arg(long, value_delimiter = ',')]
    #[serde(deserialize_with = "one_or_many")]
    pub va_list: Option<Vec<f64>>,
    /// γ/v_t values for fit-mass.
    #[arg(long, value_delimiter = ',')]
    #[serde(deserialize_with = "one_or_many")]
    pub gamma_list: Option<Vec<f64>>,

    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit with status 3 if any point fails to converge.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub strict: bool,
    /// Reserved; no stochastic components.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Params {
    /// Flags over file: each field set on the command line wins.
    fn overlay(file: Params, flags: Params) -> Params {
        let mut base = serde_json::to_value(&file).expect("params serialize");
        let top = serde_json::to_value(&flags).expect("params serialize");
        if let (Value::Object(b), Value::Object(t)) = (&mut base, top) {
            for (k, v) in t {
                if !v.is_null() {
                    b.insert(k, v);
                }
            }
        }
        let mut merged: Params = serde_json::from_value(base).expect("params round-trip");
        merged.strict = file.strict || flags.strict;
        merged.config = flags.config;
        merged
    }
}

/// What to compute, fully validated.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Task {
    Spectrum {
        spec: LatticeSpec,
        n_k: usize,
    },
    Evolve {
        spec: LatticeSpec,
        bloch: BlochState,
        gauge: Gauge,
        eta: f64,
        ctrl: StepControl,
    },
    Meandisp {
        spec: LatticeSpec,
        bloch: BlochState,
        eta: f64,
        ctrl: StepControl,
        tol: f64,
        n_k: usize,
    },
    SweepCoupling {
        sweep: CouplingSweep,
        opts: SweepOptions,
    },
    SweepGammaMap {
        sweep: GammaMapSweep,
        opts: SweepOptions,
    },
    SweepNonlinear {
        sweep: NonlinearSweep,
        opts: SweepOptions,
    },
    FitMass {
        v_a: Vec<f64>,
        gamma: Vec<f64>,
        states: Vec<BlochState>,
        opts: SweepOptions,
    },
    Phase {
        spec: Option<LatticeSpec>,
        grid: Option<(Axis, Axis)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub task: Task,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub strict: bool,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Resolved configuration as `key = value` lines.
    pub fn header(&self) -> Vec<String> {
        let mut lines = vec![format!("ptwalk {} {}", env!("CARGO_PKG_VERSION"), self.command)];
        let mut flat = Map::new();
        flatten("", &serde_json::to_value(&self.task).expect("task serializes"), &mut flat);
        flat.insert("format".into(), json!(self.format));
        flat.insert("strict".into(), json!(self.strict));
        if let Some(seed) = self.seed {
            flat.insert("seed".into(), json!(seed));
        }
        lines.extend(flat.into_iter().map(|(k, v)| format!("{k} = {v}")));
        lines
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Usage errors name the offending field.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<Error> for UsageError {
    fn from(e: Error) -> Self {
        UsageError(e.to_string())
    }
}

fn usage(field: &str, reason: impl std::fmt::Display) -> UsageError {
    UsageError(format!("invalid value for `{field}`: {reason}"))
}

fn read_config_file(path: &PathBuf) -> std::result::Result<Params, UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

struct Energies {
    va: f64,
    vb: f64,
}

fn energies(p: &Params) -> std::result::Result<Energies, UsageError> {
    let (va, vb) = match (p.va, p.vb) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, 1.0 - a),
        (None, Some(b)) => (1.0 - b, b),
        (None, None) => (0.25, 0.75),
    };
    if !(va >= 0.0 && va.is_finite()) {
        return Err(usage("va", format!("must be >= 0, got {va}")));
    }
    if !(vb >= 0.0 && vb.is_finite()) {
        return Err(usage("vb", format!("must be >= 0, got {vb}")));
    }
    if va + vb <= 0.0 {
        return Err(usage("va", "v_a + v_b must be positive"));
    }
    Ok(Energies { va, vb })
}

fn single_spec(p: &Params, n_default: usize) -> std::result::Result<LatticeSpec, UsageError> {
    let e = energies(p)?;
    let gamma = p.gamma.unwrap_or(0.5 * (e.va + e.vb));
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(usage("gamma", format!("must be >= 0, got {gamma}")));
    }
    let n = p.n.unwrap_or(n_default);
    LatticeSpec::new(n, e.va, e.vb, gamma, p.boundary.unwrap_or_default()).map_err(|e| usage("n", e))
}

fn states(p: &Params, theta_default: f64, phi_default: f64) -> std::result::Result<Vec<BlochState>, UsageError> {
    let thetas = p.theta.clone().unwrap_or_else(|| vec![theta_default]);
    let phis = p.phi.clone().unwrap_or_else(|| vec![phi_default]);
    if thetas.is_empty() || phis.is_empty() {
        return Err(usage("theta", "empty list"));
    }
    let n = thetas.len().max(phis.len());
    if (thetas.len() != n && thetas.len() != 1) || (phis.len() != n && phis.len() != 1) {
        return Err(usage("phi", format!("{} theta values cannot pair with {} phi values", thetas.len(), phis.len())));
    }
    (0..n)
        .map(|i| {
            let th = thetas[if thetas.len() == 1 { 0 } else { i }];
            let ph = phis[if phis.len() == 1 { 0 } else { i }];
            if !(0.0..=PI).contains(&th) {
                return Err(usage("theta", format!("{th} is out of [0, pi]")));
            }
            if !ph.is_finite() {
                return Err(usage("phi", format!("{ph} is not finite")));
            }
            BlochState::new(th, ph).map_err(|e| usage("theta", e))
        })
        .collect()
}

fn single_state(p: &Params) -> std::result::Result<BlochState, UsageError> {
    let s = states(p, 0.0, 0.0)?;
    if s.len() != 1 {
        return Err(usage("theta", "this subcommand takes a single Bloch state"));
    }
    Ok(s[0])
}

fn positive(field: &str, v: Option<f64>) -> std::result::Result<Option<f64>, UsageError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(usage(field, format!("must be positive, got {x}"))),
        other => Ok(other),
    }
}

fn eta(p: &Params) -> std::result::Result<f64, UsageError> {
    let eta = p.eta.unwrap_or(0.0);
    NonlinearSpec::new(eta).map_err(|e| usage("eta", e))?;
    Ok(eta)
}

fn step_control(p: &Params, spec: &LatticeSpec, t_default: f64) -> std::result::Result<StepControl, UsageError> {
    let mut ctrl = StepControl::new(spec, positive("t_max", p.t_max)?.unwrap_or(t_default))
        .with_rel_tol(p.rel_tol.unwrap_or(DEFAULT_REL_TOL))
        .with_max_steps(p.max_steps.unwrap_or(DEFAULT_MAX_STEPS))
        .with_stride(p.stride.unwrap_or(1));
    if let Some(dt) = positive("dt", p.dt)? {
        ctrl = ctrl.with_dt(dt);
    }
    ctrl.validate().map_err(|e| match e {
        Error::InvalidParameter { field, reason } => usage(field, reason),
        other => UsageError(other.to_string()),
    })?;
    Ok(ctrl)
}

fn tol(p: &Params) -> std::result::Result<f64, UsageError> {
    Ok(positive("tol", p.tol)?.unwrap_or(DEFAULT_TOL))
}

fn sweep_options(p: &Params, n_default: usize) -> std::result::Result<SweepOptions, UsageError> {
    if p.va.is_some() || p.vb.is_some() {
        return Err(usage("va", "sweeps take --va-min/--va-max/--va-count (v_a/v_t), not --va/--vb"));
    }
    let opts = SweepOptions {
        n_dimers: p.n.unwrap_or(n_default),
        boundary: p.boundary.unwrap_or_default(),
        tol: tol(p)?,
        rel_tol: p.rel_tol.unwrap_or(DEFAULT_REL_TOL),
        max_steps: p.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
        dt: positive("dt", p.dt)?,
        t_max: positive("t_max", p.t_max)?,
        jobs: p.jobs.unwrap_or(0),
    };
    // validate the shared settings on a representative lattice
    let probe = LatticeSpec::from_ratio(opts.n_dimers, 0.5, 0.5, opts.boundary).map_err(|e| usage("n", e))?;
    opts.step_control(&probe).validate().map_err(|e| match e {
        Error::InvalidParameter { field, reason } => usage(field, reason),
        other => UsageError(other.to_string()),
    })?;
    Ok(opts)
}

fn axis(name: &'static str, min: Option<f64>, max: Option<f64>, count: Option<usize>, d: (f64, f64, usize)) -> std::result::Result<Axis, UsageError> {
    Axis::new(name, min.unwrap_or(d.0), max.unwrap_or(d.1), count.unwrap_or(d.2)).map_err(|e| usage(name, e))
}

fn va_axis(p: &Params, d: (f64, f64, usize)) -> std::result::Result<Axis, UsageError> {
    let a = axis("va", p.va_min, p.va_max, p.va_count, d)?;
    if a.min < 0.0 || a.max > 1.0 {
        return Err(usage("va", "v_a/v_t axis must lie within [0, 1]"));
    }
    Ok(a)
}

fn gamma_axis(p: &Params, d: (f64, f64, usize)) -> std::result::Result<Axis, UsageError> {
    if p.gamma.is_some() {
        return Err(usage("gamma", "this sweep takes --gamma-min/--gamma-max/--gamma-count"));
    }
    axis("gamma", p.gamma_min, p.gamma_max, p.gamma_count, d)
}

/// Parses `args` (including the program name) into a validated config.
pub fn parse_config<I, T>(args: I) -> std::result::Result<RunConfig, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| UsageError(e.to_string()))?;
    resolve(cli.command)
}

pub fn resolve(command: Command) -> std::result::Result<RunConfig, UsageError> {
    let flags = command.params().clone();
    let p = match &flags.config {
        Some(path) => Params::overlay(read_config_file(path)?, flags),
        None => flags,
    };
    let task = match &command {
        Command::Spectrum(_) => {
            let n_k = p.nk.unwrap_or(512);
            if n_k < 2 {
                return Err(usage("nk", "need at least 2 momenta"));
            }
            Task::Spectrum {
                spec: single_spec(&p, DEFAULT_DIMERS)?,
                n_k,
            }
        }
        Command::Evolve(_) => {
            let spec = single_spec(&p, DEFAULT_DIMERS)?;
            let eta = eta(&p)?;
            let gauge = p.gauge.unwrap_or(Gauge::Pt);
            if eta > 0.0 && gauge == Gauge::Lossy {
                return Err(usage("gauge", "nonlinear runs use the PT gauge"));
            }
            Task::Evolve {
                spec,
                bloch: single_state(&p)?,
                gauge,
                eta,
                ctrl: step_control(&p, &spec, 20.0 / spec.total_coupling())?,
            }
        }
        Command::Meandisp(_) => {
            let spec = single_spec(&p, DEFAULT_DIMERS)?;
            if spec.gamma <= 0.0 {
                return Err(usage("gamma", "mean displacement needs gamma > 0"));
            }
            Task::Meandisp {
                spec,
                bloch: single_state(&p)?,
                eta: eta(&p)?,
                ctrl: step_control(&p, &spec, default_horizon(&spec))?,
                tol: tol(&p)?,
                n_k: p.nk.unwrap_or(DEFAULT_NK),
            }
        }
        Command::SweepCoupling(_) => {
            let gamma = positive("gamma", p.gamma)?.unwrap_or(0.5);
            Task::SweepCoupling {
                sweep: CouplingSweep {
                    v_a: va_axis(&p, (0.0, 1.0, 33))?,
                    gamma,
                    states: states(&p, 0.0, 0.0)?,
                },
                opts: sweep_options(&p, DEFAULT_DIMERS)?,
            }
        }
        Command::SweepGammaMap(_) => {
            let g = gamma_axis(&p, (0.1, 1.5, 15))?;
            if g.min < 0.05 {
                return Err(usage("gamma_min", "must be >= 0.05 (units of v_t)"));
            }
            Task::SweepGammaMap {
                sweep: GammaMapSweep {
                    v_a: va_axis(&p, (0.05, 0.95, 19))?,
                    gamma: g,
                    state: single_state_default(&p, PI / 2.0, PI / 2.0)?,
                },
                opts: sweep_options(&p, DEFAULT_DIMERS)?,
            }
        }
        Command::SweepNonlinear(_) => {
            if p.theta.is_some() || p.phi.is_some() {
                return Err(usage("theta", "the nonlinear sweep always starts on |0, A>"));
            }
            let g = gamma_axis(&p, (0.1, 1.0, 21))?;
            if g.min <= 0.0 {
                return Err(usage("gamma_min", "must be positive"));
            }
            Task::SweepNonlinear {
                sweep: NonlinearSweep {
                    v_a: va_axis(&p, (0.1, 0.9, 21))?,
                    gamma: g,
                    eta: p.eta.map_or(Ok(0.01), |_| eta(&p))?,
                },
                opts: sweep_options(&p, NONLINEAR_DIMERS)?,
            }
        }
        Command::FitMass(_) => {
            let v_a = p.va_list.clone().unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9]);
            if v_a.is_empty() || v_a.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(usage("va_list", "values must lie in [0, 1]"));
            }
            let gamma = p.gamma_list.clone().unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
            if gamma.is_empty() || gamma.iter().any(|g| !(*g > 0.0)) {
                return Err(usage("gamma_list", "values must be positive"));
            }
            let states = match (&p.theta, &p.phi) {
                (None, None) => [PI / 2.0, PI / 6.0, -PI / 2.0]
                    .iter()
                    .map(|&ph| BlochState::new(PI / 2.0, ph))
                    .collect::<Result<Vec<_>>>()?,
                _ => states(&p, PI / 2.0, PI / 2.0)?,
            };
            Task::FitMass {
                v_a,
                gamma,
                states,
                opts: sweep_options(&p, DEFAULT_DIMERS)?,
            }
        }
        Command::Phase(_) => {
            if p.va_count.is_some() || p.gamma_count.is_some() || p.va_min.is_some() || p.gamma_min.is_some() {
                Task::Phase {
                    spec: None,
                    grid: Some((va_axis(&p, (0.0, 1.0, 21))?, gamma_axis(&p, (0.0, 1.5, 31))?)),
                }
            } else {
                Task::Phase {
                    spec: Some(single_spec(&p, 3)?),
                    grid: None,
                }
            }
        }
    };
    Ok(RunConfig {
        command: command.name().to_string(),
        task,
        out: p.out.clone(),
        format: p.format.unwrap_or(Format::Csv),
        strict: p.strict,
        seed: p.seed,
    })
}

fn single_state_default(p: &Params, theta: f64, phi: f64) -> std::result::Result<BlochState, UsageError> {
    let s = states(p, theta, phi)?;
    if s.len() != 1 {
        return Err(usage("theta", "this subcommand takes a single Bloch state"));
    }
    Ok(s[0])
}

/// Rows and column names of a generic table.
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "NaN".into(),
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), crate::format_float),
        other => other.to_string(),
    }
}

fn num(x: f64) -> Value {
    // JSON has no NaN/inf; CSV prints them through `cell`
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

struct Outcome {
    summary: String,
    all_converged: bool,
}

fn emit(cfg: &RunConfig, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match &cfg.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::Io {
                context: format!("creating {}", path.display()),
                source: e,
            })?;
            let mut w = BufWriter::new(file);
            write(&mut w)?;
            w.flush().map_err(|e| Error::Io {
                context: format!("writing {}", path.display()),
                source: e,
            })
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    }
}

fn write_table(cfg: &RunConfig, table: &Table, extra: Value, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        context: "writing output".into(),
        source: e,
    };
    match cfg.format {
        Format::Csv => {
            for line in cfg.header() {
                writeln!(out, "# {line}").map_err(io)?;
            }
            writeln!(out, "{}", table.columns.join(",")).map_err(io)?;
            for r in &table.rows {
                let line: Vec<String> = r.iter().map(cell).collect();
                writeln!(out, "{}", line.join(",")).map_err(io)?;
            }
            Ok(())
        }
        Format::Json => {
            let rows: Vec<Map<String, Value>> = table
                .rows
                .iter()
                .map(|r| table.columns.iter().cloned().zip(r.iter().cloned()).collect())
                .collect();
            let doc = json!({ "config": cfg, "summary": extra, "rows": rows });
            serde_json::to_writer_pretty(&mut *out, &doc).map_err(|e| Error::Serialization(e.to_string()))?;
            writeln!(out).map_err(io)
        }
    }
}

fn sweep_output(cfg: &RunConfig, table: &SweepTable) -> Result<Outcome> {
    match cfg.format {
        Format::Csv => emit(cfg, |w| table.write_csv(&cfg.header(), w))?,
        Format::Json => {
            let t = Table {
                columns: table.columns(),
                rows: table
                    .rows
                    .iter()
                    .map(|r| {
                        let mut v = vec![
                            num(r.v_a),
                            num(r.v_b),
                            num(r.gamma),
                            num(r.theta),
                            num(r.phi),
                            num(r.eta),
                            num(r.mean_disp),
                            num(r.tail),
                            Value::Bool(r.converged),
                            json!(r.phase),
                            json!(r.flag),
                        ];
                        v.extend(r.extra.iter().map(|&x| num(x)));
                        v
                    })
                    .collect(),
            };
            emit(cfg, |w| write_table(cfg, &t, table.summary(), w))?;
        }
    }
    Ok(Outcome {
        summary: format!(
            "{}: {} rows, {} not converged, {:.2}s",
            table.kind,
            table.rows.len(),
            table.failures(),
            table.wall_time_s
        ),
        all_converged: table.failures() == 0,
    })
}

fn result_row(spec: &LatticeSpec, bloch: BlochState, eta: f64, r: &MeanDispResult) -> Vec<Value> {
    let phase = classify_phase(spec);
    vec![
        num(spec.intra),
        num(spec.inter),
        num(spec.gamma),
        num(bloch.theta),
        num(bloch.phi),
        num(eta),
        num(r.value),
        num(r.tail_estimate),
        Value::Bool(r.converged),
        json!(phase.phase),
        json!(crate::sweep::flag_for(Some(r), &phase)),
    ]
}

fn execute(cfg: &RunConfig) -> Result<Outcome> {
    match &cfg.task {
        Task::Spectrum { spec, n_k } => {
            let rows = (0..*n_k)
                .map(|j| {
                    let k = 2.0 * PI * j as f64 / *n_k as f64;
                    let l = band_eigenvalues(spec, k).lambda_plus;
                    vec![num(k), num(l.re), num(l.im)]
                })
                .collect();
            let phase = classify_phase(spec);
            let winding = winding_number(spec, DEFAULT_NK).ok();
            let extra = json!({
                "phase": phase.phase,
                "boundary": phase.boundary,
                "pt_threshold": pt_threshold(spec),
                "winding": winding.map(|w| w.winding),
            });
            let t = Table {
                columns: vec!["k".into(), "lambda_re".into(), "lambda_im".into()],
                rows,
            };
            emit(cfg, |w| write_table(cfg, &t, extra, w))?;
            Ok(Outcome {
                summary: format!(
                    "spectrum: {} (gamma_PT = {}, winding {})",
                    phase.phase,
                    pt_threshold(spec),
                    winding.map_or("undefined".to_string(), |w| w.winding.to_string())
                ),
                all_converged: true,
            })
        }
        Task::Evolve {
            spec,
            bloch,
            gauge,
            eta,
            ctrl,
        } => {
            let psi0 = localized_state(spec, 0, *bloch)?;
            let traj = if *eta > 0.0 {
                evolve_nonlinear(spec, &NonlinearSpec::new(*eta)?, &psi0, ctrl)?
            } else {
                let h = match gauge {
                    Gauge::Pt => Hamiltonian::pt(spec),
                    Gauge::Lossy => Hamiltonian::lossy(spec),
                };
                evolve_linear(&h, &psi0, ctrl)?
            };
            let rows = intensity_map(&traj)?;
            match cfg.format {
                Format::Csv => emit(cfg, |w| write_intensity_csv(&rows, &cfg.header(), w))?,
                Format::Json => {
                    let t = Table {
                        columns: vec!["t".into(), "cell".into(), "sublattice".into(), "intensity".into()],
                        rows: rows
                            .iter()
                            .map(|r| vec![num(r.t), json!(r.cell), json!(r.sublattice.to_string()), num(r.intensity)])
                            .collect(),
                    };
                    emit(cfg, |w| write_table(cfg, &t, json!({ "status": traj.status }), w))?;
                }
            }
            Ok(Outcome {
                summary: format!("evolve: {} samples, {} steps, {}", traj.samples.len(), traj.steps, traj.status),
                all_converged: !traj.status.is_failure(),
            })
        }
        Task::Meandisp {
            spec,
            bloch,
            eta,
            ctrl,
            tol,
            n_k,
        } => {
            let r = if *eta > 0.0 {
                nonlinear_mean_disp(spec, &NonlinearSpec::new(*eta)?, *bloch, ctrl, *tol)?
            } else {
                linear_mean_disp(spec, *bloch, ctrl, *tol)?
            };
            let analytic = analytic_mean_disp(spec, *bloch).unwrap_or(f64::NAN);
            let quad = QuadratureControl {
                n_k: *n_k,
                ..QuadratureControl::default()
            };
            let kspace = kspace_mean_disp(spec, *bloch, &quad).map(|k| k.result.value).unwrap_or(f64::NAN);
            let mut row = result_row(spec, *bloch, *eta, &r);
            row.extend([num(analytic), num(kspace)]);
            let columns = crate::sweep::BASE_COLUMNS
                .iter()
                .map(|s| s.to_string())
                .chain(["analytic".to_string(), "kspace".to_string()])
                .collect();
            let t = Table { columns, rows: vec![row] };
            emit(cfg, |w| write_table(cfg, &t, json!({ "horizon": r.horizon, "status": r.status }), w))?;
            Ok(Outcome {
                summary: format!(
                    "meandisp: {:.6} (analytic {:.6}, k-space {:.6}, converged {})",
                    r.value, analytic, kspace, r.converged
                ),
                all_converged: r.converged,
            })
        }
        Task::SweepCoupling { sweep, opts } => sweep_output(cfg, &sweep_coupling(sweep, opts)?),
        Task::SweepGammaMap { sweep, opts } => sweep_output(cfg, &sweep_gamma_map(sweep, opts)?),
        Task::SweepNonlinear { sweep, opts } => sweep_output(cfg, &sweep_nonlinear(sweep, opts)?),
        Task::FitMass {
            v_a,
            gamma,
            states,
            opts,
        } => {
            let report = sweep_mass_fit(v_a, gamma, states, opts)?;
            let rows = report
                .fits
                .iter()
                .map(|f| {
                    let expected = f.v_a.min(f.v_b * f.v_b / f.v_a);
                    vec![
                        num(f.v_a),
                        num(f.v_b),
                        num(f.mu_inverse),
                        num(expected),
                        num(f.intercept),
                        num(f.residual),
                        json!(f.samples),
                    ]
                })
                .collect();
            let t = Table {
                columns: ["v_a", "v_b", "mu_inverse", "expected", "intercept", "residual", "samples"]
                    .map(String::from)
                    .to_vec(),
                rows,
            };
            let extra = json!({ "skipped": report.skipped, "wall_time_s": report.wall_time_s });
            emit(cfg, |w| write_table(cfg, &t, extra, w))?;
            Ok(Outcome {
                summary: format!(
                    "fit-mass: {} fits from {} samples ({} skipped), {:.2}s",
                    report.fits.len(),
                    report.samples.len(),
                    report.skipped,
                    report.wall_time_s
                ),
                all_converged: report.skipped == 0,
            })
        }
        Task::Phase { spec, grid } => {
            let points = match (spec, grid) {
                (Some(s), _) => vec![classify_phase(s)],
                (None, Some((a, g))) => phase_grid(a, g)?,
                (None, None) => Vec::new(),
            };
            let rows = points
                .iter()
                .map(|p| {
                    vec![
                        num(p.v_a),
                        num(p.v_b),
                        num(p.gamma),
                        json!(p.phase),
                        Value::Bool(p.boundary),
                        num((p.v_a - p.v_b).abs()),
                    ]
                })
                .collect();
            let t = Table {
                columns: ["v_a", "v_b", "gamma", "phase", "boundary", "pt_threshold"].map(String::from).to_vec(),
                rows,
            };
            emit(cfg, |w| write_table(cfg, &t, Value::Null, w))?;
            let summary = match points.as_slice() {
                [one] => format!("phase: {}{}", one.phase, if one.boundary { " (boundary)" } else { "" }),
                many => format!("phase: {} points", many.len()),
            };
            Ok(Outcome {
                summary,
                all_converged: true,
            })
        }
    }
}

/// Runs a validated config; returns the process exit status.
pub fn run(cfg: &RunConfig) -> i32 {
    match execute(cfg) {
        Ok(outcome) => {
            eprintln!("{}", outcome.summary);
            if cfg.strict && !outcome.all_converged {
                EXIT_NOT_CONVERGED
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Entry point of the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match resolve(cli.command) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
