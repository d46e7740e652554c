//! One-dimensional quadrature used by the time integrals.

/// 8-point Gauss–Legendre nodes on [-1, 1] (positive half).
const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_26,
];

/// Nodes and weights of the 8-point rule mapped onto `[a, b]`.
pub fn gauss_legendre8(a: f64, b: f64) -> [(f64, f64); 8] {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = [(0.0, 0.0); 8];
    for (i, (&x, &w)) in GL8_NODES.iter().zip(GL8_WEIGHTS.iter()).enumerate() {
        out[2 * i] = (mid - half * x, half * w);
        out[2 * i + 1] = (mid + half * x, half * w);
    }
    out
}

// Kronrod extension of the 7-point Gauss rule (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let pair = f(c - x) + f(c + x);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    let integral = kronrod * h;
    let err = ((kronrod - gauss) * h).abs();
    (integral, err)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Adaptive Gauss–Kronrod (7/15) with global bisection of the worst interval.
pub fn adaptive_gk15<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64, max_intervals: usize) -> QuadResult {
    let (v0, e0) = gk15(&f, a, b);
    let mut intervals = vec![(a, b, v0, e0)];
    let mut evaluations = 15;
    loop {
        let total: f64 = intervals.iter().map(|i| i.2).sum();
        let err: f64 = intervals.iter().map(|i| i.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) || intervals.len() >= max_intervals {
            return QuadResult {
                value: total,
                error: err,
                evaluations,
            };
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty interval list");
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (vl, el) = gk15(&f, lo, mid);
        let (vr, er) = gk15(&f, mid, hi);
        evaluations += 30;
        intervals.push((lo, mid, vl, el));
        intervals.push((mid, hi, vr, er));
    }
}

/// `∫_0^∞ f(t) dt` through `t = s/(1-s)`.
pub fn integrate_semi_infinite<F: Fn(f64) -> f64>(f: F, abs_tol: f64, rel_tol: f64) -> QuadResult {
    let g = |s: f64| {
        if s >= 1.0 {
            return 0.0;
        }
        let one_minus = 1.0 - s;
        let t = s / one_minus;
        let v = f(t) / (one_minus * one_minus);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    adaptive_gk15(g, 0.0, 1.0, abs_tol, rel_tol, 20_000)
}

/// Integral over `[x1, x2]` of the parabola through three samples.
fn parabola_tail(x0: f64, f0: f64, x1: f64, f1: f64, x2: f64, f2: f64) -> f64 {
    let h0 = x1 - x0;
    let h1 = x2 - x1;
    // f(s) = f1 + c1 s + c2 s^2, s = x - x1
    let d0 = (f0 - f1) / (-h0);
    let d1 = (f2 - f1) / h1;
    let c2 = (d1 - d0) / (h0 + h1);
    let c1 = d0 + c2 * h0;
    f1 * h1 + 0.5 * c1 * h1 * h1 + c2 * h1 * h1 * h1 / 3.0
}

/// Composite Simpson rule fed one sample at a time.
///
/// Consecutive intervals are paired; spacing may differ between and within
/// pairs. A dangling final interval is closed with the parabola through the
/// last three samples.
#[derive(Debug, Clone, Default)]
pub struct SimpsonAccumulator {
    closed: f64,
    pending: Vec<(f64, f64)>,
    // middle sample of the most recently closed pair
    prev_mid: Option<(f64, f64)>,
}

impl SimpsonAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a sample; returns the increment of the closed (paired) integral.
    pub fn push(&mut self, x: f64, y: f64) -> f64 {
        self.pending.push((x, y));
        if self.pending.len() < 3 {
            return 0.0;
        }
        let (x0, f0) = self.pending[0];
        let (x1, f1) = self.pending[1];
        let (x2, f2) = self.pending[2];
        let h0 = x1 - x0;
        let h1 = x2 - x1;
        let hs = h0 + h1;
        let inc = hs / 6.0 * ((2.0 - h1 / h0) * f0 + hs * hs / (h0 * h1) * f1 + (2.0 - h0 / h1) * f2);
        self.closed += inc;
        self.prev_mid = Some((x1, f1));
        self.pending.drain(..2);
        inc
    }

    /// Integral over all samples pushed so far.
    pub fn value(&self) -> f64 {
        match (self.pending.as_slice(), self.prev_mid) {
            ([(x1, f1), (x2, f2)], Some((x0, f0))) => self.closed + parabola_tail(x0, f0, *x1, *f1, *x2, *f2),
            ([(x1, f1), (x2, f2)], None) => self.closed + 0.5 * (x2 - x1) * (f1 + f2),
            _ => self.closed,
        }
    }
}
