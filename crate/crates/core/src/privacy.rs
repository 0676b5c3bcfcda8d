//! Client-level differential privacy: update clipping, Gaussian noising,
//! aggregation sensitivity and a Rényi-DP accountant for the sampled Gaussian
//! mechanism.
//!
//! The accountant evaluates the one-round RDP of the subsampled Gaussian
//!
//! ```text
//! eps_1(a) = 1/(a-1) * ln E_{z~N(0,s^2)} [ (1 - q + q * N(z;1,s^2)/N(z;0,s^2))^a ]
//! ```
//!
//! by two independent routes: an exact binomial expansion (integer orders)
//! and adaptive Gauss-Kronrod quadrature of the integral (any order > 1).
//! RDP composes additively over rounds and is converted to (eps, delta) at
//! query time by minimizing over a fixed order grid.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterVector;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    clip: f64,
    noise_multiplier: f64,
    sample_ratio: f64,
    delta: f64,
    total_clients: usize,
    sampled_clients: usize,
}

impl PrivacySpec {
    /// `sampled_clients` is `round(sample_ratio * total_clients)`.
    pub fn new(
        clip: f64,
        noise_multiplier: f64,
        sample_ratio: f64,
        delta: f64,
        total_clients: usize,
    ) -> Result<Self> {
        if clip.is_nan() || clip <= 0.0 {
            return Err(Error::invalid("clip", format!("must be > 0, got {clip}")));
        }
        if !(noise_multiplier >= 0.0 && noise_multiplier.is_finite()) {
            return Err(Error::invalid(
                "sigma",
                format!("must be finite and >= 0, got {noise_multiplier}"),
            ));
        }
        if !(sample_ratio > 0.0 && sample_ratio <= 1.0) {
            return Err(Error::invalid(
                "q",
                format!("must lie in (0, 1], got {sample_ratio}"),
            ));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(
                "delta",
                format!("must lie in (0, 1), got {delta}"),
            ));
        }
        if total_clients == 0 {
            return Err(Error::invalid("clients", "must be >= 1"));
        }
        let sampled = (sample_ratio * total_clients as f64).round() as usize;
        if sampled == 0 {
            return Err(Error::invalid(
                "q",
                format!(
                    "q * clients = {} rounds to zero clients",
                    sample_ratio * total_clients as f64
                ),
            ));
        }
        Ok(Self {
            clip,
            noise_multiplier,
            sample_ratio,
            delta,
            total_clients,
            sampled_clients: sampled.min(total_clients),
        })
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.noise_multiplier
    }

    pub fn sample_ratio(&self) -> f64 {
        self.sample_ratio
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn total_clients(&self) -> usize {
        self.total_clients
    }

    pub fn sampled_clients(&self) -> usize {
        self.sampled_clients
    }

    /// Per-coordinate standard deviation `sigma * C / sqrt(m)`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip / (self.sampled_clients as f64).sqrt()
    }
}

/// Relative headroom left below `C` when an update is clipped, so sums and
/// averages of clipped updates stay within their bound after rounding.
pub const CLIP_HEADROOM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub clipped: ParameterVector,
    /// `min(1, C / pre_clip_norm)`, and 1 for a zero update. A clipped vector
    /// is scaled by this up to `CLIP_HEADROOM`.
    pub factor: f64,
    pub pre_clip_norm: f64,
}

pub fn clip_update(delta: &ParameterVector, clip: f64) -> ClipResult {
    let norm = delta.norm();
    let factor = if norm > 0.0 {
        (clip / norm).min(1.0)
    } else {
        1.0
    };
    let clipped = if factor < 1.0 {
        let target = clip * (1.0 - CLIP_HEADROOM);
        let mut scale = factor * (1.0 - CLIP_HEADROOM);
        let mut clipped = delta.scale(scale);
        while clipped.norm() > target {
            scale *= 1.0 - f64::EPSILON;
            clipped = delta.scale(scale);
        }
        clipped
    } else {
        delta.clone()
    };
    ClipResult {
        clipped,
        factor,
        pre_clip_norm: norm,
    }
}

/// Adds i.i.d. `N(0, std^2)` noise to the coordinates selected by `mask`
/// (all of them when `mask` is `None`). Draws happen in index order, one per
/// selected coordinate. A zero `std` returns the input untouched.
pub fn add_noise_with<R: Rng + ?Sized>(
    delta: &ParameterVector,
    mask: Option<&[bool]>,
    std: f64,
    rng: &mut R,
) -> ParameterVector {
    let mut out = delta.clone();
    if std == 0.0 {
        return out;
    }
    for (i, v) in out.iter_mut().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
    out
}

/// Gaussian mechanism on one clipped client update, seeded.
pub fn add_dp_noise(delta: &ParameterVector, spec: &PrivacySpec, seed: u64) -> ParameterVector {
    let mut rng = rng::seeded(seed, Purpose::Noise);
    add_noise_with(delta, None, spec.noise_std(), &mut rng)
}

/// l2 sensitivity of the server average of `m` clipped updates: `C / m`.
pub fn aggregation_sensitivity(spec: &PrivacySpec) -> f64 {
    spec.clip / spec.sampled_clients as f64
}

fn check_rdp_args(q: f64, sigma: f64, order: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("q", format!("must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(
            "sigma",
            format!("must be finite and > 0, got {sigma}"),
        ));
    }
    if !(order > 1.0 && order.is_finite()) {
        return Err(Error::invalid(
            "order",
            format!("must be finite and > 1, got {order}"),
        ));
    }
    Ok(())
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// One-round RDP at an integer order via the binomial expansion
/// `A = sum_k C(a,k) (1-q)^(a-k) q^k exp((k^2 - k) / (2 s^2))`.
pub fn rdp_binomial(q: f64, sigma: f64, order: u32) -> Result<f64> {
    check_rdp_args(q, sigma, order as f64)?;
    let a = order as usize;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let mut log_binom = 0.0f64;
    let mut log_a = f64::NEG_INFINITY;
    for k in 0..=a {
        if k > 0 {
            log_binom += ((a - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let mut term = log_binom + (kf * kf - kf) / (2.0 * sigma * sigma);
        if k > 0 {
            term += kf * log_q;
        }
        if k < a {
            term += (a - k) as f64 * log_1mq;
        }
        log_a = log_add_exp(log_a, term);
    }
    Ok((log_a / (order as f64 - 1.0)).max(0.0))
}

/// Absolute tolerance on the peak-normalized integrand's integral.
const QUAD_TOL: f64 = 1e-12;
const QUAD_MAX_PANELS: usize = 20_000;
const QUAD_INITIAL_PANELS: usize = 64;
const PEAK_SCAN_POINTS: usize = 4096;

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_KRONROD: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const GK_GAUSS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> Panel {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mid = f(center);
    let mut kronrod = GK_KRONROD[7] * mid;
    let mut gauss = GK_GAUSS[3] * mid;
    for j in 0..7 {
        let dx = half * GK_NODES[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += GK_KRONROD[j] * pair;
        // Gauss nodes are the odd-indexed Kronrod nodes.
        if j % 2 == 1 {
            gauss += GK_GAUSS[j / 2] * pair;
        }
    }
    Panel {
        lo,
        hi,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Globally adaptive Gauss-Kronrod on `[lo, hi]` seeded with equal panels.
fn integrate<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, order: f64) -> Result<f64> {
    let width = (hi - lo) / QUAD_INITIAL_PANELS as f64;
    let mut panels: Vec<Panel> = (0..QUAD_INITIAL_PANELS)
        .map(|i| {
            let a = lo + width * i as f64;
            let b = if i + 1 == QUAD_INITIAL_PANELS {
                hi
            } else {
                a + width
            };
            gauss_kronrod(f, a, b)
        })
        .collect();
    loop {
        let error: f64 = panels.iter().map(|p| p.error).sum();
        if error <= QUAD_TOL {
            return Ok(panels.iter().map(|p| p.value).sum());
        }
        if panels.len() >= QUAD_MAX_PANELS {
            return Err(Error::QuadratureNotConverged { order, error });
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.error.total_cmp(&b.1.error))
            .expect("non-empty");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.lo + p.hi);
        panels.push(gauss_kronrod(f, p.lo, mid));
        panels.push(gauss_kronrod(f, mid, p.hi));
    }
}

/// One-round RDP at any real order > 1 by numerical quadrature of the
/// defining integral, evaluated in log space.
pub fn rdp_quadrature(q: f64, sigma: f64, order: f64) -> Result<f64> {
    check_rdp_args(q, sigma, order)?;
    let two_var = 2.0 * sigma * sigma;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_integrand = |z: f64| {
        let log_ratio = (2.0 * z - 1.0) / two_var;
        let mix = if q == 1.0 {
            log_ratio
        } else {
            log_add_exp(log_1mq, log_q + log_ratio)
        };
        log_norm - z * z / two_var + order * mix
    };

    // The integrand is a positive mixture of Gaussians centred in [0, order]
    // with standard deviation sigma.
    let margin = 12.0 * sigma + 12.0;
    let (lo, hi) = (-margin, order + margin);
    let peak = (0..=PEAK_SCAN_POINTS)
        .map(|i| log_integrand(lo + (hi - lo) * i as f64 / PEAK_SCAN_POINTS as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled = |z: f64| (log_integrand(z) - peak).exp();
    let integral = integrate(&scaled, lo, hi, order)?;
    if integral.is_nan() || integral <= 0.0 {
        return Err(Error::NonFinite("rdp_quadrature"));
    }
    Ok(((peak + integral.ln()) / (order - 1.0)).max(0.0))
}

/// One-round RDP of the sampled Gaussian mechanism. Integer orders use the
/// exact binomial expansion, all others use quadrature.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, order: f64) -> Result<f64> {
    check_rdp_args(q, sigma, order)?;
    if order.fract() == 0.0 && order <= u32::MAX as f64 {
        rdp_binomial(q, sigma, order as u32)
    } else {
        rdp_quadrature(q, sigma, order)
    }
}

/// Default Rényi orders: a fine band below 3 plus integers up to 16 and
/// multiples of four up to 64.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75, 2.0, 2.5];
    orders.extend((3..=16).map(f64::from));
    orders.extend((5..=16).map(|k| f64::from(4 * k)));
    orders
}

/// Per-order RDP accumulated over composed rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    rounds: u64,
    orders: Vec<f64>,
    rdp: Vec<f64>,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new(default_orders()).expect("default grid is valid")
    }
}

impl PrivacyLedger {
    pub fn new(orders: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = orders.iter().find(|&&a| !(a > 1.0 && a.is_finite())) {
            return Err(Error::invalid(
                "order",
                format!("orders must be > 1, got {bad}"),
            ));
        }
        let rdp = vec![0.0; orders.len()];
        Ok(Self {
            rounds: 0,
            orders,
            rdp,
        })
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    /// One-round RDP at every tracked order.
    pub fn per_round(&self, q: f64, sigma: f64) -> Result<Vec<f64>> {
        self.orders
            .iter()
            .map(|&a| rdp_sampled_gaussian(q, sigma, a))
            .collect()
    }

    /// Adds `rounds` copies of a precomputed per-round RDP curve.
    pub fn compose_per_round(&self, per_round: &[f64], rounds: u64) -> Result<Self> {
        if per_round.len() != self.orders.len() {
            return Err(Error::DimensionMismatch {
                expected: self.orders.len(),
                actual: per_round.len(),
                context: "per-round RDP curve",
            });
        }
        let mut next = self.clone();
        if rounds == 0 {
            return Ok(next);
        }
        next.rounds += rounds;
        for (total, step) in next.rdp.iter_mut().zip(per_round) {
            *total += rounds as f64 * step;
        }
        Ok(next)
    }

    pub fn compose(&self, rounds: u64, q: f64, sigma: f64) -> Result<Self> {
        if rounds == 0 {
            return Ok(self.clone());
        }
        let per_round = self.per_round(q, sigma)?;
        self.compose_per_round(&per_round, rounds)
    }

    /// Smallest `eps` over the order grid for the given `delta`, with the
    /// order that attains it.
    pub fn epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(
                "delta",
                format!("must lie in (0, 1), got {delta}"),
            ));
        }
        if self.orders.is_empty() {
            return Err(Error::invalid("order", "order grid is empty"));
        }
        let mut best = (f64::INFINITY, self.orders[0]);
        for (&a, &rdp) in self.orders.iter().zip(&self.rdp) {
            let eps = rdp_to_epsilon(rdp, a, delta);
            if eps < best.0 {
                best = (eps, a);
            }
        }
        Ok(best)
    }
}

/// `eps = rdp + ((a-1) ln(1 - 1/a) - ln a - ln delta) / (a - 1)`.
pub fn rdp_to_epsilon(rdp: f64, order: f64, delta: f64) -> f64 {
    rdp + ((order - 1.0) * (1.0 - 1.0 / order).ln() - order.ln() - delta.ln()) / (order - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub rounds: u64,
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub order: f64,
}

/// Accumulated privacy budget after each entry of `rounds`.
pub fn budget_table(q: f64, sigma: f64, delta: f64, rounds: &[u64]) -> Result<Vec<BudgetRow>> {
    let ledger = PrivacyLedger::default();
    let per_round = ledger.per_round(q, sigma)?;
    rounds
        .iter()
        .map(|&t| {
            let (epsilon, order) = ledger.compose_per_round(&per_round, t)?.epsilon(delta)?;
            Ok(BudgetRow {
                rounds: t,
                q,
                sigma,
                delta,
                epsilon,
                order,
            })
        })
        .collect()
}

pub fn budget_csv(rows: &[BudgetRow]) -> String {
    let mut out = String::from("T,q,sigma,delta,eps,alpha\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.rounds, r.q, r.sigma, r.delta, r.epsilon, r.order
        );
    }
    out
}
