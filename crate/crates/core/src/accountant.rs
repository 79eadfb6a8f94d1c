//! Renyi-DP accounting for DP-SGD with Poisson subsampling.
//!
//! One step of the subsampled Gaussian mechanism is bounded at every order
//! of a fixed grid, the per-step curve is multiplied by the number of
//! steps, and the composed curve is converted to an `(epsilon, delta)`
//! guarantee by minimising over the orders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orders beyond 256, needed once `epsilon < ln(1/delta) / 255`; below that
/// no amount of noise satisfies the target on the integer grid alone.
const LARGE_ORDERS: [u32; 19] = [
    320, 384, 448, 512, 640, 768, 1024, 1536, 2048, 3072, 4096, 6144, 8192, 12288, 16384, 24576,
    32768, 49152, 65536,
];

/// Fractional orders `{1.5, 1.75}`, the integers `2..=256`, then a sparse
/// tail of larger integer orders up to 65536.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.5, 1.75];
    orders.extend((2..=256).map(f64::from));
    orders.extend(LARGE_ORDERS.iter().map(|&a| f64::from(a)));
    orders
}

/// Samples `(alpha, epsilon(alpha))` of an RDP guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    points: Vec<(f64, f64)>,
}

impl RdpCurve {
    /// Sorts by order and drops points whose bound is not finite.
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.retain(|&(_, eps)| eps.is_finite());
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidParameter(format!("duplicate order {}", w[0].0)));
            }
        }
        if let Some(&(alpha, eps)) = points.iter().find(|&&(a, e)| !(a > 1.0) || e < 0.0) {
            return Err(Error::InvalidParameter(format!("invalid RDP point ({alpha}, {eps})")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn epsilon_at(&self, alpha: f64) -> Option<f64> {
        self.points.iter().find(|p| p.0 == alpha).map(|p| p.1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An `(epsilon, delta)`-DP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let spec = Self { epsilon, delta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta {} must lie in (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// Splits the budget evenly into `parts` sequentially composable pieces.
    pub fn split(&self, parts: usize) -> Self {
        let k = parts.max(1) as f64;
        Self { epsilon: self.epsilon / k, delta: self.delta / k }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log E[(P/Q)^alpha]` for integer `alpha`, expanded binomially:
/// `sum_j C(alpha, j) (1-q)^(alpha-j) q^j exp(j(j-1) / (2 phi^2))`.
fn log_moment_integer(q: f64, phi: f64, alpha: u64) -> f64 {
    let (log_q, log_1q) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for j in 0..=alpha {
        if j > 0 {
            log_binom += ((alpha - j + 1) as f64).ln() - (j as f64).ln();
        }
        let jf = j as f64;
        let term = log_binom
            + (alpha - j) as f64 * log_1q
            + jf * log_q
            + jf * (jf - 1.0) / (2.0 * phi * phi);
        acc = log_add_exp(acc, term);
    }
    acc
}

/// Log-moment at a real order: exact at integers, linear in `alpha`
/// between neighbouring integers (with value 0 at `alpha = 1`). The
/// log-moment is convex in `alpha`, so the interpolation is an upper bound.
fn log_moment(q: f64, phi: f64, alpha: f64) -> f64 {
    let lo = alpha.floor();
    let hi = alpha.ceil();
    let at = |a: f64| if a <= 1.0 { 0.0 } else { log_moment_integer(q, phi, a as u64) };
    if lo == hi {
        return at(lo);
    }
    let w = alpha - lo;
    (1.0 - w) * at(lo) + w * at(hi)
}

/// RDP of one step of the Poisson-subsampled Gaussian mechanism with
/// sampling rate `q` and noise multiplier `phi`.
pub fn rdp_subsampled_gaussian(q: f64, phi: f64, orders: &[f64]) -> Result<RdpCurve> {
    if phi == 0.0 {
        return Err(Error::ZeroNoise);
    }
    if !(phi > 0.0) {
        return Err(Error::InvalidParameter(format!("noise multiplier {phi} must be positive")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!("sampling rate {q} must lie in (0, 1]")));
    }
    if let Some(a) = orders.iter().find(|&&a| !(a > 1.0)) {
        return Err(Error::InvalidParameter(format!("order {a} must exceed 1")));
    }
    let points = orders
        .iter()
        .map(|&alpha| {
            let eps = if q == 1.0 {
                alpha / (2.0 * phi * phi)
            } else {
                (log_moment(q, phi, alpha) / (alpha - 1.0)).max(0.0)
            };
            (alpha, eps)
        })
        .collect();
    RdpCurve::new(points)
}

/// Linear composition over `steps` iterations.
pub fn compose_rdp(curve: &RdpCurve, steps: u64) -> RdpCurve {
    let t = steps as f64;
    RdpCurve {
        points: curve.points.iter().map(|&(a, e)| (a, e * t)).collect(),
    }
}

/// Result of converting an RDP curve to `(epsilon, delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConversion {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_alpha: f64,
}

/// `min_alpha eps(alpha) + ln(1/delta) / (alpha - 1)`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<DpConversion> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta {delta} must lie in (0, 1)")));
    }
    let log_inv_delta = -delta.ln();
    curve
        .points
        .iter()
        .map(|&(alpha, eps)| (alpha, eps + log_inv_delta / (alpha - 1.0)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(optimal_alpha, epsilon)| DpConversion { epsilon, delta, optimal_alpha })
        .ok_or_else(|| Error::InvalidParameter("empty RDP curve".into()))
}

/// `(epsilon, delta)` spent by `steps` DP-SGD iterations.
pub fn privacy_spent(q: f64, phi: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<DpConversion> {
    let curve = rdp_subsampled_gaussian(q, phi, orders)?;
    rdp_to_dp(&compose_rdp(&curve, steps), delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Mechanisms applied to overlapping data: sums.
    Sequential,
    /// Mechanisms applied to disjoint sublogs: maxima.
    Parallel,
}

pub fn compose_dp(specs: &[PrivacySpec], mode: Composition) -> Result<PrivacySpec> {
    if specs.is_empty() {
        return Err(Error::InvalidParameter("nothing to compose".into()));
    }
    match mode {
        Composition::Sequential => {
            let epsilon = specs.iter().map(|s| s.epsilon).sum();
            let delta: f64 = specs.iter().map(|s| s.delta).sum();
            if delta >= 1.0 {
                return Err(Error::BudgetExhausted(delta));
            }
            Ok(PrivacySpec { epsilon, delta })
        }
        Composition::Parallel => Ok(PrivacySpec {
            epsilon: specs.iter().map(|s| s.epsilon).fold(f64::NEG_INFINITY, f64::max),
            delta: specs.iter().map(|s| s.delta).fold(f64::NEG_INFINITY, f64::max),
        }),
    }
}

/// Outcome of [`calibrate_noise`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub noise_multiplier: f64,
    pub achieved_epsilon: f64,
    pub delta: f64,
    pub optimal_alpha: f64,
}

pub const MAX_NOISE_MULTIPLIER: f64 = 1e6;
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;

/// Smallest noise multiplier (to within [`CALIBRATION_TOLERANCE`]) whose
/// composed guarantee over `steps` iterations meets `target`.
pub fn calibrate_noise(target: PrivacySpec, q: f64, steps: u64) -> Result<Calibration> {
    target.validate()?;
    if steps == 0 {
        return Err(Error::InvalidParameter("calibration needs at least one iteration".into()));
    }
    let orders = default_orders();
    let spent = |phi: f64| privacy_spent(q, phi, steps, target.delta, &orders);
    let outcome = |phi: f64, c: DpConversion| Calibration {
        noise_multiplier: phi,
        achieved_epsilon: c.epsilon,
        delta: c.delta,
        optimal_alpha: c.optimal_alpha,
    };

    let mut hi = MAX_NOISE_MULTIPLIER;
    let mut best = spent(hi)?;
    if best.epsilon > target.epsilon {
        return Err(Error::Infeasible(format!(
            "epsilon {} unreachable at delta {} with q = {q}, {steps} steps (noise multiplier {hi} gives {})",
            target.epsilon, target.delta, best.epsilon
        )));
    }
    let mut lo = 0.0;
    while hi - lo > CALIBRATION_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        let c = spent(mid)?;
        if c.epsilon <= target.epsilon {
            hi = mid;
            best = c;
        } else {
            lo = mid;
        }
    }
    Ok(outcome(hi, best))
}

/// Step counter of one training run under fixed `(q, phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    steps: u64,
    orders: Vec<f64>,
}

impl AccountantState {
    pub fn new(sampling_rate: f64, noise_multiplier: f64) -> Self {
        Self { sampling_rate, noise_multiplier, steps: 0, orders: default_orders() }
    }

    /// Counts one iteration, including ones whose Poisson batch was empty.
    pub fn record_step(&mut self) {
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn spent(&self, delta: f64) -> Result<DpConversion> {
        privacy_spent(self.sampling_rate, self.noise_multiplier, self.steps, delta, &self.orders)
    }

    /// Guarantee of the run so far; `None` when no noise was added.
    pub fn guarantee(&self, delta: f64) -> Result<Option<PrivacySpec>> {
        if self.noise_multiplier == 0.0 {
            return Ok(None);
        }
        let spent = self.spent(delta)?;
        Ok(Some(PrivacySpec { epsilon: spent.epsilon, delta: spent.delta }))
    }
}
