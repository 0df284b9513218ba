//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! A mechanism `M` is (ε, δ)-DP when for all adjacent datasets `d, d'` and
//! all output sets `S`, `P[M(d) ∈ S] ≤ e^ε P[M(d') ∈ S] + δ`. The ledger
//! records every noisy gradient release; composition happens in RDP space
//! (additive per order) and the result is converted to (ε, δ) by minimizing
//! `rdp(α) + ln(1/δ)/(α − 1)` over the order grid.
//!
//! Anything computed from a released model afterwards (feature extraction,
//! mixture fitting, adaptation) is post-processing and adds no events.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How batches were drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScheme {
    /// Fixed-size batches drawn uniformly without replacement. The Poisson
    /// subsampling bound is applied with `q = batch/N` as an approximation.
    UniformWithoutReplacement,
    Poisson,
}

impl SamplingScheme {
    pub fn describe(self) -> &'static str {
        match self {
            SamplingScheme::UniformWithoutReplacement => {
                "uniform-without-replacement (accounted with the Poisson subsampled-Gaussian bound, q = batch/N; approximation)"
            }
            SamplingScheme::Poisson => "poisson",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEvent {
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub count: u64,
}

/// Every privatized release made during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    events: Vec<PrivacyEvent>,
    pub delta: f64,
    pub scheme: SamplingScheme,
}

impl PrivacyLedger {
    pub fn new(delta: f64, scheme: SamplingScheme) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { events: Vec::new(), delta, scheme })
    }

    /// Records `count` releases at `(q, σ)`; merges with the previous event
    /// when the parameters are identical.
    pub fn record(&mut self, sampling_rate: f64, noise_multiplier: f64, count: u64) -> Result<()> {
        if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
            return Err(Error::config(format!("sampling rate must lie in (0, 1], got {sampling_rate}")));
        }
        if !(noise_multiplier >= 0.0) {
            return Err(Error::config(format!("noise multiplier must be ≥ 0, got {noise_multiplier}")));
        }
        if count == 0 {
            return Err(Error::config("privacy events need count ≥ 1"));
        }
        if let Some(last) = self.events.last_mut() {
            if last.sampling_rate == sampling_rate && last.noise_multiplier == noise_multiplier {
                last.count += count;
                return Ok(());
            }
        }
        self.events.push(PrivacyEvent { sampling_rate, noise_multiplier, count });
        Ok(())
    }

    pub fn events(&self) -> &[PrivacyEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Total number of releases.
    pub fn total_steps(&self) -> u64 {
        self.events.iter().map(|e| e.count).sum()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("ledger always serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Composes the ledger on `orders` and converts at the ledger's δ.
    pub fn epsilon(&self, orders: &[f64]) -> Result<EpsDelta> {
        to_eps_delta(&compose(self, orders)?, self.delta)
    }
}

/// RDP values at a set of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsDelta {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_order: f64,
}

/// `{2, 3, …, 64} ∪ {128, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (2..=64).map(f64::from).collect();
    orders.extend([128.0, 256.0]);
    orders
}

/// RDP of the Gaussian mechanism with sensitivity 1: `α / (2σ²)`.
/// `σ = 0` returns `+∞`.
pub fn gaussian_rdp(sigma: f64, order: f64) -> f64 {
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    order / (2.0 * sigma * sigma)
}

/// RDP at integer order `α` of the Poisson-subsampled Gaussian mechanism,
/// `ln A_α / (α − 1)` with
///
/// `A_α = Σ_{k=0}^{α} C(α, k) (1 − q)^{α−k} q^k exp((k² − k) / (2σ²))`,
///
/// evaluated as a log-sum-exp so large orders and small σ do not overflow.
pub fn subsampled_gaussian_rdp(sampling_rate: f64, sigma: f64, order: u32) -> Result<f64> {
    let q = sampling_rate;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("noise multiplier must be positive, got {sigma}")));
    }
    if order < 2 {
        return Err(Error::config(format!("order must be an integer ≥ 2, got {order}")));
    }
    if q == 1.0 {
        return Ok(gaussian_rdp(sigma, f64::from(order)));
    }
    let alpha = f64::from(order);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut log_terms = Vec::with_capacity(order as usize + 1);
    let mut log_binom = 0.0;
    for k in 0..=order {
        if k > 0 {
            log_binom += (alpha - f64::from(k) + 1.0).ln() - f64::from(k).ln();
        }
        let kf = f64::from(k);
        log_terms.push(log_binom + (alpha - kf) * ln_1mq + kf * ln_q + (kf * kf - kf) * inv_two_var);
    }
    let log_a = log_sum_exp(&log_terms);
    // A_α ≥ 1 mathematically; rounding can leave a -1e-17 residue
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn event_rdp(event: &PrivacyEvent, order: f64) -> Result<f64> {
    if event.noise_multiplier == 0.0 {
        return Ok(f64::INFINITY);
    }
    if event.sampling_rate == 1.0 {
        return Ok(gaussian_rdp(event.noise_multiplier, order));
    }
    if order.fract() != 0.0 || order < 2.0 || order > f64::from(u32::MAX) {
        return Err(Error::config(format!("subsampled events need integer orders ≥ 2, got {order}")));
    }
    subsampled_gaussian_rdp(event.sampling_rate, event.noise_multiplier, order as u32)
}

/// Sums per-event RDP (count-weighted) at every order.
pub fn compose(ledger: &PrivacyLedger, orders: &[f64]) -> Result<RdpCurve> {
    if let Some(bad) = orders.iter().find(|&&a| !(a > 1.0)) {
        return Err(Error::config(format!("RDP orders must exceed 1, got {bad}")));
    }
    let mut values = vec![0.0; orders.len()];
    for event in ledger.events() {
        for (v, &order) in values.iter_mut().zip(orders) {
            *v += event.count as f64 * event_rdp(event, order)?;
        }
    }
    Ok(RdpCurve { orders: orders.to_vec(), values })
}

/// `ε = min_α [rdp(α) + ln(1/δ)/(α − 1)]`, recording the minimizing order.
pub fn to_eps_delta(curve: &RdpCurve, delta: f64) -> Result<EpsDelta> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if curve.orders.is_empty() || curve.orders.len() != curve.values.len() {
        return Err(Error::config("cannot convert an empty RDP curve"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = EpsDelta { epsilon: f64::INFINITY, delta, optimal_order: curve.orders[0] };
    for (&order, &rdp) in curve.orders.iter().zip(&curve.values) {
        let eps = rdp + log_inv_delta / (order - 1.0);
        if eps < best.epsilon {
            best.epsilon = eps;
            best.optimal_order = order;
        }
    }
    Ok(best)
}

/// ε after `steps` releases at `(q, σ)`.
pub fn epsilon_for(sampling_rate: f64, sigma: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<EpsDelta> {
    let mut ledger = PrivacyLedger::new(delta, SamplingScheme::Poisson)?;
    if steps > 0 {
        ledger.record(sampling_rate, sigma, steps)?;
    }
    ledger.epsilon(orders)
}

/// Default `c2` for [`sufficient_sigma`]; chosen so that σ at the bound keeps
/// the accountant's ε at or below the target across the tested `(q, T)` grid.
pub const DEFAULT_C2: f64 = 2.0;
/// Default `c1` for the validity condition `ε < c1 q² T`.
pub const DEFAULT_C1: f64 = 1.0;

/// Noise bound `σ ≥ c2 · q √(T ln(1/δ)) / ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaBound {
    pub sigma: f64,
    /// Whether `ε < c1 q² T` holds, i.e. the bound's precondition.
    pub precondition_met: bool,
}

pub fn sufficient_sigma(sampling_rate: f64, steps: u64, epsilon: f64, delta: f64, c1: f64, c2: f64) -> SigmaBound {
    let t = steps as f64;
    let sigma = c2 * sampling_rate * (t * (1.0 / delta).ln()).sqrt() / epsilon;
    let precondition_met = epsilon < c1 * sampling_rate * sampling_rate * t;
    if !precondition_met {
        log::warn!(
            "sigma bound precondition ε < c1 q² T fails (ε = {epsilon}, c1 q² T = {})",
            c1 * sampling_rate * sampling_rate * t
        );
    }
    SigmaBound { sigma, precondition_met }
}

/// Smallest σ (to relative precision 1e-6) whose accountant ε does not exceed
/// `target_epsilon`.
pub fn calibrate_sigma(sampling_rate: f64, steps: u64, target_epsilon: f64, delta: f64, orders: &[f64]) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::config(format!("target ε must be positive, got {target_epsilon}")));
    }
    if steps == 0 {
        return Err(Error::config("cannot calibrate noise for zero steps"));
    }
    let eps = |s: f64| epsilon_for(sampling_rate, s, steps, delta, orders).map(|e| e.epsilon);
    let mut lo = 1e-3;
    let mut hi = 1.0;
    while eps(hi)? > target_epsilon {
        lo = hi;
        hi *= 2.0;
        if hi > 1e7 {
            return Err(Error::config(format!("target ε = {target_epsilon} unreachable on this order grid")));
        }
    }
    while (hi - lo) > 1e-6 * hi {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
