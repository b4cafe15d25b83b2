//! Pinball-loss machinery: empirical quantiles, the smoothed and regularized loss,
//! its centralized minimizer, and the split-CP / FCP thresholds.
//!
//! A threshold of `f64::INFINITY` means the quantile rank exceeds the sample size;
//! the prediction set is then the whole label space.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcpError, Result};
use crate::scores::CalibrationData;

/// Beyond `|κx| > SATURATION` the logistic terms equal 0 or 1 to double precision.
const SATURATION: f64 = 40.0;

const NEWTON_MAX_ITER: usize = 200;

/// Slack when taking `⌈γ n⌉`, so products such as `0.9 · 1.02 · 1000` that land a
/// rounding error above an integer are not bumped to the next rank.
pub(crate) const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinballParams {
    pub gamma: f64,
    pub kappa: f64,
    pub mu: f64,
    pub s0: f64,
    pub epsilon0: f64,
}

impl PinballParams {
    /// `γ` may exceed 1 (the conformal level `(1−α)(1+K/n)` does for tiny `n`).
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", format!("{} must be positive", self.gamma)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid("kappa", format!("{} must be positive", self.kappa)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid("mu", format!("{} must be nonnegative", self.mu)));
        }
        if !(self.epsilon0 >= 0.0) {
            return Err(invalid("epsilon0", format!("{} must be nonnegative", self.epsilon0)));
        }
        if !self.s0.is_finite() {
            return Err(invalid("s0", "must be finite"));
        }
        Ok(())
    }
}

/// Conformal level `(1−α)(1+K/n)`.
pub fn conformal_level(alpha: f64, num_devices: usize, n: usize) -> f64 {
    (1.0 - alpha) * (1.0 + num_devices as f64 / n as f64)
}

/// `⌈γ n⌉`, the order statistic selected by `empirical_quantile`.
pub fn quantile_rank(n: usize, gamma: f64) -> usize {
    let x = gamma * n as f64;
    (x - RANK_SLACK * x.abs().max(1.0)).ceil().max(1.0) as usize
}

/// The `⌈γ n⌉`-th smallest score, or `+∞` when that rank exceeds `n`.
pub fn empirical_quantile(scores: &[f64], gamma: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(DcpError::InvalidData("empirical quantile of an empty set".into()));
    }
    let rank = quantile_rank(scores.len(), gamma);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

pub fn pinball_loss(s: f64, scores: &[f64], gamma: f64) -> f64 {
    scores
        .iter()
        .map(|&x| gamma * (x - s).max(0.0) + (1.0 - gamma) * (s - x).max(0.0))
        .sum()
}

/// `g̃(x) = x + log(1 + e^{−κx}) / κ`, written so neither branch overflows.
#[inline]
pub fn smooth_relu(x: f64, kappa: f64) -> f64 {
    let t = kappa * x;
    if t >= 0.0 {
        x + (-t).exp().ln_1p() / kappa
    } else {
        t.exp().ln_1p() / kappa
    }
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `g̃'(x) = σ(κx)`.
#[inline]
pub fn smooth_relu_grad(x: f64, kappa: f64) -> f64 {
    logistic(kappa * x)
}

/// `g̃''(x) = κ σ(κx)(1 − σ(κx))`.
#[inline]
pub fn smooth_relu_hess(x: f64, kappa: f64) -> f64 {
    let e = (-(kappa * x).abs()).exp();
    kappa * e / ((1.0 + e) * (1.0 + e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedValue {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

/// Direct O(n) evaluation of the smoothed, regularized pinball loss and its derivatives.
pub fn smoothed_pinball(s: f64, scores: &[f64], params: &PinballParams) -> SmoothedValue {
    let PinballParams {
        gamma, kappa, mu, s0, ..
    } = *params;
    let mut value = 0.5 * mu * (s - s0) * (s - s0);
    let mut first = mu * (s - s0);
    let mut second = mu;
    for &x in scores {
        value += gamma * smooth_relu(x - s, kappa) + (1.0 - gamma) * smooth_relu(s - x, kappa);
        first += -gamma * smooth_relu_grad(x - s, kappa) + (1.0 - gamma) * smooth_relu_grad(s - x, kappa);
        second += smooth_relu_hess(x - s, kappa);
    }
    SmoothedValue { value, first, second }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessInfo {
    pub l: f64,
}

/// `L = nκ/4 + μ` for a loss over `n` scores.
pub fn smoothness(n: usize, params: &PinballParams) -> SmoothnessInfo {
    SmoothnessInfo {
        l: n as f64 * params.kappa / 4.0 + params.mu,
    }
}

/// One device's smoothed loss over its sorted scores.
///
/// Uses `σ(κ(s − x)) = 1 − σ(κ(x − s))` to write the derivative as
/// `(1−γ) n − Σ σ(κ(x_i − s)) + μ (s − s₀)`; only scores within `SATURATION / κ` of `s`
/// need an exponential.
#[derive(Debug, Clone)]
pub struct SmoothedLoss {
    sorted: Vec<f64>,
    params: PinballParams,
}

impl SmoothedLoss {
    pub fn new(scores: &[f64], params: PinballParams) -> Result<Self> {
        params.validate()?;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted, params })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn params(&self) -> &PinballParams {
        &self.params
    }

    pub fn value(&self, s: f64) -> f64 {
        smoothed_pinball(s, &self.sorted, &self.params).value
    }

    /// `(ρ̃'(s), ρ̃''(s))`.
    pub fn derivatives(&self, s: f64) -> (f64, f64) {
        let PinballParams {
            gamma, kappa, mu, s0, ..
        } = self.params;
        let n = self.sorted.len();
        let width = SATURATION / kappa;
        let lo = self.sorted.partition_point(|&x| x < s - width);
        let hi = self.sorted.partition_point(|&x| x <= s + width);
        let mut sig_sum = (n - hi) as f64;
        let mut second = mu;
        for &x in &self.sorted[lo..hi] {
            sig_sum += smooth_relu_grad(x - s, kappa);
            second += smooth_relu_hess(x - s, kappa);
        }
        ((1.0 - gamma) * n as f64 - sig_sum + mu * (s - s0), second)
    }

    /// Solves `ρ̃'(s) + slope·s + offset = 0` for `slope >= 0`, with residual at most
    /// `1e−10 (1 + n)`. Requires `μ + slope > 0`.
    pub fn solve_stationary(&self, slope: f64, offset: f64, guess: f64) -> Result<f64> {
        let PinballParams { gamma, mu, s0, .. } = self.params;
        let a = mu + slope;
        if !(a > 0.0) {
            return Err(invalid("mu", "strong convexity needs mu + slope > 0"));
        }
        let n = self.sorted.len() as f64;
        // Σσ ∈ [0, n] pins the root between the roots of two parallel lines.
        let base = mu * s0 - offset - (1.0 - gamma) * n;
        let bracket = (base / a, (base + n) / a);
        let tol = 1e-10 * (1.0 + n);
        solve_increasing(
            |s| {
                let (d1, d2) = self.derivatives(s);
                (d1 + slope * s + offset, d2 + slope)
            },
            bracket,
            guess,
            tol,
        )
    }

    /// Unique minimizer of the loss (requires `μ > 0`).
    pub fn minimizer(&self) -> Result<f64> {
        if !(self.params.mu > 0.0) {
            return Err(invalid("mu", "minimizer needs mu > 0 for uniqueness"));
        }
        let guess = self.sorted.get(self.sorted.len() / 2).copied().unwrap_or(self.params.s0);
        self.solve_stationary(0.0, 0.0, guess)
    }
}

/// Safeguarded Newton for an increasing function given a sign-changing bracket.
/// Falls back to bisection whenever a step leaves the bracket.
pub(crate) fn solve_increasing(
    f: impl Fn(f64) -> (f64, f64),
    (mut lo, mut hi): (f64, f64),
    guess: f64,
    tol: f64,
) -> Result<f64> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(DcpError::NoConvergence { node: None });
    }
    let mut x = if guess.is_finite() { guess.clamp(lo, hi) } else { 0.5 * (lo + hi) };
    for _ in 0..NEWTON_MAX_ITER {
        let (v, d) = f(x);
        if v.abs() <= tol {
            return Ok(x);
        }
        if v > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            // bracket exhausted at machine precision
            return Ok(x);
        }
        let step = x - v / d;
        x = if d > 0.0 && step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(DcpError::NoConvergence { node: None })
}

/// `ŝ*`: minimizer of the smoothed loss over `scores`.
pub fn centralized_smoothed_minimizer(scores: &[f64], params: &PinballParams) -> Result<f64> {
    if scores.is_empty() {
        return Err(DcpError::InvalidData("no scores".into()));
    }
    SmoothedLoss::new(scores, *params)?.minimizer()
}

/// `ε̃₀ = √(2 n log 2 / (μ κ) + ε₀²)`.
pub fn epsilon_tilde_0(n: usize, params: &PinballParams) -> Result<f64> {
    if !(params.mu > 0.0) {
        return Err(invalid("mu", "epsilon_tilde_0 needs mu > 0"));
    }
    if !(params.kappa > 0.0) {
        return Err(invalid("kappa", "epsilon_tilde_0 needs kappa > 0"));
    }
    Ok((2.0 * n as f64 * std::f64::consts::LN_2 / (params.mu * params.kappa)
        + params.epsilon0 * params.epsilon0)
        .sqrt())
}

/// Centralized FCP: pooled empirical quantile at level `(1−α)(1+K/n)`.
pub fn fcp_centralized_threshold(cal: &CalibrationData, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = cal.total();
    empirical_quantile(&cal.pooled(), conformal_level(alpha, cal.num_devices(), n))
}

/// Split CP on the pooled scores, rank `⌈(1−α)(n+1)⌉`.
pub fn split_cp_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    empirical_quantile(scores, conformal_level(alpha, 1, scores.len()))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid("alpha", format!("{alpha} not in [0, 1)")));
    }
    Ok(())
}
