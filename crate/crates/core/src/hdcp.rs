//! Histogram-based decentralized conformal prediction.
//!
//! Each device quantizes its scores to `M` levels, and the devices run linear consensus
//! on the scaled histograms `x_k⁽⁰⁾ = (K n_k / n) p_k` until every row approximates the
//! pooled histogram `p`. A device then picks the smallest level whose prefix mass
//! clears the conformal level plus `ε^H-DCP`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::{check_eta, Mixer};
use crate::error::{invalid, DcpError, Result};
use crate::graph::{best_constant_consensus, ConsensusMatrix, Topology};
use crate::quantile::{check_alpha, conformal_level, RANK_SLACK};
use crate::scores::{local_histogram, quantize_index_unchecked, CalibrationData, TestInstance};
use crate::wire::FloatWidth;

fn default_m() -> usize {
    1000
}
fn default_eta() -> f64 {
    1.0
}
fn default_t() -> usize {
    150
}
fn default_alpha() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdcpConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(rename = "T", default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub float_width: FloatWidth,
}

impl Default for HdcpConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            m: default_m(),
            eta: default_eta(),
            t: default_t(),
            float_width: FloatWidth::default(),
        }
    }
}

impl HdcpConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.m == 0 {
            return Err(invalid("M", "need at least one quantization level"));
        }
        check_eta(self.eta)
    }
}

/// `K × M` matrix of per-device histogram estimates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramState {
    x: Vec<f64>,
    num_nodes: usize,
    levels: usize,
}

impl HistogramState {
    /// `x_k⁽⁰⁾ = (K n_k / n) p_k`.
    pub fn initial(cal: &CalibrationData, levels: usize) -> Result<Self> {
        let k = cal.num_devices();
        let n = cal.total() as f64;
        let mut x = Vec::with_capacity(k * levels);
        for scores in cal.devices() {
            let scale = k as f64 * scores.len() as f64 / n;
            x.extend(local_histogram(scores, levels)?.into_iter().map(|p| scale * p));
        }
        Ok(Self {
            x,
            num_nodes: k,
            levels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let levels = rows.first().map_or(0, Vec::len);
        if levels == 0 || rows.iter().any(|r| r.len() != levels) {
            return Err(invalid("x", "rows must be nonempty and of equal length"));
        }
        Ok(Self {
            x: rows.concat(),
            num_nodes: rows.len(),
            levels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.x[k * self.levels..(k + 1) * self.levels]
    }

    /// `(1/K) Σ_k x_k`, which consensus leaves unchanged.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.levels];
        for k in 0..self.num_nodes {
            for (m, v) in mean.iter_mut().zip(self.row(k)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.num_nodes as f64);
        mean
    }

    /// `Σ_k ‖x_k − p‖²`.
    pub fn squared_error(&self, p: &[f64]) -> f64 {
        (0..self.num_nodes)
            .map(|k| self.row(k).iter().zip(p).map(|(x, q)| (x - q).powi(2)).sum::<f64>())
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn consensus_step(&self, mixer: &Mixer, eta: f64, width: FloatWidth) -> Self {
        let mut out = Vec::with_capacity(self.x.len());
        mixer.step(&self.x, self.levels, eta, width, &mut out);
        Self { x: out, ..*self }
    }
}

/// First round `t` at which `Σ_k ‖x_k^(t) − p‖² ≤ (1−ηρ)^{2t} Σ_k ‖x_k⁽⁰⁾ − p‖²` fails.
///
/// Errors are compared as norms with a round-off allowance of `8 (t+1) ε_mach ‖x⁽⁰⁾‖_F`:
/// each synchronous round perturbs the iterate by a few ulps, and on graphs where the
/// bound is attained with equality (the star) nothing tighter is meaningful.
pub fn consensus_decay_violation(trace: &[f64], contraction: f64, initial_norm: f64) -> Option<usize> {
    let e0 = trace.first()?.sqrt();
    trace.iter().enumerate().position(|(t, e)| {
        let allowance = 8.0 * (t + 1) as f64 * f64::EPSILON * initial_norm;
        e.sqrt() > contraction.powi(t as i32) * e0 + allowance
    })
}

/// `ε^H-DCP = K √(2KM) (1 − ηρ)^T / n · √(max_k n_k² + (1/K) Σ_j n_j²)`.
pub fn epsilon_hdcp(num_nodes: usize, levels: usize, sizes: &[usize], eta: f64, rho: f64, t: usize) -> f64 {
    let k = num_nodes as f64;
    let n: usize = sizes.iter().sum();
    let max_sq = sizes.iter().map(|&s| (s * s) as f64).fold(0.0, f64::max);
    let mean_sq = sizes.iter().map(|&s| (s * s) as f64).sum::<f64>() / k;
    let decay = (1.0 - eta * rho).max(0.0).powi(t.min(i32::MAX as usize) as i32);
    k * (2.0 * k * levels as f64).sqrt() * decay / n as f64 * (max_sq + mean_sq).sqrt()
}

/// Smallest level `m ∈ 1..=M` whose prefix mass reaches `(1−α)(1+K/n) + eps`.
/// Returns `M` if the target exceeds 1 or is never reached.
pub fn select_quantile_index(x: &[f64], alpha: f64, num_nodes: usize, n: usize, eps: f64) -> usize {
    let levels = x.len();
    let target = conformal_level(alpha, num_nodes, n) + eps;
    // same rounding allowance as the order-statistic rank, expressed in mass units
    let need = target - RANK_SLACK * target.max(1.0 / n as f64);
    if need > 1.0 {
        return levels;
    }
    let mut prefix = 0.0;
    for (i, v) in x.iter().enumerate() {
        prefix += v;
        if prefix >= need {
            return i + 1;
        }
    }
    levels
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HdcpRun {
    pub indices: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub eps_hdcp: f64,
    pub rho: f64,
    pub comm_bits: u64,
    /// `Σ_k ‖x_k^(t) − p‖²` for `t = 0..=T`, when requested.
    pub decay_trace: Option<Vec<f64>>,
}

impl HdcpRun {
    pub fn threshold_mean(&self) -> f64 {
        self.thresholds.iter().sum::<f64>() / self.thresholds.len() as f64
    }
}

pub fn hdcp_comm_bits(t: usize, levels: usize, width: FloatWidth) -> u64 {
    (t * levels) as u64 * width.bits()
}

pub fn run_hdcp(cal: &CalibrationData, cfg: &HdcpConfig, topo: &Topology) -> Result<HdcpRun> {
    let w = best_constant_consensus(topo)?;
    run_hdcp_with(cal, cfg, &w, false)
}

/// Runs H-DCP with a caller-supplied consensus matrix, optionally recording the
/// consensus error after every round.
pub fn run_hdcp_with(cal: &CalibrationData, cfg: &HdcpConfig, w: &ConsensusMatrix, trace: bool) -> Result<HdcpRun> {
    cfg.validate()?;
    let k = cal.num_devices();
    if w.num_nodes() != k {
        return Err(invalid("W", format!("{} nodes but {k} devices", w.num_nodes())));
    }
    let n = cal.total();
    let sizes = cal.sizes();
    let mut state = HistogramState::initial(cal, cfg.m)?;
    let p = state.column_means();
    let mut decay = trace.then(|| vec![state.squared_error(&p)]);

    let eps = if k == 1 {
        0.0
    } else {
        let mixer = Mixer::new(w);
        for _ in 0..cfg.t {
            state = state.consensus_step(&mixer, cfg.eta, cfg.float_width);
            if let Some(d) = decay.as_mut() {
                d.push(state.squared_error(&p));
            }
        }
        epsilon_hdcp(k, cfg.m, &sizes, cfg.eta, w.spectral_gap, cfg.t)
    };

    let indices: Vec<usize> = (0..k)
        .map(|d| select_quantile_index(state.row(d), cfg.alpha, k, n, eps))
        .collect();
    let thresholds = indices.iter().map(|&m| m as f64 / cfg.m as f64).collect();
    Ok(HdcpRun {
        indices,
        thresholds,
        eps_hdcp: eps,
        rho: w.spectral_gap,
        comm_bits: hdcp_comm_bits(cfg.t, cfg.m, cfg.float_width),
        decay_trace: decay,
    })
}

/// `{y : Γ(s(X, y)) ≤ m_k / M}`.
pub fn hdcp_prediction_set(test: &TestInstance, m_k: usize, levels: usize) -> Vec<usize> {
    test.candidate_scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| quantize_index_unchecked(s, levels) <= m_k)
        .map(|(y, _)| y)
        .collect()
}

/// Index the centralized FCP quantile lands on after quantization.
pub fn centralized_quantized_index(cal: &CalibrationData, alpha: f64, levels: usize) -> Result<usize> {
    let pooled = CalibrationData::new(vec![cal.pooled()])?;
    let p = local_histogram(&pooled.pooled(), levels)?;
    Ok(select_quantile_index(&p, alpha, cal.num_devices(), cal.total(), 0.0))
}

pub fn write_hdcp_csv(path: &Path, run: &HdcpRun) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["device_id", "m_alpha_k", "threshold", "eps_hdcp"])?;
    for (k, (m, t)) in run.indices.iter().zip(&run.thresholds).enumerate() {
        w.write_record([k.to_string(), m.to_string(), t.to_string(), run.eps_hdcp.to_string()])?;
    }
    w.flush().map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })
}
