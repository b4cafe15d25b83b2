//! Experiment orchestration: baselines, coverage and set-size estimation, communication
//! accounting, and seeded multi-trial sweeps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcpError, Result};
use crate::exec::ExecMode;
use crate::graph::{best_constant_consensus, build_topology, Topology, TopologyKind, TopologyParams};
use crate::hdcp::{epsilon_hdcp, hdcp_comm_bits, hdcp_prediction_set, run_hdcp_with, HdcpConfig};
use crate::qdcp::{
    average_local_quantiles, qdcp_comm_bits, qdcp_prediction_set, run_qdcp, target_quantile, AnchorMode, QdcpConfig,
};
use crate::consensus::Mixer;
use crate::quantile::{conformal_level, fcp_centralized_threshold, split_cp_threshold};
use crate::scores::{generate_synthetic, ingest_scores, CalibrationData, SyntheticConfig, TestInstance};
use crate::wire::FloatWidth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CentralizedCp,
    Fcp,
    Qdcp,
    Hdcp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::CentralizedCp => "centralized_cp",
            Method::Fcp => "fcp",
            Method::Qdcp => "qdcp",
            Method::Hdcp => "hdcp",
        }
    }

    pub fn is_decentralized(self) -> bool {
        matches!(self, Method::Qdcp | Method::Hdcp)
    }
}

/// `(coverage, mean normalized set size)` of the given sets.
pub fn evaluate_coverage(sets: &[Vec<usize>], tests: &[TestInstance]) -> Result<(f64, f64)> {
    if tests.is_empty() {
        return Err(DcpError::InvalidData("no test points to evaluate".into()));
    }
    if sets.len() != tests.len() {
        return Err(invalid("sets", format!("{} sets for {} tests", sets.len(), tests.len())));
    }
    let mut hits = 0usize;
    let mut size = 0.0;
    for (set, t) in sets.iter().zip(tests) {
        if set.contains(&t.true_label) {
            hits += 1;
        }
        size += set.len() as f64 / t.num_labels() as f64;
    }
    let m = tests.len() as f64;
    Ok((hits as f64 / m, size / m))
}

/// Bits each device sends: `T·f` for Q-DCP, `T·M·f` for H-DCP, zero for centralized methods.
pub fn comm_load(method: Method, t: usize, width: FloatWidth, levels: Option<usize>) -> Result<u64> {
    match method {
        Method::Qdcp => Ok(qdcp_comm_bits(t, width)),
        Method::Hdcp => {
            let m = levels.ok_or_else(|| invalid("M", "H-DCP load needs the number of levels"))?;
            Ok(hdcp_comm_bits(t, m, width))
        }
        Method::CentralizedCp | Method::Fcp => Ok(0),
    }
}

/// Smallest `T` at which `(1−α)(1+K/n) + ε^H-DCP ≤ 1`, i.e. the margin no longer
/// forces the full label set; `None` if that never happens within `max_t`.
pub fn min_nontrivial_t(sizes: &[usize], alpha: f64, levels: usize, eta: f64, rho: f64, max_t: usize) -> Option<usize> {
    let k = sizes.len();
    let n: usize = sizes.iter().sum();
    let base = conformal_level(alpha, k, n);
    if k == 1 {
        return (base <= 1.0).then_some(0);
    }
    (0..=max_t).find(|&t| base + epsilon_hdcp(k, levels, sizes, eta, rho, t) <= 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub coverage: f64,
    pub norm_set_size: f64,
    pub comm_bits: u64,
    /// One threshold per device (a single entry for centralized methods).
    pub thresholds: Vec<f64>,
}

impl MethodOutcome {
    pub fn threshold_mean(&self) -> f64 {
        self.thresholds.iter().sum::<f64>() / self.thresholds.len() as f64
    }
}

fn threshold_outcome(tests: &[TestInstance], threshold: f64) -> Result<MethodOutcome> {
    let sets: Vec<_> = tests.iter().map(|t| qdcp_prediction_set(t, threshold)).collect();
    let (coverage, norm_set_size) = evaluate_coverage(&sets, tests)?;
    Ok(MethodOutcome {
        coverage,
        norm_set_size,
        comm_bits: 0,
        thresholds: vec![threshold],
    })
}

/// Split CP and FCP on the pooled calibration scores, in that order.
pub fn run_centralized_baselines(
    cal: &CalibrationData,
    tests: &[TestInstance],
    alpha: f64,
) -> Result<[(Method, MethodOutcome); 2]> {
    let split = split_cp_threshold(&cal.pooled(), alpha)?;
    let fcp = fcp_centralized_threshold(cal, alpha)?;
    Ok([
        (Method::CentralizedCp, threshold_outcome(tests, split)?),
        (Method::Fcp, threshold_outcome(tests, fcp)?),
    ])
}

/// Q-DCP with each test point thresholded at its own device's estimate.
pub fn evaluate_qdcp(
    cal: &CalibrationData,
    tests: &[TestInstance],
    cfg: &QdcpConfig,
    topo: &Topology,
) -> Result<MethodOutcome> {
    let run = run_qdcp(cal, cfg, topo)?;
    let sets: Vec<_> = tests
        .iter()
        .map(|t| qdcp_prediction_set(t, run.per_device_thresholds[t.device_id]))
        .collect();
    let (coverage, norm_set_size) = evaluate_coverage(&sets, tests)?;
    Ok(MethodOutcome {
        coverage,
        norm_set_size,
        comm_bits: run.comm_bits,
        thresholds: run.per_device_thresholds,
    })
}

pub fn evaluate_hdcp(
    cal: &CalibrationData,
    tests: &[TestInstance],
    cfg: &HdcpConfig,
    topo: &Topology,
) -> Result<MethodOutcome> {
    let w = best_constant_consensus(topo)?;
    let run = run_hdcp_with(cal, cfg, &w, false)?;
    let sets: Vec<_> = tests
        .iter()
        .map(|t| hdcp_prediction_set(t, run.indices[t.device_id], cfg.m))
        .collect();
    let (coverage, norm_set_size) = evaluate_coverage(&sets, tests)?;
    Ok(MethodOutcome {
        coverage,
        norm_set_size,
        comm_bits: run.comm_bits,
        thresholds: run.thresholds,
    })
}

/// Replaces the anchor tolerance with `max(ε₀, |s₀ − s*|)` using the oracle `s*`, so
/// `|s₀ − s*| ≤ ε₀` holds on this data by construction. Pins `s₀` explicitly.
pub fn enforce_anchor(cal: &CalibrationData, cfg: &QdcpConfig, topo: &Topology) -> Result<QdcpConfig> {
    let s_star = target_quantile(cal, cfg.alpha)?;
    let s0 = match cfg.s0_mode {
        AnchorMode::Explicit => cfg.s0.ok_or_else(|| invalid("s0", "explicit anchor mode needs s0"))?,
        AnchorMode::AvgLocalQuantile => {
            let gamma = conformal_level(cfg.alpha, cal.num_devices(), cal.total());
            let mixer = Mixer::new(&best_constant_consensus(topo)?);
            average_local_quantiles(cal, gamma, &mixer)?.0
        }
    };
    if !s_star.is_finite() {
        return Ok(cfg.clone());
    }
    Ok(QdcpConfig {
        s0_mode: AnchorMode::Explicit,
        s0: Some(s0),
        epsilon0: cfg.epsilon0.max((s0 - s_star).abs()),
        ..cfg.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    /// Regenerated per trial with seed `base_seed + trial`; the config's own seed is ignored.
    Synthetic(SyntheticConfig),
    /// Fixed score files, reused by every trial.
    Files {
        calibration: PathBuf,
        test: PathBuf,
        #[serde(default)]
        clip: bool,
    },
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    #[serde(default = "default_topologies")]
    pub topologies: Vec<TopologyKind>,
    #[serde(default)]
    pub topology_params: TopologyParams,
    pub data: DataSource,
    pub alphas: Vec<f64>,
    /// Iteration grid for Q-DCP; defaults to `qdcp.T`.
    #[serde(default)]
    pub qdcp_t_grid: Option<Vec<usize>>,
    /// Iteration grid for H-DCP; defaults to `hdcp.T`.
    #[serde(default)]
    pub hdcp_t_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub m_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub kappa_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub mu_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon0_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub float_width_grid: Option<Vec<FloatWidth>>,
    #[serde(default)]
    pub qdcp: QdcpConfig,
    #[serde(default)]
    pub hdcp: HdcpConfig,
    /// Widen `ε₀` per trial so the anchor assumption holds (oracle check).
    #[serde(default)]
    pub enforce_anchor: bool,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_topologies() -> Vec<TopologyKind> {
    TopologyKind::NAMED.to_vec()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials", "need at least one trial"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "empty"));
        }
        if self.alphas.is_empty() {
            return Err(invalid("alphas", "empty"));
        }
        if self.methods.iter().any(|m| m.is_decentralized()) && self.topologies.is_empty() {
            return Err(invalid("topologies", "decentralized methods need at least one topology"));
        }
        let empty = |g: &Option<Vec<_>>| g.as_ref().is_some_and(Vec::is_empty);
        if empty(&self.qdcp_t_grid) || empty(&self.hdcp_t_grid) || empty(&self.m_grid) {
            return Err(invalid("grid", "grids must be nonempty when given"));
        }
        if self.kappa_grid.as_ref().is_some_and(Vec::is_empty)
            || self.mu_grid.as_ref().is_some_and(Vec::is_empty)
            || self.epsilon0_grid.as_ref().is_some_and(Vec::is_empty)
            || self.float_width_grid.as_ref().is_some_and(Vec::is_empty)
        {
            return Err(invalid("grid", "grids must be nonempty when given"));
        }
        Ok(())
    }

    /// Every configuration point, in output order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let widths_q = self.float_width_grid.clone().unwrap_or_else(|| vec![self.qdcp.float_width]);
        let widths_h = self.float_width_grid.clone().unwrap_or_else(|| vec![self.hdcp.float_width]);
        let mut out = Vec::new();
        for &method in &self.methods {
            let topologies: Vec<Option<TopologyKind>> = if method.is_decentralized() {
                self.topologies.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for &topology in &topologies {
                for &alpha in &self.alphas {
                    match method {
                        Method::CentralizedCp | Method::Fcp => out.push(SweepPoint::central(method, alpha)),
                        Method::Qdcp => {
                            let ts = self.qdcp_t_grid.clone().unwrap_or_else(|| vec![self.qdcp.t]);
                            let kappas = self.kappa_grid.clone().unwrap_or_else(|| vec![self.qdcp.kappa]);
                            let mus = self.mu_grid.clone().unwrap_or_else(|| vec![self.qdcp.mu]);
                            let eps = self.epsilon0_grid.clone().unwrap_or_else(|| vec![self.qdcp.epsilon0]);
                            for &t in &ts {
                                for &kappa in &kappas {
                                    for &mu in &mus {
                                        for &epsilon0 in &eps {
                                            for &f in &widths_q {
                                                out.push(SweepPoint {
                                                    method,
                                                    topology,
                                                    alpha,
                                                    t: Some(t),
                                                    m: None,
                                                    kappa: Some(kappa),
                                                    mu: Some(mu),
                                                    epsilon0: Some(epsilon0),
                                                    f: Some(f),
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        Method::Hdcp => {
                            let ts = self.hdcp_t_grid.clone().unwrap_or_else(|| vec![self.hdcp.t]);
                            let ms = self.m_grid.clone().unwrap_or_else(|| vec![self.hdcp.m]);
                            for &t in &ts {
                                for &m in &ms {
                                    for &f in &widths_h {
                                        out.push(SweepPoint {
                                            method,
                                            topology,
                                            alpha,
                                            t: Some(t),
                                            m: Some(m),
                                            kappa: None,
                                            mu: None,
                                            epsilon0: None,
                                            f: Some(f),
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One configuration in the sweep's cartesian product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub topology: Option<TopologyKind>,
    pub alpha: f64,
    pub t: Option<usize>,
    pub m: Option<usize>,
    pub kappa: Option<f64>,
    pub mu: Option<f64>,
    pub epsilon0: Option<f64>,
    pub f: Option<FloatWidth>,
}

impl SweepPoint {
    fn central(method: Method, alpha: f64) -> Self {
        Self {
            method,
            topology: None,
            alpha,
            t: None,
            m: None,
            kappa: None,
            mu: None,
            epsilon0: None,
            f: None,
        }
    }
}

/// One CSV row: a configuration point evaluated on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub topology: Option<TopologyKind>,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub kappa: Option<f64>,
    pub mu: Option<f64>,
    pub epsilon0: Option<f64>,
    pub f: Option<u32>,
    pub trial: usize,
    pub coverage: Option<f64>,
    pub norm_set_size: Option<f64>,
    pub comm_bits: Option<u64>,
    pub threshold_mean: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub thresholds: Vec<f64>,
}

pub const RESULT_HEADER: &str =
    "method,topology,K,alpha,T,M,kappa,mu,epsilon0,f,trial,coverage,norm_set_size,comm_bits,threshold_mean,error";

fn load_trial_data(cfg: &ExperimentConfig, trial: usize) -> Result<(CalibrationData, Vec<TestInstance>)> {
    match &cfg.data {
        DataSource::Synthetic(syn) => generate_synthetic(&SyntheticConfig {
            seed: cfg.base_seed + trial as u64,
            ..syn.clone()
        }),
        DataSource::Files { calibration, test, clip } => ingest_scores(calibration, test, *clip),
    }
}

fn evaluate_point(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    cal: &CalibrationData,
    tests: &[TestInstance],
    topo: Option<&Topology>,
) -> Result<MethodOutcome> {
    match point.method {
        Method::CentralizedCp | Method::Fcp => {
            let [split, fcp] = run_centralized_baselines(cal, tests, point.alpha)?;
            Ok(if point.method == Method::Fcp { fcp.1 } else { split.1 })
        }
        Method::Qdcp => {
            let topo = topo.expect("decentralized point has a topology");
            let mut qcfg = QdcpConfig {
                alpha: point.alpha,
                t: point.t.unwrap_or(cfg.qdcp.t),
                kappa: point.kappa.unwrap_or(cfg.qdcp.kappa),
                mu: point.mu.unwrap_or(cfg.qdcp.mu),
                epsilon0: point.epsilon0.unwrap_or(cfg.qdcp.epsilon0),
                float_width: point.f.unwrap_or(cfg.qdcp.float_width),
                ..cfg.qdcp.clone()
            };
            if cfg.enforce_anchor {
                qcfg = enforce_anchor(cal, &qcfg, topo)?;
            }
            evaluate_qdcp(cal, tests, &qcfg, topo)
        }
        Method::Hdcp => {
            let topo = topo.expect("decentralized point has a topology");
            let hcfg = HdcpConfig {
                alpha: point.alpha,
                t: point.t.unwrap_or(cfg.hdcp.t),
                m: point.m.unwrap_or(cfg.hdcp.m),
                float_width: point.f.unwrap_or(cfg.hdcp.float_width),
                ..cfg.hdcp.clone()
            };
            evaluate_hdcp(cal, tests, &hcfg, topo)
        }
    }
}

fn run_trial(cfg: &ExperimentConfig, points: &[SweepPoint], trial: usize) -> Vec<ResultRow> {
    let data = load_trial_data(cfg, trial);
    let mut topologies: HashMap<TopologyKind, Result<Topology>> = HashMap::new();
    let k = data.as_ref().map_or(0, |(cal, _)| cal.num_devices());
    points
        .iter()
        .map(|point| {
            let outcome = data.as_ref().map_err(clone_err).and_then(|(cal, tests)| {
                let topo = match point.topology {
                    Some(kind) => {
                        let entry = topologies.entry(kind).or_insert_with(|| {
                            let params = TopologyParams {
                                seed: cfg.topology_params.seed.or(Some(cfg.base_seed + trial as u64)),
                                ..cfg.topology_params.clone()
                            };
                            if cal.num_devices() == 1 {
                                Ok(Topology::singleton())
                            } else {
                                build_topology(kind, cal.num_devices(), &params)
                            }
                        });
                        Some(entry.as_ref().map_err(clone_err)?.clone())
                    }
                    None => None,
                };
                evaluate_point(cfg, point, cal, tests, topo.as_ref())
            });
            let mut row = ResultRow {
                method: point.method,
                topology: point.topology,
                k,
                alpha: point.alpha,
                t: point.t,
                m: point.m,
                kappa: point.kappa,
                mu: point.mu,
                epsilon0: point.epsilon0,
                f: point.f.map(u32::from),
                trial,
                coverage: None,
                norm_set_size: None,
                comm_bits: None,
                threshold_mean: None,
                error: None,
                thresholds: Vec::new(),
            };
            match outcome {
                Ok(o) => {
                    row.coverage = Some(o.coverage);
                    row.norm_set_size = Some(o.norm_set_size);
                    row.comm_bits = Some(o.comm_bits);
                    row.threshold_mean = Some(o.threshold_mean());
                    row.thresholds = o.thresholds;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

fn clone_err(e: &DcpError) -> DcpError {
    DcpError::InvalidData(e.to_string())
}

/// Evaluates every configuration point on every trial. Rows are ordered by point,
/// then trial, regardless of execution mode. Failures are recorded per row.
pub fn run_sweep(cfg: &ExperimentConfig, mode: ExecMode) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let points = cfg.points();
    let trials: Vec<usize> = (0..cfg.trials).collect();
    let per_trial = mode.map(&trials, |&trial| run_trial(cfg, &points, trial));
    let mut rows = Vec::with_capacity(points.len() * cfg.trials);
    for p in 0..points.len() {
        for trial_rows in &per_trial {
            rows.push(trial_rows[p].clone());
        }
    }
    Ok(rows)
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULT_HEADER.split(','))?;
    }
    w.flush().map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub p2_5: f64,
    pub p97_5: f64,
}

impl Spread {
    /// Mean, sample standard deviation and the empirical 2.5/97.5 percentiles.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean,
            std: var.sqrt(),
            p2_5: percentile(&sorted, 0.025),
            p97_5: percentile(&sorted, 0.975),
        })
    }
}

/// Linear interpolation between closest ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    #[serde(flatten)]
    pub point: SweepPoint,
    pub trials: usize,
    pub failures: usize,
    pub coverage: Option<Spread>,
    pub norm_set_size: Option<Spread>,
    pub comm_bits: Option<u64>,
}

/// Aggregates rows per configuration point (rows must come from `run_sweep`).
pub fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<PointSummary> {
    cfg.points()
        .into_iter()
        .zip(rows.chunks(cfg.trials))
        .map(|(point, chunk)| {
            let ok: Vec<&ResultRow> = chunk.iter().filter(|r| r.error.is_none()).collect();
            let cov: Vec<f64> = ok.iter().filter_map(|r| r.coverage).collect();
            let size: Vec<f64> = ok.iter().filter_map(|r| r.norm_set_size).collect();
            PointSummary {
                point,
                trials: chunk.len(),
                failures: chunk.len() - ok.len(),
                coverage: Spread::of(&cov),
                norm_set_size: Spread::of(&size),
                comm_bits: ok.first().and_then(|r| r.comm_bits),
            }
        })
        .collect()
}
