//! Quantile-based decentralized conformal prediction.
//!
//! Devices jointly minimize the smoothed, regularized pinball loss with decentralized
//! ADMM over the constraint `A s + B z = 0` (one auxiliary `z_q` per edge,
//! `B = [−I; −I]`), then average their local estimates and widen the result by
//! `ε^(T) + ε̃₀` before thresholding scores.
//!
//! Only the per-node estimates `s_k` cross the wire; each node derives the edge
//! variables `z_q`, `λ_q` of its incident edges from its own and its neighbors'
//! broadcasts.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::{average_to_tolerance, Mixer};
use crate::error::{invalid, DcpError, Result};
use crate::graph::{best_constant_consensus, laplacian, SpectralSummary, Topology};
use crate::linalg::{norm2, solve_spd, Matrix};
use crate::quantile::{
    check_alpha, conformal_level, empirical_quantile, epsilon_tilde_0, quantile_rank, smoothness,
    PinballParams, SmoothedLoss,
};
use crate::scores::{CalibrationData, TestInstance};
use crate::wire::FloatWidth;

pub const DEFAULT_B_GRID: [f64; 5] = [1.1, 1.5, 2.0, 4.0, 8.0];

/// Spread tolerance for the distributed averaging passes.
pub const AVERAGING_TOL: f64 = 1e-9;
const AVERAGING_MAX_ROUNDS: usize = 1_000_000;

const REFERENCE_MAX_ITER: usize = 100_000;
const REFERENCE_RESIDUAL_TOL: f64 = 1e-10;
const REFERENCE_STEP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Average of the per-device local quantiles, agreed on by one averaging pass.
    #[default]
    AvgLocalQuantile,
    /// Use the configured `s0`.
    Explicit,
}

/// Where `‖u⁽⁰⁾ − u*‖_G` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum UStarSource {
    /// Simulator-global KKT solve for the optimal `(z*, λ̃*)`.
    #[default]
    Oracle,
    /// Run ADMM to convergence and take its limit as `u*`.
    ReferenceRun,
    /// Deployment mode: a user-supplied upper bound on `‖u⁽⁰⁾ − u*‖_G`.
    Bound(f64),
}

fn default_kappa() -> f64 {
    2000.0
}
fn default_mu() -> f64 {
    2000.0
}
fn default_epsilon0() -> f64 {
    0.1
}
fn default_t() -> usize {
    1500
}
fn default_alpha() -> f64 {
    0.1
}
fn default_b_grid() -> Vec<f64> {
    DEFAULT_B_GRID.to_vec()
}
fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdcpConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(rename = "T", default = "default_t")]
    pub t: usize,
    /// ADMM penalty; `None` picks the value maximizing `δ`.
    #[serde(default)]
    pub c: Option<f64>,
    /// Fixed bound parameter; `None` maximizes `δ` over `b_grid`.
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default = "default_b_grid")]
    pub b_grid: Vec<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub s0_mode: AnchorMode,
    #[serde(default)]
    pub s0: Option<f64>,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default)]
    pub float_width: FloatWidth,
    #[serde(default)]
    pub u_star: UStarSource,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for QdcpConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            t: default_t(),
            c: None,
            b: None,
            b_grid: default_b_grid(),
            kappa: default_kappa(),
            mu: default_mu(),
            s0_mode: AnchorMode::default(),
            s0: None,
            epsilon0: default_epsilon0(),
            float_width: FloatWidth::default(),
            u_star: UStarSource::default(),
            log_every: default_log_every(),
        }
    }
}

impl QdcpConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.t < 1 {
            return Err(invalid("T", "need at least one iteration"));
        }
        if let Some(c) = self.c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("c", format!("{c} must be positive")));
            }
        }
        if let Some(b) = self.b {
            if !(b > 1.0) {
                return Err(invalid("b", format!("{b} must exceed 1")));
            }
        } else if self.b_grid.is_empty() || self.b_grid.iter().any(|&b| !(b > 1.0)) {
            return Err(invalid("b_grid", "needs values above 1"));
        }
        if !(self.mu > 0.0) {
            return Err(invalid("mu", "must be positive"));
        }
        if !(self.kappa > 0.0) {
            return Err(invalid("kappa", "must be positive"));
        }
        if !(self.epsilon0 >= 0.0) {
            return Err(invalid("epsilon0", "must be nonnegative"));
        }
        if self.s0_mode == AnchorMode::Explicit && self.s0.is_none_or(|s| !s.is_finite()) {
            return Err(invalid("s0", "explicit anchor mode needs a finite s0"));
        }
        if let UStarSource::Bound(b) = self.u_star {
            if !(b >= 0.0) {
                return Err(invalid("u_star", "bound must be nonnegative"));
            }
        }
        if self.log_every == 0 {
            return Err(invalid("log_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Whether a node is the tail (`i`, block `A₁`) or head (`j`, block `A₂`) of edge `q = (i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeEnd {
    Tail,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IncidentEdge {
    pub edge: usize,
    pub end: EdgeEnd,
}

/// Read access to per-edge ADMM variables.
pub trait EdgeVariables {
    fn z(&self, q: usize) -> f64;
    /// `λ⁽¹⁾_q`, multiplier of the tail constraint `s_i = z_q`.
    fn lambda_tail(&self, q: usize) -> f64;
    /// `λ⁽²⁾_q`, multiplier of the head constraint `s_j = z_q`.
    fn lambda_head(&self, q: usize) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct QdcpState {
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub lambda_tail: Vec<f64>,
    pub lambda_head: Vec<f64>,
    pub t: usize,
}

impl QdcpState {
    pub fn zeros(num_nodes: usize, num_edges: usize) -> Self {
        Self {
            s: vec![0.0; num_nodes],
            z: vec![0.0; num_edges],
            lambda_tail: vec![0.0; num_edges],
            lambda_head: vec![0.0; num_edges],
            t: 0,
        }
    }

    /// `λ̃`: the first `E` entries of `λ`.
    pub fn lambda_tilde(&self) -> &[f64] {
        &self.lambda_tail
    }
}

impl EdgeVariables for QdcpState {
    fn z(&self, q: usize) -> f64 {
        self.z[q]
    }
    fn lambda_tail(&self, q: usize) -> f64 {
        self.lambda_tail[q]
    }
    fn lambda_head(&self, q: usize) -> f64 {
        self.lambda_head[q]
    }
}

/// `‖u‖_G = √(c ‖z‖² + ‖λ̃‖² / c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GNorm {
    pub c: f64,
}

impl GNorm {
    pub fn norm(&self, z: &[f64], lambda_tilde: &[f64]) -> f64 {
        let zz: f64 = z.iter().map(|x| x * x).sum();
        let ll: f64 = lambda_tilde.iter().map(|x| x * x).sum();
        (self.c * zz + ll / self.c).sqrt()
    }

    pub fn distance(&self, a: (&[f64], &[f64]), b: (&[f64], &[f64])) -> f64 {
        let dz: Vec<f64> = a.0.iter().zip(b.0).map(|(x, y)| x - y).collect();
        let dl: Vec<f64> = a.1.iter().zip(b.1).map(|(x, y)| x - y).collect();
        self.norm(&dz, &dl)
    }
}

/// Static ADMM problem data: graph structure, local losses and the penalty `c`.
#[derive(Debug, Clone)]
pub struct AdmmNetwork {
    edges: Vec<(usize, usize)>,
    incident: Vec<Vec<IncidentEdge>>,
    losses: Vec<SmoothedLoss>,
    c: f64,
    width: FloatWidth,
}

impl AdmmNetwork {
    pub fn new(topo: &Topology, cal: &CalibrationData, params: PinballParams, c: f64, width: FloatWidth) -> Result<Self> {
        if topo.num_nodes() != cal.num_devices() {
            return Err(invalid(
                "topology",
                format!("{} nodes but {} devices", topo.num_nodes(), cal.num_devices()),
            ));
        }
        if !(c > 0.0) {
            return Err(invalid("c", "must be positive"));
        }
        let mut incident = vec![Vec::new(); topo.num_nodes()];
        for (q, &(i, j)) in topo.edges().iter().enumerate() {
            incident[i].push(IncidentEdge { edge: q, end: EdgeEnd::Tail });
            incident[j].push(IncidentEdge { edge: q, end: EdgeEnd::Head });
        }
        let losses = cal
            .devices()
            .iter()
            .map(|scores| SmoothedLoss::new(scores, params))
            .collect::<Result<_>>()?;
        Ok(Self {
            edges: topo.edges().to_vec(),
            incident,
            losses,
            c,
            width,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.losses.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn loss(&self, k: usize) -> &SmoothedLoss {
        &self.losses[k]
    }

    pub fn incident(&self, k: usize) -> &[IncidentEdge] {
        &self.incident[k]
    }

    pub fn initial_state(&self) -> QdcpState {
        QdcpState::zeros(self.num_nodes(), self.num_edges())
    }

    /// What neighbors receive: every `s_k` rounded to the wire width.
    fn published(&self, s: &[f64]) -> Vec<f64> {
        s.iter().map(|&x| self.width.round(x)).collect()
    }

    /// `‖A s + B z‖` with the published `s`.
    pub fn primal_residual(&self, state: &QdcpState) -> f64 {
        let s = self.published(&state.s);
        let mut sum = 0.0;
        for (q, &(i, j)) in self.edges.iter().enumerate() {
            sum += (s[i] - state.z[q]).powi(2) + (s[j] - state.z[q]).powi(2);
        }
        sum.sqrt()
    }

    /// Stationarity residual of the full s-subproblem,
    /// `∇f̃(s) + Aᵀλ + c Aᵀ(A s + B z)`, at the given `s`.
    pub fn s_stationarity_residual(&self, s: &[f64], state: &QdcpState) -> f64 {
        let res: Vec<f64> = (0..self.num_nodes())
            .map(|k| {
                let (grad, _) = self.losses[k].derivatives(s[k]);
                let (slope, offset) = node_linear_terms(&self.incident[k], self.c, state);
                grad + slope * s[k] + offset
            })
            .collect();
        norm2(&res)
    }
}

/// Coefficients of the linear part of node `k`'s stationarity condition:
/// `c·d_k·s_k + Σ_tail λ⁽¹⁾ + Σ_head λ⁽²⁾ − c Σ z`.
fn node_linear_terms(incident: &[IncidentEdge], c: f64, edges: &impl EdgeVariables) -> (f64, f64) {
    let mut offset = 0.0;
    for e in incident {
        offset += match e.end {
            EdgeEnd::Tail => edges.lambda_tail(e.edge),
            EdgeEnd::Head => edges.lambda_head(e.edge),
        };
        offset -= c * edges.z(e.edge);
    }
    (c * incident.len() as f64, offset)
}

/// Node `k`'s share of the s-update. Sees only its own loss and its incident edges.
pub fn node_s_update(
    loss: &SmoothedLoss,
    incident: &[IncidentEdge],
    c: f64,
    edges: &impl EdgeVariables,
    guess: f64,
) -> Result<f64> {
    let (slope, offset) = node_linear_terms(incident, c, edges);
    loss.solve_stationary(slope, offset, guess)
}

/// Solves `∇f̃(s) + Aᵀλ + cAᵀ(As + Bz) = 0`; since `AᵀA = diag(deg)` this splits
/// into one scalar root-find per node.
pub fn s_update(state: &QdcpState, net: &AdmmNetwork) -> Result<Vec<f64>> {
    (0..net.num_nodes())
        .map(|k| {
            node_s_update(&net.losses[k], &net.incident[k], net.c, state, state.s[k])
                .map_err(|_| DcpError::NoConvergence { node: Some(k) })
        })
        .collect()
}

/// `z = −(c BᵀB)⁻¹ Bᵀ(c A s + λ)`, i.e. `z_q = (c(s_i + s_j) + λ⁽¹⁾_q + λ⁽²⁾_q) / 2c`.
pub fn z_update(state: &QdcpState, net: &AdmmNetwork, published_s: &[f64]) -> Vec<f64> {
    let c = net.c;
    net.edges
        .iter()
        .enumerate()
        .map(|(q, &(i, j))| {
            (c * (published_s[i] + published_s[j]) + state.lambda_tail[q] + state.lambda_head[q]) / (2.0 * c)
        })
        .collect()
}

/// `λ ← λ + c(A s + B z)`.
pub fn lambda_update(state: &QdcpState, net: &AdmmNetwork, published_s: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = net.c;
    let mut tail = state.lambda_tail.clone();
    let mut head = state.lambda_head.clone();
    for (q, &(i, j)) in net.edges.iter().enumerate() {
        tail[q] += c * (published_s[i] - z[q]);
        head[q] += c * (published_s[j] - z[q]);
    }
    (tail, head)
}

/// One full ADMM iteration.
pub fn admm_iteration(state: &mut QdcpState, net: &AdmmNetwork) -> Result<()> {
    let s = s_update(state, net)?;
    let published = net.published(&s);
    state.s = s;
    let z = z_update(state, net, &published);
    let (tail, head) = lambda_update(state, net, &published, &z);
    state.z = z;
    state.lambda_tail = tail;
    state.lambda_head = head;
    state.t += 1;
    Ok(())
}

/// `δ(b, c)`: the linear rate parameter.
pub fn compute_delta(spectrum: &SpectralSummary, c: f64, b: f64, l: f64, mu: f64) -> f64 {
    let smax2 = spectrum.sigma_max_mplus.powi(2);
    let smin2 = spectrum.sigma_min_mminus.powi(2);
    let first = (b - 1.0) * smin2 / (b * smax2);
    let second = mu / ((c / 4.0) * smax2 + (b / c) * l * l / smin2);
    first.min(second)
}

/// Penalty minimizing the second term's denominator for a given `b`:
/// `c = 2 L √b / (σ_max(M₊) σ_min(M₋))`.
pub fn tuned_penalty(spectrum: &SpectralSummary, b: f64, l: f64) -> f64 {
    2.0 * l * b.sqrt() / (spectrum.sigma_max_mplus * spectrum.sigma_min_mminus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaChoice {
    pub delta: f64,
    pub b: f64,
    pub c: f64,
}

/// Picks `(b, c)` maximizing `δ`: a fixed `b` or the best over `b_grid`, and a fixed `c`
/// or the tuned penalty for each candidate `b`.
pub fn choose_delta(spectrum: &SpectralSummary, cfg: &QdcpConfig, l: f64) -> DeltaChoice {
    let candidates: Vec<f64> = match cfg.b {
        Some(b) => vec![b],
        None => cfg.b_grid.clone(),
    };
    candidates
        .into_iter()
        .map(|b| {
            let c = cfg.c.unwrap_or_else(|| tuned_penalty(spectrum, b, l));
            DeltaChoice {
                delta: compute_delta(spectrum, c, b, l, cfg.mu),
                b,
                c,
            }
        })
        .fold(None, |best: Option<DeltaChoice>, cand| match best {
            Some(b) if b.delta >= cand.delta => Some(b),
            _ => Some(cand),
        })
        .expect("at least one b candidate")
}

/// `ε^(T) = √((1/(Kμ)) (1/(1+δ))^{T−1}) · ‖u⁽⁰⁾ − u*‖_G`.
pub fn epsilon_t(delta: f64, u_distance: f64, num_nodes: usize, mu: f64, t: usize) -> Result<f64> {
    if t < 1 {
        return Err(invalid("T", "epsilon_T needs T >= 1"));
    }
    if !(mu > 0.0) {
        return Err(invalid("mu", "must be positive"));
    }
    if u_distance == 0.0 {
        return Ok(0.0);
    }
    let decay = (-((t - 1) as f64) * delta.ln_1p()).exp();
    Ok((decay / (num_nodes as f64 * mu)).sqrt() * u_distance)
}

/// Optimal ADMM point `(z*, λ̃*)` with the consensus solution `ŝ*`.
#[derive(Debug, Clone, PartialEq)]
pub struct UStar {
    pub z: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    pub s_hat: f64,
}

/// Minimizer of `Σ_k ρ̃_k(s)`: one smoothed loss over all scores with `K μ` regularization.
pub fn consensus_minimizer(cal: &CalibrationData, params: &PinballParams) -> Result<f64> {
    let pooled = PinballParams {
        mu: params.mu * cal.num_devices() as f64,
        ..*params
    };
    SmoothedLoss::new(&cal.pooled(), pooled)?.minimizer()
}

/// `u*` from the KKT conditions: `z* = ŝ* 𝟙`, and `λ̃*` the minimum-norm solution of
/// `M₋ λ̃ = −∇f̃(ŝ* 𝟙)`, which is the limit ADMM reaches from `λ⁽⁰⁾ = 0`.
pub fn kkt_u_star(net: &AdmmNetwork, topo: &Topology, cal: &CalibrationData) -> Result<UStar> {
    let params = *net.losses[0].params();
    let s_hat = consensus_minimizer(cal, &params)?;
    let k = net.num_nodes();
    let mut grad: Vec<f64> = net.losses.iter().map(|l| l.derivatives(s_hat).0).collect();
    let mean = grad.iter().sum::<f64>() / k as f64;
    grad.iter_mut().for_each(|g| *g -= mean);
    // (L + 𝟙𝟙ᵀ/K) y = −g has the solution y ⊥ 𝟙 with L y = −g; then λ̃ = M₋ᵀ y
    let mut shifted = laplacian(topo);
    for i in 0..k {
        for j in 0..k {
            shifted[(i, j)] += 1.0 / k as f64;
        }
    }
    let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
    let y = solve_spd(&shifted, &rhs)?;
    let lambda_tilde = net.edges.iter().map(|&(i, j)| y[i] - y[j]).collect();
    Ok(UStar {
        z: vec![s_hat; net.num_edges()],
        lambda_tilde,
        s_hat,
    })
}

/// Runs the ADMM loop at full precision until the primal residual and the step size
/// both vanish, and returns the limit as `u*`. Oracle-only: needs every node's state.
pub fn compute_u_star_reference(net: &AdmmNetwork) -> Result<UStar> {
    let exact = AdmmNetwork {
        width: FloatWidth::F64,
        ..net.clone()
    };
    let mut state = exact.initial_state();
    for _ in 0..REFERENCE_MAX_ITER {
        let prev = state.s.clone();
        admm_iteration(&mut state, &exact)?;
        let step = state
            .s
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        if step <= REFERENCE_STEP_TOL && exact.primal_residual(&state) <= REFERENCE_RESIDUAL_TOL {
            let s_hat = state.s.iter().sum::<f64>() / state.s.len() as f64;
            return Ok(UStar {
                z: state.z,
                lambda_tilde: state.lambda_tail,
                s_hat,
            });
        }
    }
    Err(DcpError::ReferenceNotConverged {
        iterations: REFERENCE_MAX_ITER,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub s_bar: f64,
    pub primal_residual: f64,
    pub eps_t: f64,
    /// `‖u^(t) − u*‖_G`, when `u*` is known.
    pub u_error_g: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QdcpBounds {
    pub delta: f64,
    pub b: f64,
    pub c: f64,
    pub smoothness_l: f64,
    pub eps_t: f64,
    pub eps_tilde_0: f64,
    /// `‖u⁽⁰⁾ − u*‖_G` (or the supplied bound).
    pub u_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QdcpRun {
    /// `s^Q-DCP = s̄^(T) + ε^(T) + ε̃₀`; `+∞` when the conformal rank exceeds `n`.
    pub threshold: f64,
    pub per_device_thresholds: Vec<f64>,
    pub s_bar: f64,
    /// Consensus optimum `ŝ*`, when `u*` came from an oracle.
    pub s_hat_star: Option<f64>,
    pub gamma: f64,
    pub s0: f64,
    pub epsilon0: f64,
    pub bounds: Option<QdcpBounds>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub comm_bits: u64,
    pub averaging_rounds: usize,
    pub anchor_rounds: usize,
}

/// Per-device local `γ`-quantiles (clamped to the largest local score), averaged by consensus.
pub fn average_local_quantiles(cal: &CalibrationData, gamma: f64, mixer: &Mixer) -> Result<(f64, usize)> {
    let local = cal
        .devices()
        .iter()
        .map(|scores| {
            let rank = quantile_rank(scores.len(), gamma).min(scores.len());
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            Ok(sorted[rank - 1])
        })
        .collect::<Result<Vec<f64>>>()?;
    let out = average_to_tolerance(&local, mixer, AVERAGING_TOL, AVERAGING_MAX_ROUNDS)?;
    let mean = out.values.iter().sum::<f64>() / out.values.len() as f64;
    Ok((mean, out.rounds))
}

pub fn qdcp_comm_bits(t: usize, width: FloatWidth) -> u64 {
    t as u64 * width.bits()
}

/// Decentralized ADMM, distributed averaging, and the widened threshold.
pub fn run_qdcp(cal: &CalibrationData, cfg: &QdcpConfig, topo: &Topology) -> Result<QdcpRun> {
    cfg.validate()?;
    let k = topo.num_nodes();
    if k != cal.num_devices() {
        return Err(invalid("topology", format!("{k} nodes but {} devices", cal.num_devices())));
    }
    let n = cal.total();
    let gamma = conformal_level(cfg.alpha, k, n);
    let w = best_constant_consensus(topo)?;
    let mixer = Mixer::new(&w);

    let (s0, anchor_rounds) = match cfg.s0_mode {
        AnchorMode::Explicit => (cfg.s0.expect("validated"), 0),
        AnchorMode::AvgLocalQuantile => average_local_quantiles(cal, gamma, &mixer)?,
    };
    let comm_bits = qdcp_comm_bits(cfg.t, cfg.float_width);

    if quantile_rank(n, gamma) > n {
        return Ok(QdcpRun {
            threshold: f64::INFINITY,
            per_device_thresholds: vec![f64::INFINITY; k],
            s_bar: f64::INFINITY,
            s_hat_star: None,
            gamma,
            s0,
            epsilon0: cfg.epsilon0,
            bounds: None,
            trajectory: Vec::new(),
            comm_bits,
            averaging_rounds: 0,
            anchor_rounds,
        });
    }

    let params = PinballParams {
        gamma,
        kappa: cfg.kappa,
        mu: cfg.mu,
        s0,
        epsilon0: cfg.epsilon0,
    };
    let eps_tilde = epsilon_tilde_0(n, &params)?;
    let max_local = cal.sizes().into_iter().max().unwrap_or(0);
    let l = smoothness(max_local, &params).l;

    if topo.num_edges() == 0 {
        // single device: no consensus error
        let net = AdmmNetwork::new(topo, cal, params, cfg.c.unwrap_or(1.0), cfg.float_width)?;
        let s_hat = net.loss(0).minimizer()?;
        let threshold = s_hat + eps_tilde;
        return Ok(QdcpRun {
            threshold,
            per_device_thresholds: vec![threshold],
            s_bar: s_hat,
            s_hat_star: Some(s_hat),
            gamma,
            s0,
            epsilon0: cfg.epsilon0,
            bounds: Some(QdcpBounds {
                delta: f64::INFINITY,
                b: f64::NAN,
                c: net.c(),
                smoothness_l: l,
                eps_t: 0.0,
                eps_tilde_0: eps_tilde,
                u_distance: 0.0,
            }),
            trajectory: vec![TrajectoryPoint {
                t: cfg.t,
                s_bar: s_hat,
                primal_residual: 0.0,
                eps_t: 0.0,
                u_error_g: Some(0.0),
            }],
            comm_bits,
            averaging_rounds: 0,
            anchor_rounds,
        });
    }

    let spectrum = SpectralSummary::compute(topo)?;
    let choice = choose_delta(&spectrum, cfg, l);
    let net = AdmmNetwork::new(topo, cal, params, choice.c, cfg.float_width)?;
    let gnorm = GNorm { c: choice.c };

    let u_star = match cfg.u_star {
        UStarSource::Oracle => Some(kkt_u_star(&net, topo, cal)?),
        UStarSource::ReferenceRun => Some(compute_u_star_reference(&net)?),
        UStarSource::Bound(_) => None,
    };
    let u_distance = match (&u_star, cfg.u_star) {
        (Some(u), _) => gnorm.norm(&u.z, &u.lambda_tilde),
        (None, UStarSource::Bound(b)) => b,
        (None, _) => unreachable!(),
    };

    let mut state = net.initial_state();
    let mut trajectory = Vec::with_capacity(cfg.t / cfg.log_every + 1);
    for t in 1..=cfg.t {
        admm_iteration(&mut state, &net)?;
        if t % cfg.log_every == 0 || t == cfg.t {
            trajectory.push(TrajectoryPoint {
                t,
                s_bar: state.s.iter().sum::<f64>() / k as f64,
                primal_residual: net.primal_residual(&state),
                eps_t: epsilon_t(choice.delta, u_distance, k, cfg.mu, t)?,
                u_error_g: u_star
                    .as_ref()
                    .map(|u| gnorm.distance((&state.z, &state.lambda_tail), (&u.z, &u.lambda_tilde))),
            });
        }
    }

    let averaged = average_to_tolerance(&state.s, &mixer, AVERAGING_TOL, AVERAGING_MAX_ROUNDS)?;
    let s_bar = averaged.values.iter().sum::<f64>() / k as f64;
    let eps_final = epsilon_t(choice.delta, u_distance, k, cfg.mu, cfg.t)?;
    let margin = eps_final + eps_tilde;
    Ok(QdcpRun {
        threshold: s_bar + margin,
        per_device_thresholds: averaged.values.iter().map(|v| v + margin).collect(),
        s_bar,
        s_hat_star: u_star.map(|u| u.s_hat),
        gamma,
        s0,
        epsilon0: cfg.epsilon0,
        bounds: Some(QdcpBounds {
            delta: choice.delta,
            b: choice.b,
            c: choice.c,
            smoothness_l: l,
            eps_t: eps_final,
            eps_tilde_0: eps_tilde,
            u_distance,
        }),
        trajectory,
        comm_bits,
        averaging_rounds: averaged.rounds,
        anchor_rounds,
    })
}

/// `{y : s(X, y) ≤ threshold}`.
pub fn qdcp_prediction_set(test: &TestInstance, threshold: f64) -> Vec<usize> {
    test.candidate_scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= threshold)
        .map(|(y, _)| y)
        .collect()
}

/// Oracle `s*`: the pooled empirical quantile the protocol targets.
pub fn target_quantile(cal: &CalibrationData, alpha: f64) -> Result<f64> {
    empirical_quantile(&cal.pooled(), conformal_level(alpha, cal.num_devices(), cal.total()))
}

pub fn write_trajectory_csv(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let io_err = |source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "t,s_bar,primal_residual,eps_T").map_err(io_err)?;
    for p in points {
        writeln!(f, "{},{},{},{}", p.t, p.s_bar, p.primal_residual, p.eps_t).map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Dense `A` (2E×K) and `B` (2E×E) for cross-checking the closed-form updates.
pub fn dense_constraint_matrices(topo: &Topology) -> (Matrix, Matrix) {
    let (e, k) = (topo.num_edges(), topo.num_nodes());
    let mut a = Matrix::zeros(2 * e, k);
    let mut b = Matrix::zeros(2 * e, e);
    for (q, &(i, j)) in topo.edges().iter().enumerate() {
        a[(q, i)] = 1.0;
        a[(e + q, j)] = 1.0;
        b[(q, q)] = -1.0;
        b[(e + q, q)] = -1.0;
    }
    (a, b)
}
