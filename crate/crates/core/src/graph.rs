//! Network topologies and the matrices both protocols consume: oriented incidence
//! blocks, the Laplacian, the best-constant consensus matrix, and spectral summaries.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcpError, Result};
use crate::linalg::{singular_values, symmetric_eigenvalues, Matrix};

/// Eigenvalues at or below this count as zero when reading off Laplacian spectra.
const SPECTRAL_ZERO_TOL: f64 = 1e-9;

pub const DEFAULT_ER_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Chain,
    Cycle,
    Star,
    Torus,
    Complete,
    ErdosRenyi,
    /// Edge list supplied directly.
    Custom,
}

impl TopologyKind {
    /// The five deterministic shapes, in order of increasing connectivity.
    pub const NAMED: [TopologyKind; 5] = [
        TopologyKind::Chain,
        TopologyKind::Cycle,
        TopologyKind::Star,
        TopologyKind::Torus,
        TopologyKind::Complete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Chain => "chain",
            TopologyKind::Cycle => "cycle",
            TopologyKind::Star => "star",
            TopologyKind::Torus => "torus",
            TopologyKind::Complete => "complete",
            TopologyKind::ErdosRenyi => "erdos_renyi",
            TopologyKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = DcpError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "chain" => TopologyKind::Chain,
            "cycle" => TopologyKind::Cycle,
            "star" => TopologyKind::Star,
            "torus" => TopologyKind::Torus,
            "complete" => TopologyKind::Complete,
            "erdos_renyi" => TopologyKind::ErdosRenyi,
            "custom" => TopologyKind::Custom,
            other => return Err(DcpError::Topology(format!("unknown topology kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyParams {
    pub edge_prob: Option<f64>,
    pub seed: Option<u64>,
    pub torus_dims: Option<(usize, usize)>,
    pub max_attempts: usize,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            edge_prob: None,
            seed: None,
            torus_dims: None,
            max_attempts: DEFAULT_ER_ATTEMPTS,
        }
    }
}

/// Undirected connected graph. Edges are stored as `(i, j)` with `i < j`, sorted;
/// the position in the list is the edge index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyJson", into = "TopologyJson")]
pub struct Topology {
    kind: TopologyKind,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct TopologyJson {
    kind: TopologyKind,
    #[serde(rename = "K")]
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
}

impl TryFrom<TopologyJson> for Topology {
    type Error = DcpError;

    fn try_from(raw: TopologyJson) -> Result<Self> {
        let edges = raw.edges.into_iter().map(|[i, j]| (i, j)).collect();
        let mut topo = Topology::new(raw.kind, raw.num_nodes, edges)?;
        topo.seed = raw.seed;
        Ok(topo)
    }
}

impl From<Topology> for TopologyJson {
    fn from(t: Topology) -> Self {
        TopologyJson {
            kind: t.kind,
            num_nodes: t.num_nodes,
            edges: t.edges.iter().map(|&(i, j)| [i, j]).collect(),
            seed: t.seed,
        }
    }
}

impl Topology {
    /// Validates and normalizes an edge list: pairs are oriented `i < j` and sorted.
    pub fn new(kind: TopologyKind, num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(DcpError::Topology("graph needs at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a == b {
                return Err(DcpError::Topology(format!("self-loop at node {a}")));
            }
            if a >= num_nodes || b >= num_nodes {
                return Err(DcpError::Topology(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(DcpError::Topology(format!("duplicate edge ({a}, {b})")));
            }
        }
        let topo = Topology {
            kind,
            num_nodes,
            edges: seen.into_iter().collect(),
            seed: None,
        };
        if !topo.is_connected() {
            return Err(DcpError::Disconnected);
        }
        Ok(topo)
    }

    /// A lone device: no edges, trivially connected.
    pub fn singleton() -> Self {
        Topology {
            kind: TopologyKind::Complete,
            num_nodes: 1,
            edges: Vec::new(),
            seed: None,
        }
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    fn is_connected(&self) -> bool {
        let adj = self.neighbors();
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Most square factorization `rows × cols = k` with both sides at least 2.
pub fn default_torus_dims(k: usize) -> Option<(usize, usize)> {
    let mut best = None;
    let mut r = 2;
    while r * r <= k {
        if k % r == 0 {
            best = Some((r, k / r));
        }
        r += 1;
    }
    best
}

pub fn build_topology(kind: TopologyKind, k: usize, params: &TopologyParams) -> Result<Topology> {
    if k < 2 {
        return Err(invalid("K", format!("need at least 2 nodes, got {k}")));
    }
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Chain => (0..k - 1).map(|i| (i, i + 1)).collect(),
        TopologyKind::Cycle => {
            let mut e: Vec<_> = (0..k - 1).map(|i| (i, i + 1)).collect();
            if k > 2 {
                e.push((0, k - 1));
            }
            e
        }
        TopologyKind::Star => (1..k).map(|j| (0, j)).collect(),
        TopologyKind::Complete => (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect(),
        TopologyKind::Torus => torus_edges(k, params.torus_dims)?,
        TopologyKind::ErdosRenyi => return erdos_renyi(k, params),
        TopologyKind::Custom => {
            return Err(DcpError::Topology(
                "custom topologies are built from an explicit edge list".into(),
            ))
        }
    };
    Topology::new(kind, k, edges)
}

fn torus_edges(k: usize, dims: Option<(usize, usize)>) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = match dims {
        Some(d) => d,
        None => default_torus_dims(k).ok_or_else(|| {
            invalid("K", format!("{k} has no factorization rows x cols with both >= 2"))
        })?,
    };
    if rows < 2 || cols < 2 || rows * cols != k {
        return Err(invalid(
            "torus_dims",
            format!("{rows} x {cols} does not tile {k} nodes with both sides >= 2"),
        ));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut set = BTreeSet::new();
    for r in 0..rows {
        for c in 0..cols {
            let u = id(r, c);
            for v in [id(r, (c + 1) % cols), id((r + 1) % rows, c)] {
                set.insert((u.min(v), u.max(v)));
            }
        }
    }
    Ok(set.into_iter().collect())
}

fn erdos_renyi(k: usize, params: &TopologyParams) -> Result<Topology> {
    let p = params
        .edge_prob
        .ok_or_else(|| invalid("edge_prob", "required for erdos_renyi"))?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid("edge_prob", format!("{p} not in (0, 1]")));
    }
    let seed = params.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..params.max_attempts.max(1) {
        let mut edges = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        match Topology::new(TopologyKind::ErdosRenyi, k, edges) {
            Ok(mut t) => {
                t.seed = Some(seed);
                return Ok(t);
            }
            Err(DcpError::Disconnected) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(DcpError::ConnectivityAttemptsExhausted {
        attempts: params.max_attempts.max(1),
    })
}

/// Oriented incidence blocks: edge `q = (i, j)` has its tail `i` in `a1` and head `j` in `a2`.
#[derive(Debug, Clone)]
pub struct IncidenceMatrices {
    pub a1: Matrix,
    pub a2: Matrix,
    /// `A1ᵀ + A2ᵀ`, K×E.
    pub m_plus: Matrix,
    /// `A1ᵀ − A2ᵀ`, K×E.
    pub m_minus: Matrix,
}

pub fn incidence(topo: &Topology) -> IncidenceMatrices {
    let (e, k) = (topo.num_edges(), topo.num_nodes());
    let mut a1 = Matrix::zeros(e, k);
    let mut a2 = Matrix::zeros(e, k);
    for (q, &(i, j)) in topo.edges().iter().enumerate() {
        a1[(q, i)] = 1.0;
        a2[(q, j)] = 1.0;
    }
    let (a1t, a2t) = (a1.transpose(), a2.transpose());
    IncidenceMatrices {
        m_plus: a1t.add(&a2t),
        m_minus: a1t.sub(&a2t),
        a1,
        a2,
    }
}

/// `L = D − Adj`.
pub fn laplacian(topo: &Topology) -> Matrix {
    let k = topo.num_nodes();
    let mut l = Matrix::zeros(k, k);
    for &(i, j) in topo.edges() {
        l[(i, j)] -= 1.0;
        l[(j, i)] -= 1.0;
        l[(i, i)] += 1.0;
        l[(j, j)] += 1.0;
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub sigma_max_mplus: f64,
    pub sigma_min_mminus: f64,
    /// Largest Laplacian eigenvalue.
    pub lambda1_l: f64,
    /// Second-smallest Laplacian eigenvalue (algebraic connectivity).
    pub lambda_km1_l: f64,
    pub lambda2_w_abs: f64,
}

impl SpectralSummary {
    /// Requires at least one edge.
    pub fn compute(topo: &Topology) -> Result<Self> {
        if topo.num_edges() == 0 {
            return Err(DcpError::Topology("spectral summary needs at least one edge".into()));
        }
        let inc = incidence(topo);
        let (sigma_max_mplus, _) = singular_values(&inc.m_plus)?;
        let (_, sigma_min_mminus) = singular_values(&inc.m_minus)?;
        let (lambda1_l, lambda_km1_l) = laplacian_extremes(topo)?;
        let w = best_constant_consensus(topo)?;
        Ok(SpectralSummary {
            sigma_max_mplus,
            sigma_min_mminus,
            lambda1_l,
            lambda_km1_l,
            lambda2_w_abs: w.lambda2_abs,
        })
    }

    /// `σ_min(M₋) / σ_max(M₊)`, larger for better-connected graphs.
    pub fn connectivity_ratio(&self) -> f64 {
        self.sigma_min_mminus / self.sigma_max_mplus
    }
}

fn laplacian_extremes(topo: &Topology) -> Result<(f64, f64)> {
    let eig = symmetric_eigenvalues(&laplacian(topo))?;
    let k = eig.len();
    let largest = eig[0];
    let second_smallest = eig[k - 2];
    if second_smallest <= SPECTRAL_ZERO_TOL {
        return Err(DcpError::Disconnected);
    }
    Ok((largest, second_smallest))
}

/// Symmetric mixing matrix with its spectral gap `1 − |λ₂(W)|`, where `|λ₂(W)|` is the
/// largest eigenvalue magnitude once the consensus eigenvalue 1 is removed.
#[derive(Debug, Clone)]
pub struct ConsensusMatrix {
    pub w: Matrix,
    pub lambda2_abs: f64,
    pub spectral_gap: f64,
}

impl ConsensusMatrix {
    /// Checks symmetry, unit row sums, and the sparsity pattern against `topo`.
    pub fn new(w: Matrix, topo: &Topology) -> Result<Self> {
        let k = topo.num_nodes();
        if w.rows() != k || !w.is_square() {
            return Err(invalid("W", format!("expected {k}x{k}")));
        }
        let mut adjacent = vec![vec![false; k]; k];
        for &(i, j) in topo.edges() {
            adjacent[i][j] = true;
            adjacent[j][i] = true;
        }
        for i in 0..k {
            let sum: f64 = w.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(invalid("W", format!("row {i} sums to {sum}")));
            }
            for j in 0..k {
                if i != j && !adjacent[i][j] && w[(i, j)] != 0.0 {
                    return Err(invalid("W", format!("nonzero weight on non-edge ({i}, {j})")));
                }
            }
        }
        let eig = symmetric_eigenvalues(&w)?;
        let lambda2_abs = eig.iter().skip(1).map(|l| l.abs()).fold(0.0, f64::max);
        if lambda2_abs >= 1.0 - 1e-12 && k > 1 {
            return Err(invalid("W", format!("|lambda_2| = {lambda2_abs} is not below 1")));
        }
        Ok(ConsensusMatrix {
            w,
            lambda2_abs,
            spectral_gap: 1.0 - lambda2_abs,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.w.rows()
    }
}

/// Best constant edge weight `a = 2 / (λ₁(L) + λ_{K−1}(L))`.
pub fn best_constant_weight(topo: &Topology) -> Result<f64> {
    let (l1, lk) = laplacian_extremes(topo)?;
    Ok(2.0 / (l1 + lk))
}

pub fn best_constant_consensus(topo: &Topology) -> Result<ConsensusMatrix> {
    let k = topo.num_nodes();
    if k == 1 {
        return Ok(ConsensusMatrix {
            w: Matrix::identity(1),
            lambda2_abs: 0.0,
            spectral_gap: 1.0,
        });
    }
    let a = best_constant_weight(topo)?;
    let mut w = Matrix::zeros(k, k);
    for &(i, j) in topo.edges() {
        w[(i, j)] = a;
        w[(j, i)] = a;
    }
    for (i, d) in topo.degrees().into_iter().enumerate() {
        w[(i, i)] = 1.0 - d as f64 * a;
    }
    ConsensusMatrix::new(w, topo)
}
