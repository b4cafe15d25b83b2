//! Synchronous linear consensus `x_k ← x_k + η Σ_j W_kj (x_j − x_k)` over
//! vector-valued node states, stored row-major as `K × dim`.

use crate::error::{invalid, DcpError, Result};
use crate::graph::ConsensusMatrix;
use crate::wire::FloatWidth;

/// Sparse view of a consensus matrix: each node's off-diagonal neighbors and weights.
#[derive(Debug, Clone)]
pub struct Mixer {
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Mixer {
    pub fn new(w: &ConsensusMatrix) -> Self {
        let k = w.num_nodes();
        let neighbors = (0..k)
            .map(|i| {
                (0..k)
                    .filter(|&j| j != i && w.w[(i, j)] != 0.0)
                    .map(|j| (j, w.w[(i, j)]))
                    .collect()
            })
            .collect();
        Self { neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, k: usize) -> &[(usize, f64)] {
        &self.neighbors[k]
    }

    /// One synchronous round. Each node broadcasts its state rounded to `width`;
    /// receivers combine the rounded neighbor values with their own exact state.
    pub fn step(&self, x: &[f64], dim: usize, eta: f64, width: FloatWidth, out: &mut Vec<f64>) {
        let k = self.num_nodes();
        debug_assert_eq!(x.len(), k * dim);
        let wire: std::borrow::Cow<[f64]> = if width == FloatWidth::F64 {
            std::borrow::Cow::Borrowed(x)
        } else {
            std::borrow::Cow::Owned(x.iter().map(|&v| width.round(v)).collect())
        };
        out.clear();
        out.extend_from_slice(x);
        for node in 0..k {
            let own = &x[node * dim..(node + 1) * dim];
            let dst = &mut out[node * dim..(node + 1) * dim];
            for &(j, wkj) in &self.neighbors[node] {
                let coef = eta * wkj;
                let nb = &wire[j * dim..(j + 1) * dim];
                for ((d, &xj), &xk) in dst.iter_mut().zip(nb).zip(own) {
                    *d += coef * (xj - xk);
                }
            }
        }
    }
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid("eta", format!("{eta} not in (0, 1]")));
    }
    Ok(())
}

/// Per-node results of a scalar averaging pass.
#[derive(Debug, Clone)]
pub struct AveragingOutcome {
    pub values: Vec<f64>,
    pub rounds: usize,
}

impl AveragingOutcome {
    pub fn spread(&self) -> f64 {
        spread(&self.values)
    }
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Runs scalar consensus (η = 1, full precision) until the max−min spread is at most `tol`.
pub fn average_to_tolerance(values: &[f64], mixer: &Mixer, tol: f64, max_rounds: usize) -> Result<AveragingOutcome> {
    if values.len() != mixer.num_nodes() {
        return Err(invalid("values", "length differs from node count"));
    }
    let mut x = values.to_vec();
    let mut next = Vec::with_capacity(x.len());
    let mut rounds = 0;
    while spread(&x) > tol {
        if rounds == max_rounds {
            return Err(DcpError::InvalidData(format!(
                "averaging spread {} above {tol} after {max_rounds} rounds",
                spread(&x)
            )));
        }
        mixer.step(&x, 1, 1.0, FloatWidth::F64, &mut next);
        std::mem::swap(&mut x, &mut next);
        rounds += 1;
    }
    Ok(AveragingOutcome { values: x, rounds })
}
