use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use super::{CalibrationData, TestInstance};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    fn distribution(self) -> Result<Beta<f64>> {
        Beta::new(self.alpha, self.beta).map_err(|e| {
            invalid(
                "beta",
                format!("Beta({}, {}) rejected: {e}", self.alpha, self.beta),
            )
        })
    }
}

/// True-label scores at device `k` follow `Beta(alpha, beta_base + beta_spread · u_k)`
/// with heterogeneity `u_k = k / (K − 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueScoreFamily {
    pub alpha: f64,
    pub beta_base: f64,
    pub beta_spread: f64,
}

impl Default for TrueScoreFamily {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_base: 1.0,
            beta_spread: 4.0,
        }
    }
}

impl TrueScoreFamily {
    pub fn for_device(&self, k: usize, num_devices: usize) -> BetaParams {
        let u = if num_devices > 1 {
            k as f64 / (num_devices - 1) as f64
        } else {
            0.0
        };
        BetaParams {
            alpha: self.alpha,
            beta: self.beta_base + self.beta_spread * u,
        }
    }
}

fn default_false_family() -> BetaParams {
    BetaParams { alpha: 5.0, beta: 1.0 }
}

/// Non-i.i.d. synthetic scores. `n_k` holds one size per device, or a single size
/// shared by all devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    #[serde(rename = "K")]
    pub num_devices: usize,
    pub n_k: Vec<usize>,
    pub num_labels: usize,
    pub num_test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub true_family: TrueScoreFamily,
    #[serde(default = "default_false_family")]
    pub false_family: BetaParams,
}

impl SyntheticConfig {
    pub fn uniform(num_devices: usize, n_k: usize, num_labels: usize, num_test: usize, seed: u64) -> Self {
        Self {
            num_devices,
            n_k: vec![n_k],
            num_labels,
            num_test,
            seed,
            true_family: TrueScoreFamily::default(),
            false_family: default_false_family(),
        }
    }

    pub fn device_sizes(&self) -> Result<Vec<usize>> {
        let sizes = match self.n_k.as_slice() {
            [single] => vec![*single; self.num_devices],
            many if many.len() == self.num_devices => many.to_vec(),
            other => {
                return Err(invalid(
                    "n_k",
                    format!("{} sizes given for {} devices", other.len(), self.num_devices),
                ))
            }
        };
        if sizes.contains(&0) {
            return Err(invalid("n_k", "every device needs at least one score"));
        }
        Ok(sizes)
    }

    fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(invalid("K", "need at least one device"));
        }
        if self.num_labels == 0 {
            return Err(invalid("num_labels", "need at least one label"));
        }
        Ok(())
    }
}

/// Mixture weights `w_k = (n_k + 1) / (n + K)`.
pub fn mixture_weights(sizes: &[usize]) -> Vec<f64> {
    let denom = (sizes.iter().sum::<usize>() + sizes.len()) as f64;
    sizes.iter().map(|&n| (n + 1) as f64 / denom).collect()
}

/// Draws calibration scores device by device, then test points from the mixture.
/// A single ChaCha8 stream seeded by `cfg.seed` drives every draw.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(CalibrationData, Vec<TestInstance>)> {
    cfg.validate()?;
    let sizes = cfg.device_sizes()?;
    let k = cfg.num_devices;
    let true_dists = (0..k)
        .map(|d| cfg.true_family.for_device(d, k).distribution())
        .collect::<Result<Vec<_>>>()?;
    let false_dist = cfg.false_family.distribution()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let per_device = sizes
        .iter()
        .zip(&true_dists)
        .map(|(&n, dist)| (0..n).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    let cal = CalibrationData::new(per_device)?;

    let device_picker = WeightedIndex::new(sizes.iter().map(|&n| n + 1))
        .map_err(|e| invalid("n_k", e.to_string()))?;
    let mut tests = Vec::with_capacity(cfg.num_test);
    for _ in 0..cfg.num_test {
        let device = device_picker.sample(&mut rng);
        let true_label = rng.random_range(0..cfg.num_labels);
        let candidate_scores = (0..cfg.num_labels)
            .map(|y| {
                if y == true_label {
                    true_dists[device].sample(&mut rng)
                } else {
                    false_dist.sample(&mut rng)
                }
            })
            .collect();
        tests.push(TestInstance {
            device_id: device,
            candidate_scores,
            true_label,
        });
    }
    Ok((cal, tests))
}
