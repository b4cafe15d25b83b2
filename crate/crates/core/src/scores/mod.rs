//! Calibration and test scores, the uniform quantizer, and local histograms.

mod io;
mod synthetic;

pub use io::{ingest_scores, read_calibration_csv, read_test_csv, write_calibration_csv, write_test_csv};
pub use synthetic::{generate_synthetic, mixture_weights, BetaParams, SyntheticConfig, TrueScoreFamily};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcpError, Result};

/// Per-device nonconformity scores, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationData {
    per_device: Vec<Vec<f64>>,
}

impl CalibrationData {
    pub fn new(per_device: Vec<Vec<f64>>) -> Result<Self> {
        if per_device.is_empty() {
            return Err(DcpError::InvalidData("no devices".into()));
        }
        for (k, scores) in per_device.iter().enumerate() {
            if scores.is_empty() {
                return Err(DcpError::InvalidData(format!("device {k} holds no scores")));
            }
            if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(DcpError::InvalidData(format!(
                    "device {k} has score {bad} outside [0, 1]"
                )));
            }
        }
        Ok(Self { per_device })
    }

    pub fn num_devices(&self) -> usize {
        self.per_device.len()
    }

    pub fn device(&self, k: usize) -> &[f64] {
        &self.per_device[k]
    }

    pub fn devices(&self) -> &[Vec<f64>] {
        &self.per_device
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.per_device.iter().map(Vec::len).collect()
    }

    /// Total number of calibration points `n`.
    pub fn total(&self) -> usize {
        self.per_device.iter().map(Vec::len).sum()
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.per_device.iter().flatten().copied().collect()
    }
}

/// One test point: its device of origin and the score of every candidate label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestInstance {
    pub device_id: usize,
    pub candidate_scores: Vec<f64>,
    pub true_label: usize,
}

impl TestInstance {
    pub fn new(device_id: usize, candidate_scores: Vec<f64>, true_label: usize) -> Result<Self> {
        if true_label >= candidate_scores.len() {
            return Err(DcpError::InvalidData(format!(
                "true label {true_label} out of range for {} labels",
                candidate_scores.len()
            )));
        }
        if let Some(bad) = candidate_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(DcpError::InvalidData(format!("candidate score {bad} outside [0, 1]")));
        }
        Ok(Self {
            device_id,
            candidate_scores,
            true_label,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.candidate_scores.len()
    }

    pub fn true_score(&self) -> f64 {
        self.candidate_scores[self.true_label]
    }
}

fn check_levels(levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(invalid("M", "need at least one quantization level"));
    }
    Ok(())
}

/// Level index `m ∈ {1..M}` of the bin holding `s`: `[0, 1/M]` is bin 1, then
/// half-open `((m−1)/M, m/M]`. Bin edges are compared as the floats `m as f64 / M`,
/// so the returned level value is always `>= s`.
pub fn quantize_index(s: f64, levels: usize) -> Result<usize> {
    check_levels(levels)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid("s", format!("score {s} outside [0, 1]")));
    }
    Ok(quantize_index_unchecked(s, levels))
}

#[inline]
pub(crate) fn quantize_index_unchecked(s: f64, levels: usize) -> usize {
    let mf = levels as f64;
    let mut m = ((s * mf).ceil() as usize).clamp(1, levels);
    while m > 1 && s <= (m - 1) as f64 / mf {
        m -= 1;
    }
    while m < levels && (m as f64 / mf) < s {
        m += 1;
    }
    m
}

/// `Γ(s)`: the upper edge of the bin holding `s`.
pub fn quantize_score(s: f64, levels: usize) -> Result<f64> {
    Ok(quantize_index(s, levels)? as f64 / levels as f64)
}

/// Bin counts over levels `1..=M` (index 0 holds level 1).
pub fn histogram_counts(scores: &[f64], levels: usize) -> Result<Vec<u64>> {
    check_levels(levels)?;
    if scores.is_empty() {
        return Err(DcpError::InvalidData("empty score vector".into()));
    }
    let mut counts = vec![0u64; levels];
    for &s in scores {
        counts[quantize_index(s, levels)? - 1] += 1;
    }
    Ok(counts)
}

/// Fraction of the quantized scores at each level.
pub fn local_histogram(scores: &[f64], levels: usize) -> Result<Vec<f64>> {
    let n = scores.len() as f64;
    Ok(histogram_counts(scores, levels)?
        .into_iter()
        .map(|c| c as f64 / n)
        .collect())
}
