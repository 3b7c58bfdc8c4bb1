//! Evaluation metrics: accuracy, expected calibration error, negative
//! log-likelihood, the spread norm of a posterior and round timing.
//!
//! Probability inputs are row-major `[rows × classes]` buffers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vbnn::VbnnModel;

/// Default number of equal-width confidence bins for ECE.
pub const DEFAULT_ECE_BINS: usize = 15;

/// Lower clip applied to probabilities before the log in [`nll`].
pub const NLL_PROB_FLOOR: f64 = 1e-12;

fn classes_of(probs: &[f64], labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::usage("metrics need a non-empty batch"));
    }
    if !probs.len().is_multiple_of(labels.len()) || probs.is_empty() {
        return Err(Error::shape(format!(
            "{} probabilities do not form {} rows",
            probs.len(),
            labels.len()
        )));
    }
    let classes = probs.len() / labels.len();
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::usage(format!("label {y} is outside [0, {classes})")));
    }
    Ok(classes)
}

/// Index and value of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn accuracy(probs: &[f64], labels: &[usize]) -> Result<f64> {
    let classes = classes_of(probs, labels)?;
    let correct = probs
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row).0 == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean accuracy in the bin (0 when empty).
    pub accuracy: f64,
    /// Mean confidence in the bin (0 when empty).
    pub confidence: f64,
}

/// Equal-width confidence bins `(m/M, (m+1)/M]` over the max-probability
/// confidence of each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub samples: usize,
}

impl ReliabilityBins {
    /// `Σ_m (B_m / n) · |acc_m − conf_m|`.
    pub fn ece(&self) -> f64 {
        let n = self.samples as f64;
        self.bins
            .iter()
            .map(|b| (b.count as f64 / n) * (b.accuracy - b.confidence).abs())
            .sum()
    }
}

/// Bin index of `confidence` under `(m/M, (m+1)/M]`, with values at or
/// below zero landing in the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut b = ((confidence * m).ceil() as usize).clamp(1, bins) - 1;
    // Settle floating-point edge cases against the interval bounds.
    while b > 0 && confidence <= b as f64 / m {
        b -= 1;
    }
    while b + 1 < bins && confidence > (b + 1) as f64 / m {
        b += 1;
    }
    b
}

pub fn reliability_bins(probs: &[f64], labels: &[usize], bins: usize) -> Result<ReliabilityBins> {
    if bins == 0 {
        return Err(Error::usage("ECE needs at least one bin"));
    }
    let classes = classes_of(probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (row, &y) in probs.chunks(classes).zip(labels) {
        let (pred, conf) = argmax(row);
        let b = bin_index(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let m = bins as f64;
    let bins = (0..bins)
        .map(|b| {
            let (accuracy, confidence) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (
                    correct[b] as f64 / count[b] as f64,
                    conf_sum[b] / count[b] as f64,
                )
            };
            Bin {
                low: b as f64 / m,
                high: (b + 1) as f64 / m,
                count: count[b],
                accuracy,
                confidence,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        samples: labels.len(),
    })
}

pub fn ece(probs: &[f64], labels: &[usize], bins: usize) -> Result<f64> {
    Ok(reliability_bins(probs, labels, bins)?.ece())
}

/// Mean `−ln p(y)` in nats, with probabilities clipped below at 1e-12.
pub fn nll(probs: &[f64], labels: &[usize]) -> Result<f64> {
    let classes = classes_of(probs, labels)?;
    let total: f64 = probs
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(NLL_PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Euclidean norm of the stacked per-parameter standard deviations.
pub fn spread_norm(model: &VbnnModel) -> Result<f64> {
    if !model.is_variational() {
        return Err(Error::usage(
            "spread norm is undefined for deterministic models",
        ));
    }
    Ok(model
        .tensors()
        .flat_map(|t| t.alpha())
        .map(|a| a.exp())
        .sum::<f64>()
        .sqrt())
}

/// Wall-clock timer for one communication round.
#[derive(Debug, Clone, Copy)]
pub struct RoundTimer {
    start: Instant,
}

impl RoundTimer {
    pub fn start() -> Self {
        Self {
            start: Instant::now(),
        }
    }

    /// Elapsed seconds, never zero.
    pub fn elapsed_seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64().max(1e-9)
    }
}

/// Scores of the global model after one evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub round: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    /// `None` for deterministic models.
    pub spread_norm: Option<f64>,
    pub tpc_seconds: f64,
}
