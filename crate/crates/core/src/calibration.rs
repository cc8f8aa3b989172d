//! Calibration metrics and the temperature-scaling baseline. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::numeric::{argmax, entropy, softmax_with_log_partition};

pub const DEFAULT_BINS: usize = 5;

fn check_lengths<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return contract(format!(
            "{} predictions but {} labels",
            probs.len(),
            labels.len()
        ));
    }
    if probs.is_empty() {
        return contract("metrics need at least one prediction");
    }
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.as_ref().len() {
            return contract(format!("label {y} out of range"));
        }
    }
    Ok(())
}

pub fn accuracy<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<f64> {
    check_lengths(probs, labels)?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p.as_ref()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `(1/n) Σ_i Σ_j (p_ij − y_ij)²` with one-hot `y`.
pub fn brier<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<f64> {
    check_lengths(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.as_ref()
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    let d = pj - if j == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// One equal-width confidence bin of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean max-probability in the bin (0 when empty).
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Expected calibration error over `n_bins` equal-width confidence bins.
///
/// Bins are `[k/n, (k+1)/n)` except the last, which is closed; a confidence exactly on an
/// interior edge lands in the upper bin.
pub fn ece<P: AsRef<[f64]>>(probs: &[P], labels: &[usize], n_bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if n_bins == 0 {
        return config("ECE needs at least one bin");
    }
    check_lengths(probs, labels)?;
    let mut counts = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.as_ref();
        let pred = argmax(p);
        let conf = p[pred];
        let bin = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        counts[bin] += 1;
        conf_sum[bin] += conf;
        if pred == y {
            hit_sum[bin] += 1.0;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|k| {
            let (mean_confidence, acc) = if counts[k] == 0 {
                (0.0, 0.0)
            } else {
                let c = counts[k] as f64;
                (conf_sum[k] / c, hit_sum[k] / c)
            };
            total += counts[k] as f64 / n * (acc - mean_confidence).abs();
            ReliabilityBin {
                lower: k as f64 / n_bins as f64,
                upper: (k + 1) as f64 / n_bins as f64,
                count: counts[k],
                mean_confidence,
                accuracy: acc,
            }
        })
        .collect();
    Ok((total, bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationEntropy {
    pub value: f64,
    /// No sample was misclassified; `value` is 0 by convention.
    pub all_correct: bool,
}

/// Mean Shannon entropy of the predictions that miss their label.
pub fn miscls_entropy<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<MisclassificationEntropy> {
    check_lengths(probs, labels)?;
    let wrong: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p.as_ref()) != y)
        .map(|(p, _)| entropy(p.as_ref()))
        .collect();
    if wrong.is_empty() {
        return Ok(MisclassificationEntropy {
            value: 0.0,
            all_correct: true,
        });
    }
    Ok(MisclassificationEntropy {
        value: wrong.iter().sum::<f64>() / wrong.len() as f64,
        all_correct: false,
    })
}

/// Mean negative log-likelihood of `softmax(logits / t)`.
pub fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let scaled: Vec<f64> = l.iter().map(|v| v / t).collect();
            let (_, log_z) = softmax_with_log_partition(&scaled);
            log_z - scaled[y]
        })
        .sum();
    total / labels.len() as f64
}

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
const TEMPERATURE_TOL: f64 = 1e-4;

/// Temperature minimising held-out NLL, by golden-section search over `log T`.
/// Falls back to `T = 1` if the search ends worse than no scaling.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(logits, labels)?;
    let f = |log_t: f64| nll_at_temperature(logits, labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMPERATURE_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let best = 0.5 * (a + b);
    if f(best) <= f(0.0) {
        Ok(best.exp())
    } else {
        Ok(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub brier: f64,
    pub ece: f64,
    pub miscls_entropy: f64,
    pub all_correct: bool,
    pub bins: Vec<ReliabilityBin>,
}

impl CalibrationReport {
    pub fn evaluate<P: AsRef<[f64]>>(probs: &[P], labels: &[usize], n_bins: usize) -> Result<Self> {
        let (ece, bins) = ece(probs, labels, n_bins)?;
        let me = miscls_entropy(probs, labels)?;
        Ok(Self {
            accuracy: accuracy(probs, labels)?,
            brier: brier(probs, labels)?,
            ece,
            miscls_entropy: me.value,
            all_correct: me.all_correct,
            bins,
        })
    }
}

/// Reliability bins as CSV with header `lower,upper,count,confidence,accuracy`.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("lower,upper,count,confidence,accuracy\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
        ));
    }
    out
}
