//! Image-level detection, calibration and uncertainty metrics.
//!
//! Threshold-sweep metrics place one threshold at every distinct score and
//! predict anomalous when `score >= threshold`. Labels are `true` for
//! anomalous samples.

use serde::{Deserialize, Serialize};

use crate::calibration::predictive_entropy;
use crate::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn require_both(labels: &[bool]) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::ClassImbalance(format!(
            "need both classes, got {pos} anomalous and {neg} nominal"
        )));
    }
    Ok((pos, neg))
}

fn require_positive(labels: &[bool]) -> Result<usize> {
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::ClassImbalance("no anomalous samples".into()));
    }
    Ok(pos)
}

/// Confusion counts `(tp, fp)` at each distinct threshold, from the highest
/// score downwards.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order
            .get(k + 1)
            .is_none_or(|&next| scores[next] != scores[i]);
        if last_of_group {
            out.push((tp, fp));
        }
    }
    out
}

/// Mann-Whitney AUROC with ties counted one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = require_both(labels)?;
    // average ranks, 1-based, doubled to stay in integers
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share (start + 1 + end) / 2
        let doubled_rank = (start + 1 + end) as u64;
        let group_pos = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        doubled_rank_sum += doubled_rank * group_pos;
        start = end;
    }
    let (p, n) = (pos as u64, neg as u64);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / 2.0 / (p * n) as f64)
}

/// Step-wise average precision `sum (R_k - R_{k-1}) P_k`.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = require_positive(labels)? as f64;
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for (tp, fp) in sweep(scores, labels) {
        let recall_step = tp as f64 / pos - prev_tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += recall_step * precision;
        prev_tp = tp;
    }
    Ok(ap)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Best F1 over all thresholds.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = require_positive(labels)?;
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(tp, fp)| f1_from_counts(tp, fp, pos - tp))
        .fold(0.0, f64::max))
}

fn g_mean_from_counts(tp: usize, fp: usize, pos: usize, neg: usize) -> f64 {
    let tpr = tp as f64 / pos as f64;
    let tnr = (neg - fp) as f64 / neg as f64;
    (tpr * tnr).sqrt()
}

/// Best `sqrt(TPR * TNR)` over all thresholds.
pub fn g_mean_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = require_both(labels)?;
    // the "nothing predicted anomalous" operating point scores 0
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(tp, fp)| g_mean_from_counts(tp, fp, pos, neg))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted probability in the bin, 0 when empty.
    pub confidence: f64,
    /// Fraction of anomalous labels in the bin, 0 when empty.
    pub accuracy: f64,
}

/// Reliability-diagram table over equal-width probability bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub bins: Vec<Bin>,
}

impl BinTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor() as usize).min(bins - 1)
}

/// Expected calibration error with bins `[(m-1)/M, m/M)`, the last closed.
pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> Result<(f64, BinTable)> {
    check_lengths(probs, labels)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut pos = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let m = bin_index(p, bins);
        count[m] += 1;
        conf_sum[m] += p;
        pos[m] += usize::from(y);
    }
    let n = probs.len();
    let mut total = 0.0;
    let table = (0..bins)
        .map(|m| {
            let (confidence, accuracy) = if count[m] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[m] as f64;
                (conf_sum[m] / c, pos[m] as f64 / c)
            };
            if count[m] > 0 {
                total += count[m] as f64 / n as f64 * (accuracy - confidence).abs();
            }
            Bin {
                lower: m as f64 / bins as f64,
                upper: (m + 1) as f64 / bins as f64,
                count: count[m],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok((total, BinTable { bins: table }))
}

/// Mean negative log-likelihood with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn nll(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean squared error between probability and label.
pub fn brier(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let d = p - if y { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn entropy_summary(entropies: &[f64]) -> Result<EntropySummary> {
    let (mean, std) = mean_std(entropies)
        .ok_or_else(|| Error::InvalidArgument("entropy summary of an empty list".into()))?;
    Ok(EntropySummary { mean, std })
}

/// Mean entropy of the adversarial group minus that of the clean group.
pub fn entropy_delta(clean: &EntropySummary, adversarial: &EntropySummary) -> f64 {
    adversarial.mean - clean.mean
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Every metric for one group of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
    pub g_mean: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 10] = [
        "n",
        "auroc",
        "ap",
        "f1_max",
        "g_mean",
        "ece",
        "nll",
        "brier",
        "entropy_mean",
        "entropy_std",
    ];

    /// Detection metrics come from `scores`, calibration and entropy metrics
    /// from `probs`.
    pub fn compute(scores: &[f64], probs: &[f64], labels: &[bool], bins: usize) -> Result<(Self, BinTable)> {
        if scores.len() != probs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores, {} probabilities",
                scores.len(),
                probs.len()
            )));
        }
        let (ece_value, table) = ece(probs, labels, bins)?;
        let entropies: Vec<f64> = probs.iter().map(|&p| predictive_entropy(p)).collect();
        let entropy = entropy_summary(&entropies)?;
        let report = Self {
            n: scores.len(),
            auroc: auroc(scores, labels)?,
            ap: average_precision(scores, labels)?,
            f1_max: f1_max(scores, labels)?,
            g_mean: g_mean_max(scores, labels)?,
            ece: ece_value,
            nll: nll(probs, labels)?,
            brier: brier(probs, labels)?,
            entropy_mean: entropy.mean,
            entropy_std: entropy.std,
        };
        Ok((report, table))
    }

    pub fn values(&self) -> [f64; 9] {
        [
            self.auroc,
            self.ap,
            self.f1_max,
            self.g_mean,
            self.ece,
            self.nll,
            self.brier,
            self.entropy_mean,
            self.entropy_std,
        ]
    }
}
