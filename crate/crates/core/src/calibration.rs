//! Platt scaling of raw anomaly scores and predictive entropy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::probe_attack::sigmoid;
use crate::{Error, Result};

/// Default held-out fraction used for fitting.
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.2;

/// Fitted calibration map `p = sigmoid(a * s + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
}

impl PlattParams {
    pub fn apply(&self, score: f64) -> f64 {
        apply_platt(self, score)
    }
}

pub fn apply_platt(params: &PlattParams, score: f64) -> f64 {
    sigmoid(params.a * score + params.b)
}

/// Natural-log binary entropy with `0 ln 0 = 0`.
pub fn predictive_entropy(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Parallel score / label / id vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(ids: Vec<String>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids, {} scores, {} labels",
                ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite score".into()));
        }
        Ok(Self { ids, scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.len()
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitWarning {
    /// Every sample of the class went to the calibration side.
    EvaluationLacksClass { anomalous: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSplit {
    pub calibration: LabeledScores,
    pub evaluation: LabeledScores,
    /// Indices into the input, ascending.
    pub calibration_indices: Vec<usize>,
    pub evaluation_indices: Vec<usize>,
    pub warnings: Vec<SplitWarning>,
}

/// Stratified split: each class sends `max(1, round(fraction * size))` of its
/// members (shuffled with `seed`) to calibration and the rest to evaluation.
/// Both sides keep the input order.
pub fn split_calibration(data: &LabeledScores, fraction: f64, seed: u64) -> Result<CalibrationSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut calibration_indices = Vec::new();
    let mut evaluation_indices = Vec::new();
    let mut warnings = Vec::new();
    for class in [false, true] {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::ClassImbalance(format!(
                "no {} samples to stratify",
                if class { "anomalous" } else { "nominal" }
            )));
        }
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        if take == members.len() {
            log::warn!(
                "all {} {} samples went to calibration; evaluation has none",
                members.len(),
                if class { "anomalous" } else { "nominal" }
            );
            warnings.push(SplitWarning::EvaluationLacksClass { anomalous: class });
        }
        calibration_indices.extend_from_slice(&members[..take]);
        evaluation_indices.extend_from_slice(&members[take..]);
    }
    calibration_indices.sort_unstable();
    evaluation_indices.sort_unstable();
    Ok(CalibrationSplit {
        calibration: data.select(&calibration_indices),
        evaluation: data.select(&evaluation_indices),
        calibration_indices,
        evaluation_indices,
        warnings,
    })
}

/// Damped Newton schedule for [`fit_platt`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlattConfig {
    pub l2: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for PlattConfig {
    fn default() -> Self {
        Self {
            l2: 1e-6,
            max_iterations: 100,
            step_tolerance: 1e-10,
        }
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn penalised_nll(scores: &[f64], labels: &[bool], a: f64, b: f64, l2: f64) -> f64 {
    let data: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let t = a * s + b;
            softplus(t) - if y { t } else { 0.0 }
        })
        .sum();
    data + 0.5 * l2 * (a * a + b * b)
}

/// Summed negative log-likelihood of `labels` under `sigmoid(a s + b)`.
pub fn platt_nll(scores: &[f64], labels: &[bool], params: &PlattParams) -> f64 {
    penalised_nll(scores, labels, params.a, params.b, 0.0)
}

pub fn fit_platt(cal: &LabeledScores) -> Result<PlattParams> {
    fit_platt_with(cal, &PlattConfig::default())
}

/// Minimises `sum NLL + (l2 / 2)(a^2 + b^2)` by Newton steps with
/// backtracking, starting from the base-rate constant predictor.
pub fn fit_platt_with(cal: &LabeledScores, config: &PlattConfig) -> Result<PlattParams> {
    if !cal.has_both_classes() {
        return Err(Error::ClassImbalance(format!(
            "calibration set has {} anomalous of {} samples",
            cal.positives(),
            cal.len()
        )));
    }
    let (scores, labels) = (&cal.scores, &cal.labels);
    let rate = cal.positives() as f64 / cal.len() as f64;
    let mut a = 0.0;
    let mut b = (rate / (1.0 - rate)).ln();
    let mut f = penalised_nll(scores, labels, a, b, config.l2);

    for _ in 0..config.max_iterations {
        let (mut ga, mut gb) = (config.l2 * a, config.l2 * b);
        let (mut haa, mut hab, mut hbb) = (config.l2, 0.0, config.l2);
        for (&s, &y) in scores.iter().zip(labels) {
            let p = sigmoid(a * s + b);
            let r = p - if y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 0.0 && det.is_finite() {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (-ga, -gb)
        };
        let slope = ga * da + gb * db;

        let mut step = 1.0;
        let mut accepted = None;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = penalised_nll(scores, labels, na, nb, config.l2);
            if nf <= f + 1e-4 * step * slope {
                accepted = Some((na, nb, nf));
                break;
            }
            step *= 0.5;
        }
        let Some((na, nb, nf)) = accepted else { break };
        let moved = (na - a).abs().max((nb - b).abs());
        a = na;
        b = nb;
        f = nf;
        if moved < config.step_tolerance {
            break;
        }
    }
    if a <= 0.0 {
        log::warn!("fitted Platt slope {a} is not positive; score ranking is reversed or flat");
    }
    Ok(PlattParams { a, b })
}

/// Persisted calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub a: f64,
    pub b: f64,
    pub seed: u64,
    pub split_fraction: f64,
}

impl Calibrator {
    pub fn params(&self) -> PlattParams {
        PlattParams { a: self.a, b: self.b }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn scores(s: &[f64], y: &[u8]) -> LabeledScores {
        LabeledScores::new(
            (0..s.len()).map(|i| format!("s{i}")).collect(),
            s.to_vec(),
            y.iter().map(|&v| v == 1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn apply_examples() {
        let p = |a, b, s| apply_platt(&PlattParams { a, b }, s);
        assert_eq!(p(0.0, 0.0, 3.7), 0.5);
        assert_eq!(p(1.0, 0.0, 0.0), 0.5);
        assert!((p(2.0, -1.0, 1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert!((predictive_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(predictive_entropy(0.0), 0.0);
        assert_eq!(predictive_entropy(1.0), 0.0);
        let expected = -0.9 * 0.9f64.ln() - 0.1 * 0.1f64.ln();
        assert!((predictive_entropy(0.9) - expected).abs() < 1e-15);
        assert!((predictive_entropy(0.9) - 0.32508).abs() < 1e-5);
    }

    #[test]
    fn entropy_is_symmetric_and_increasing_to_half() {
        let mut prev = -1.0;
        for k in 0..=500 {
            let p = k as f64 / 1000.0;
            let h = predictive_entropy(p);
            assert!((h - predictive_entropy(1.0 - p)).abs() < 1e-15);
            assert!(h > prev);
            prev = h;
        }
    }

    #[test]
    fn balanced_split() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let data = scores(&vec![0.0; 100], &labels);
        let split = split_calibration(&data, 0.2, 7).unwrap();
        assert_eq!(split.calibration.len(), 20);
        assert_eq!(split.evaluation.len(), 80);
        assert_eq!(split.calibration.positives(), 10);
        assert_eq!(split.evaluation.positives(), 40);
        assert!(split.warnings.is_empty());
        assert_eq!(split, split_calibration(&data, 0.2, 7).unwrap());
        assert_ne!(
            split.calibration_indices,
            split_calibration(&data, 0.2, 8).unwrap().calibration_indices
        );
        let mut all: Vec<usize> = split
            .calibration_indices
            .iter()
            .chain(&split.evaluation_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn lone_positive_goes_to_calibration() {
        let mut labels = vec![0u8; 10];
        labels[6] = 1;
        let split = split_calibration(&scores(&[0.0; 10], &labels), 0.2, 0).unwrap();
        assert!(split.calibration_indices.contains(&6));
        assert_eq!(split.evaluation.positives(), 0);
        assert_eq!(
            split.warnings,
            vec![SplitWarning::EvaluationLacksClass { anomalous: true }]
        );
    }

    #[test]
    fn split_errors() {
        let data = scores(&[0.0; 4], &[0, 0, 0, 0]);
        assert!(matches!(
            split_calibration(&data, 0.2, 0),
            Err(Error::ClassImbalance(_))
        ));
        let data = scores(&[0.0; 4], &[0, 1, 0, 1]);
        assert!(split_calibration(&data, 0.0, 0).is_err());
        assert!(split_calibration(&data, 1.0, 0).is_err());
    }

    #[test]
    fn no_signal_set_fits_flat() {
        let p = fit_platt(&scores(&[-1.0, 1.0, -1.0, 1.0], &[0, 1, 1, 0])).unwrap();
        assert!(p.a.abs() < 1e-3 && p.b.abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn constant_scores_fit_base_rate() {
        let p = fit_platt(&scores(&[0.0; 4], &[1, 1, 1, 0])).unwrap();
        assert!(p.a.abs() < 1e-6, "{p:?}");
        assert!((p.b - 3f64.ln()).abs() < 1e-4, "{p:?}");
    }

    #[test]
    fn separated_scores_give_steep_slope() {
        let data = scores(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[0, 0, 0, 1, 1, 1]);
        let p = fit_platt(&data).unwrap();
        assert!(p.a > 20.0, "{p:?}");
        let fitted = platt_nll(&data.scores, &data.labels, &p);
        // below every point of a coarse grid over [-10, 10]^2
        for i in -100..=100 {
            for j in -100..=100 {
                let g = PlattParams {
                    a: i as f64 * 0.1,
                    b: j as f64 * 0.1,
                };
                assert!(fitted < platt_nll(&data.scores, &data.labels, &g));
            }
        }
    }

    #[test]
    fn single_class_fit_is_rejected() {
        assert!(matches!(
            fit_platt(&scores(&[0.1, 0.2], &[1, 1])),
            Err(Error::ClassImbalance(_))
        ));
    }

    #[test]
    fn fit_beats_constant_predictor_and_keeps_ranking() {
        let s = [0.05, 0.3, 0.12, 0.5, 0.33, 0.41, 0.2, 0.6, 0.27, 0.44];
        let y = [0, 1, 0, 1, 0, 1, 0, 1, 1, 0];
        let data = scores(&s, &y);
        let p = fit_platt(&data).unwrap();
        assert!(p.a > 0.0);
        let rate = 0.5f64;
        let constant = PlattParams {
            a: 0.0,
            b: (rate / (1.0 - rate)).ln(),
        };
        assert!(platt_nll(&s, &data.labels, &p) <= platt_nll(&s, &data.labels, &constant));
        let probs: Vec<f64> = s.iter().map(|&v| p.apply(v)).collect();
        assert_eq!(
            metrics::auroc(&probs, &data.labels).unwrap(),
            metrics::auroc(&s, &data.labels).unwrap()
        );
    }

    #[test]
    fn calibrator_json_shape() {
        let c = Calibrator {
            a: 2.5,
            b: -1.0,
            seed: 3,
            split_fraction: 0.2,
        };
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"a": 2.5, "b": -1.0, "seed": 3, "split_fraction": 0.2})
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        c.save(&path).unwrap();
        assert_eq!(Calibrator::load(&path).unwrap(), c);
    }
}
