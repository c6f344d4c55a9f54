use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BackendKind, DatasetKind, ExperimentConfig};
use crate::calibration::{fit_platt, predictive_entropy, split_calibration, LabeledScores, PlattParams};
use crate::dataset::{
    by_category, generate_synthetic, load_manifest, load_mvtec, load_samples, sample_support, LoadedSample, Sample,
};
use crate::encoder::{Condition, EmbeddingStore, Image, PatchEmbeddings, PatchEncoder, ToyEncoder};
use crate::memory_bank::{MemoryBank, PatchScoreMap};
use crate::metrics::{mean_std, BinTable, MetricReport};
use crate::probe_attack::{derive_patch_mask, fgsm_attack, fit_probe, AttackConfig, PatchMask, PixelMask, ProbeConfig};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Name of the cross-category aggregate rows.
pub const ALL_CATEGORIES: &str = "ALL";

/// Seed-wise standard deviations at or above this value are flagged.
pub const SEED_STD_WARNING: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationKind {
    Uncalibrated,
    Platt,
}

impl CalibrationKind {
    pub const ALL: [CalibrationKind; 2] = [CalibrationKind::Uncalibrated, CalibrationKind::Platt];

    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationKind::Uncalibrated => "uncalibrated",
            CalibrationKind::Platt => "platt",
        }
    }
}

/// Probability assigned to a raw score without calibration.
pub fn uncalibrated_probability(score: f64) -> f64 {
    score.clamp(0.0, 1.0)
}

/// Counts of predictive entropies in `bins` equal-width bins over `[0, ln 2]`.
pub fn entropy_histogram(entropies: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &h in entropies {
        let m = ((h / std::f64::consts::LN_2 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[m] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub calibration: CalibrationKind,
    pub metrics: MetricReport,
    pub reliability: BinTable,
    pub entropy_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMapRecord {
    pub id: String,
    pub condition: Condition,
    pub map: PatchScoreMap,
}

/// Raw scores of one evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub label: bool,
    pub clean: f64,
    pub adversarial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub category: String,
    pub shot: usize,
    pub seed: u64,
    pub support: Vec<String>,
    pub n_calibration: usize,
    pub n_evaluation: usize,
    pub platt: PlattParams,
    /// Clean then adversarial, each uncalibrated then Platt.
    pub rows: Vec<ConditionReport>,
    pub evaluation: Vec<SampleScore>,
    pub patch_maps: Vec<PatchMapRecord>,
    pub warnings: Vec<String>,
}

impl CellReport {
    pub fn row(&self, condition: Condition, calibration: CalibrationKind) -> Option<&ConditionReport> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.calibration == calibration)
    }

    /// Mean adversarial entropy minus mean clean entropy.
    pub fn entropy_delta(&self, calibration: CalibrationKind) -> Option<f64> {
        let clean = self.row(Condition::Clean, calibration)?;
        let adv = self.row(Condition::Adversarial, calibration)?;
        Some(adv.metrics.entropy_mean - clean.metrics.entropy_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub category: String,
    pub shot: usize,
    pub condition: Condition,
    pub calibration: CalibrationKind,
    pub seeds: usize,
    pub mean: BTreeMap<String, f64>,
    /// Population standard deviation across seeds.
    pub std: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDeltaRow {
    pub category: String,
    pub shot: usize,
    pub seed: u64,
    pub calibration: CalibrationKind,
    pub clean_mean: f64,
    pub adversarial_mean: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDeltaSummary {
    pub category: String,
    pub shot: usize,
    pub calibration: CalibrationKind,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub categories: Vec<String>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    pub ece_bins: usize,
    pub cells: Vec<CellReport>,
    pub summary: Vec<SummaryRow>,
    pub entropy_delta: Vec<EntropyDeltaRow>,
    pub entropy_delta_summary: Vec<EntropyDeltaSummary>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn cell(&self, category: &str, shot: usize, seed: u64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.category == category && c.shot == shot && c.seed == seed)
    }
}

enum Backend {
    Toy(ToyEncoder),
    Store(EmbeddingStore),
}

struct CategoryData {
    name: String,
    samples: Vec<Sample>,
    /// Pixels and masks by id; empty for the store backend.
    pixels: BTreeMap<String, (Image, PixelMask)>,
}

/// A dataset and encoder ready to run.
pub struct Experiment {
    config: ExperimentConfig,
    backend: Backend,
    categories: Vec<CategoryData>,
}

fn select_categories<T>(mut all: BTreeMap<String, T>, wanted: &[String]) -> Result<BTreeMap<String, T>> {
    if wanted.is_empty() {
        return Ok(all);
    }
    let mut out = BTreeMap::new();
    for name in wanted {
        let data = all
            .remove(name)
            .ok_or_else(|| Error::Config(format!("unknown category `{name}`")))?;
        out.insert(name.clone(), data);
    }
    Ok(out)
}

fn group_loaded(loaded: Vec<LoadedSample>) -> BTreeMap<String, CategoryData> {
    let mut out: BTreeMap<String, CategoryData> = BTreeMap::new();
    for l in loaded {
        let entry = out.entry(l.sample.category.clone()).or_insert_with(|| CategoryData {
            name: l.sample.category.clone(),
            samples: Vec::new(),
            pixels: BTreeMap::new(),
        });
        entry.pixels.insert(l.sample.id.clone(), (l.image, l.mask));
        entry.samples.push(l.sample);
    }
    out
}

impl Experiment {
    /// Loads the dataset and encoder named by `config`.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if config.dataset == DatasetKind::Synthetic {
            let loaded = generate_synthetic(&config.synthetic())?;
            return Self::from_loaded(config, loaded);
        }
        let root = config.dataset_root.clone().expect("validated");
        let samples = match config.dataset {
            DatasetKind::Mvtec => load_mvtec(&root)?,
            DatasetKind::Manifest => by_category(load_manifest(&root)?),
            DatasetKind::Synthetic => unreachable!(),
        };
        let samples = select_categories(samples, &config.categories)?;
        match config.backend {
            BackendKind::Toy => {
                let all: Vec<Sample> = samples.into_values().flatten().collect();
                let loaded = load_samples(&all, config.resolution)?;
                Self::from_loaded(config, loaded)
            }
            BackendKind::Store => {
                let mut paths = config.store_paths.iter();
                let mut store = EmbeddingStore::load(paths.next().expect("validated"))?;
                for path in paths {
                    store.merge(EmbeddingStore::load(path)?)?;
                }
                let categories = samples
                    .into_iter()
                    .map(|(name, samples)| CategoryData {
                        name,
                        samples,
                        pixels: BTreeMap::new(),
                    })
                    .collect();
                Ok(Self {
                    config,
                    backend: Backend::Store(store),
                    categories,
                })
            }
        }
    }

    /// Uses already decoded samples with the toy encoder.
    pub fn from_loaded(config: ExperimentConfig, loaded: Vec<LoadedSample>) -> Result<Self> {
        if config.backend != BackendKind::Toy {
            return Err(Error::Config("decoded samples need the toy backend".into()));
        }
        let encoder = ToyEncoder::new(config.patch_size, config.embedding_dim, config.encoder_seed)?;
        let categories = select_categories(group_loaded(loaded), &config.categories)?;
        Ok(Self {
            config,
            backend: Backend::Toy(encoder),
            categories: categories.into_values().collect(),
        })
    }

    /// Uses an embedding store for every sample.
    pub fn with_store(config: ExperimentConfig, samples: Vec<Sample>, store: EmbeddingStore) -> Result<Self> {
        let categories = select_categories(by_category(samples), &config.categories)?
            .into_iter()
            .map(|(name, samples)| CategoryData {
                name,
                samples,
                pixels: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            config,
            backend: Backend::Store(store),
            categories,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn run(&self) -> Result<RunReport> {
        let cfg = &self.config;
        cfg.validate()?;
        let epsilon = cfg.epsilon_value()?;
        if self.categories.is_empty() {
            return Err(Error::Dataset("no categories to evaluate".into()));
        }
        if let Backend::Store(store) = &self.backend {
            if !store.has_condition(Condition::Adversarial) {
                return Err(Error::MissingAdversarial(
                    "embedding store holds no adversarial records".into(),
                ));
            }
        }
        let jobs: Vec<(&CategoryData, usize, u64)> = self
            .categories
            .iter()
            .flat_map(|c| {
                cfg.shots
                    .iter()
                    .flat_map(move |&k| cfg.seeds.iter().map(move |&s| (c, k, s)))
            })
            .collect();
        let cells = jobs
            .into_par_iter()
            .map(|(data, shot, seed)| {
                self.run_cell(data, shot, seed, epsilon).map_err(|e| Error::Cell {
                    category: data.name.clone(),
                    shot,
                    seed,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(self.category_names(), cfg, epsilon, cells))
    }

    fn clean_embeddings(&self, data: &CategoryData, id: &str) -> Result<PatchEmbeddings> {
        match &self.backend {
            Backend::Toy(encoder) => {
                let (image, _) = data.pixels.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
                encoder.encode(image)
            }
            Backend::Store(store) => store.get(id, Condition::Clean),
        }
    }

    fn run_cell(&self, data: &CategoryData, shot: usize, seed: u64, epsilon: f64) -> Result<CellReport> {
        let cfg = &self.config;
        let task = sample_support(&data.samples, &data.name, shot, seed)?;
        let support: Vec<(String, PatchEmbeddings)> = task
            .support
            .iter()
            .map(|s| Ok((s.id.clone(), self.clean_embeddings(data, &s.id)?)))
            .collect::<Result<_>>()?;
        let bank = MemoryBank::build(support.iter().map(|(id, e)| (id.as_str(), e)))?;

        let test = &task.test;
        let clean: Vec<PatchEmbeddings> = test
            .iter()
            .map(|s| self.clean_embeddings(data, &s.id))
            .collect::<Result<_>>()?;
        let clean_maps: Vec<PatchScoreMap> = clean.iter().map(|e| bank.patch_scores(e)).collect::<Result<_>>()?;
        let clean_scores = LabeledScores::new(
            test.iter().map(|s| s.id.clone()).collect(),
            clean_maps.iter().map(PatchScoreMap::aggregate_meantop1).collect(),
            test.iter().map(|s| s.label).collect(),
        )?;
        let split = split_calibration(
            &clean_scores,
            cfg.split_fraction,
            derive_seed(seed, &["split", &data.name]),
        )?;
        let mut warnings: Vec<String> = split
            .warnings
            .iter()
            .map(|w| format!("calibration split: {w:?}"))
            .collect();

        let adversarial = self.adversarial_embeddings(data, test, &clean, &split.calibration_indices, &split.evaluation_indices, epsilon)?;
        let adv_maps: Vec<PatchScoreMap> = adversarial
            .iter()
            .map(|e| bank.patch_scores(e))
            .collect::<Result<_>>()?;
        let adv_scores: Vec<f64> = adv_maps.iter().map(PatchScoreMap::aggregate_meantop1).collect();

        let platt = fit_platt(&split.calibration)?;
        if platt.a <= 0.0 {
            warnings.push(format!("non-positive Platt slope {}", platt.a));
        }

        let labels = &split.evaluation.labels;
        let mut rows = Vec::with_capacity(4);
        for (condition, scores) in [
            (Condition::Clean, split.evaluation.scores.as_slice()),
            (Condition::Adversarial, adv_scores.as_slice()),
        ] {
            for calibration in CalibrationKind::ALL {
                let probs: Vec<f64> = match calibration {
                    CalibrationKind::Uncalibrated => scores.iter().map(|&s| uncalibrated_probability(s)).collect(),
                    CalibrationKind::Platt => scores.iter().map(|&s| platt.apply(s)).collect(),
                };
                let (metrics, reliability) = MetricReport::compute(scores, &probs, labels, cfg.ece_bins)?;
                let entropies: Vec<f64> = probs.iter().map(|&p| predictive_entropy(p)).collect();
                rows.push(ConditionReport {
                    condition,
                    calibration,
                    metrics,
                    reliability,
                    entropy_histogram: entropy_histogram(&entropies, cfg.entropy_bins),
                });
            }
        }

        let mut patch_maps = Vec::new();
        if let Some(pos) = split.evaluation_indices.iter().position(|&i| test[i].label) {
            let i = split.evaluation_indices[pos];
            patch_maps.push(PatchMapRecord {
                id: test[i].id.clone(),
                condition: Condition::Clean,
                map: clean_maps[i].clone(),
            });
            patch_maps.push(PatchMapRecord {
                id: test[i].id.clone(),
                condition: Condition::Adversarial,
                map: adv_maps[pos].clone(),
            });
        }

        for w in &warnings {
            log::warn!("{} k={shot} seed={seed}: {w}", data.name);
        }
        Ok(CellReport {
            category: data.name.clone(),
            shot,
            seed,
            support: task.support.iter().map(|s| s.id.clone()).collect(),
            n_calibration: split.calibration.len(),
            n_evaluation: split.evaluation.len(),
            platt,
            rows,
            evaluation: split
                .evaluation
                .ids
                .iter()
                .zip(&split.evaluation.labels)
                .zip(split.evaluation.scores.iter().zip(&adv_scores))
                .map(|((id, &label), (&clean, &adversarial))| SampleScore {
                    id: id.clone(),
                    label,
                    clean,
                    adversarial,
                })
                .collect(),
            patch_maps,
            warnings,
        })
    }

    /// Adversarial embeddings of the evaluation samples, in evaluation order.
    fn adversarial_embeddings(
        &self,
        data: &CategoryData,
        test: &[Sample],
        clean: &[PatchEmbeddings],
        calibration: &[usize],
        evaluation: &[usize],
        epsilon: f64,
    ) -> Result<Vec<PatchEmbeddings>> {
        match &self.backend {
            Backend::Store(store) => evaluation
                .iter()
                .map(|&i| {
                    let id = &test[i].id;
                    if !store.contains(id, Condition::Adversarial) {
                        return Err(Error::MissingAdversarial(id.clone()));
                    }
                    store.get(id, Condition::Adversarial)
                })
                .collect(),
            Backend::Toy(encoder) => {
                let p = encoder.patch_size();
                let patch_mask = |i: usize| -> Result<PatchMask> {
                    let (_, mask) = &data.pixels[&test[i].id];
                    derive_patch_mask(mask, p)
                };
                let masks: Vec<PatchMask> = calibration.iter().map(|&i| patch_mask(i)).collect::<Result<_>>()?;
                let pool: Vec<(&PatchEmbeddings, &PatchMask)> =
                    calibration.iter().map(|&i| &clean[i]).zip(&masks).collect();
                let probe = fit_probe(&pool, &ProbeConfig::default())?;
                let attack = AttackConfig::new(epsilon)?;
                evaluation
                    .iter()
                    .map(|&i| {
                        let (image, _) = &data.pixels[&test[i].id];
                        let adv = fgsm_attack(encoder, &probe, image, &patch_mask(i)?, &attack)?;
                        encoder.encode(&adv)
                    })
                    .collect()
            }
        }
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<RunReport> {
    Experiment::prepare(config)?.run()
}

fn metric_maps(values: &[[f64; 9]]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (j, name) in MetricReport::FIELDS[1..].iter().enumerate() {
        let column: Vec<f64> = values.iter().map(|v| v[j]).collect();
        let (m, s) = mean_std(&column).unwrap_or((f64::NAN, f64::NAN));
        mean.insert(name.to_string(), m);
        std.insert(name.to_string(), s);
    }
    (mean, std)
}

fn assemble(categories: Vec<String>, cfg: &ExperimentConfig, epsilon: f64, cells: Vec<CellReport>) -> RunReport {
    let mut summary = Vec::new();
    let mut warnings = Vec::new();
    let mut entropy_delta = Vec::new();
    let mut entropy_delta_summary = Vec::new();

    for cell in &cells {
        for calibration in CalibrationKind::ALL {
            let clean = cell.row(Condition::Clean, calibration).expect("complete cell");
            let adv = cell.row(Condition::Adversarial, calibration).expect("complete cell");
            entropy_delta.push(EntropyDeltaRow {
                category: cell.category.clone(),
                shot: cell.shot,
                seed: cell.seed,
                calibration,
                clean_mean: clean.metrics.entropy_mean,
                adversarial_mean: adv.metrics.entropy_mean,
                delta: adv.metrics.entropy_mean - clean.metrics.entropy_mean,
            });
        }
    }

    let lookup = |category: &str, shot: usize, seed: u64| {
        cells
            .iter()
            .find(|c| c.category == category && c.shot == shot && c.seed == seed)
            .expect("every configured cell is present")
    };

    let mut groups: Vec<String> = categories.clone();
    groups.push(ALL_CATEGORIES.to_string());
    for group in &groups {
        let members: Vec<&str> = if group == ALL_CATEGORIES {
            categories.iter().map(String::as_str).collect()
        } else {
            vec![group.as_str()]
        };
        for &shot in &cfg.shots {
            for condition in [Condition::Clean, Condition::Adversarial] {
                for calibration in CalibrationKind::ALL {
                    // per seed, the unweighted mean over member categories
                    let per_seed: Vec<[f64; 9]> = cfg
                        .seeds
                        .iter()
                        .map(|&seed| {
                            let mut acc = [0.0; 9];
                            for m in &members {
                                let row = lookup(m, shot, seed).row(condition, calibration).expect("complete cell");
                                for (a, v) in acc.iter_mut().zip(row.metrics.values()) {
                                    *a += v;
                                }
                            }
                            acc.map(|a| a / members.len() as f64)
                        })
                        .collect();
                    let (mean, std) = metric_maps(&per_seed);
                    for (name, s) in &std {
                        if *s >= SEED_STD_WARNING {
                            warnings.push(format!(
                                "{group} k={shot} {condition} {}: seed std of {name} is {s}",
                                calibration.as_str()
                            ));
                        }
                    }
                    summary.push(SummaryRow {
                        category: group.clone(),
                        shot,
                        condition,
                        calibration,
                        seeds: cfg.seeds.len(),
                        mean,
                        std,
                    });
                }
            }
            for calibration in CalibrationKind::ALL {
                let per_seed: Vec<f64> = cfg
                    .seeds
                    .iter()
                    .map(|&seed| {
                        members
                            .iter()
                            .map(|m| lookup(m, shot, seed).entropy_delta(calibration).expect("complete cell"))
                            .sum::<f64>()
                            / members.len() as f64
                    })
                    .collect();
                let (mean, std) = mean_std(&per_seed).unwrap_or((f64::NAN, f64::NAN));
                entropy_delta_summary.push(EntropyDeltaSummary {
                    category: group.clone(),
                    shot,
                    calibration,
                    mean,
                    std,
                });
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    RunReport {
        categories,
        shots: cfg.shots.clone(),
        seeds: cfg.seeds.clone(),
        epsilon,
        ece_bins: cfg.ece_bins,
        cells,
        summary,
        entropy_delta,
        entropy_delta_summary,
        warnings,
    }
}
