use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsad_core::calibration::{fit_platt, predictive_entropy, split_calibration, Calibrator, LabeledScores};
use fsad_core::dataset::{
    by_category, generate_synthetic, load_image, load_manifest, load_samples, save_image, write_manifest,
    write_mvtec_layout, Sample, Split, SyntheticConfig,
};
use fsad_core::encoder::{Condition, EmbeddingStore, PatchEmbeddings, PatchEncoder, StoreMetadata, ToyEncoder};
use fsad_core::memory_bank::MemoryBank;
use fsad_core::metrics::MetricReport;
use fsad_core::probe_attack::{derive_patch_mask, fgsm_attack, fit_probe, parse_epsilon, AttackConfig, ProbeConfig};
use fsad_core::runner::{
    emit_report, format_summary, load_report, run_experiment, uncalibrated_probability, ExperimentConfig,
    ALL_CATEGORIES,
};
use fsad_core::{Error, Result};

use crate::scores::{csv_writer, flush, label_text, read_scores, require_labels};
use crate::{ConditionArg, FgsmArgs, ProbeSplit, ScoreArgs, SourceArgs, ToyArgs};

fn condition(arg: ConditionArg) -> Condition {
    match arg {
        ConditionArg::Clean => Condition::Clean,
        ConditionArg::Adversarial => Condition::Adversarial,
    }
}

fn toy_encoder(args: &ToyArgs) -> Result<ToyEncoder> {
    ToyEncoder::new(args.patch_size, args.dim, args.encoder_seed)
}

fn toy_metadata(args: &ToyArgs) -> StoreMetadata {
    StoreMetadata {
        backbone: "toy-linear".into(),
        resolution: args.resolution as u32,
        patch_size: args.patch_size as u32,
        epsilon: None,
        export_seed: Some(args.encoder_seed),
    }
}

struct Embedded {
    id: String,
    label: Option<bool>,
    embeddings: PatchEmbeddings,
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_source(source: &SourceArgs, cond: Condition) -> Result<(StoreMetadata, Vec<Embedded>)> {
    if let Some(path) = &source.store {
        let store = EmbeddingStore::load(path)?;
        let ids: Vec<String> = if source.ids.is_empty() {
            store
                .records()
                .iter()
                .filter(|r| r.condition == cond)
                .map(|r| r.id.clone())
                .collect()
        } else {
            source.ids.clone()
        };
        let items = ids
            .into_iter()
            .map(|id| {
                let embeddings = store.get(&id, cond)?;
                let label = store.record(&id, cond).map(|r| r.anomalous);
                Ok(Embedded { id, label, embeddings })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((store.metadata().clone(), items));
    }
    if source.images.is_empty() {
        return Err(Error::InvalidArgument("give either --store or --images".into()));
    }
    let encoder = toy_encoder(&source.toy)?;
    let items = source
        .images
        .iter()
        .map(|path| {
            let image = load_image(path, source.toy.resolution)?;
            Ok(Embedded {
                id: file_stem(path),
                label: None,
                embeddings: encoder.encode(&image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((toy_metadata(&source.toy), items))
}

pub fn run(config: &Path, output: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(out) = output {
        cfg.output_dir = out;
    }
    let out = cfg.output_dir.clone();
    let report = run_experiment(cfg)?;
    emit_report(&report, &out)?;
    print!("{}", format_summary(&report, ALL_CATEGORIES));
    println!("report written to {}", out.display());
    Ok(())
}

pub fn bank_build(source: &SourceArgs, out: &Path) -> Result<()> {
    let (metadata, items) = load_source(source, Condition::Clean)?;
    let bank = MemoryBank::build(items.iter().map(|e| (e.id.as_str(), &e.embeddings)))?;
    let first = &items[0].embeddings;
    let (rows, cols) = first.grid();
    let mut store = EmbeddingStore::new(metadata, rows, cols, first.dim())?;
    for e in &items {
        store.insert_embeddings(e.id.clone(), false, Condition::Clean, &e.embeddings)?;
    }
    store.save(out)?;
    println!(
        "bank of {} patches (D = {}) from {} images written to {}",
        bank.len(),
        bank.dim(),
        items.len(),
        out.display()
    );
    Ok(())
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let bank_store = EmbeddingStore::load(&args.bank)?;
    let support: Vec<(String, PatchEmbeddings)> = bank_store
        .records()
        .iter()
        .filter(|r| r.condition == Condition::Clean)
        .map(|r| Ok((r.id.clone(), bank_store.get(&r.id, Condition::Clean)?)))
        .collect::<Result<_>>()?;
    let bank = MemoryBank::build(support.iter().map(|(id, e)| (id.as_str(), e)))?;
    let cond = condition(args.condition);
    let (_, queries) = load_source(&args.source, cond)?;
    if let Some(dir) = &args.patch_maps {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let mut w = csv_writer(args.out.as_deref())?;
    w.write_record(["id", "condition", "label", "score"])?;
    for q in &queries {
        let map = bank.patch_scores(&q.embeddings)?;
        if let Some(dir) = &args.patch_maps {
            let name: String = q.id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            map.save_csv(dir.join(format!("{name}__{cond}.csv")))?;
        }
        w.write_record([
            q.id.clone(),
            cond.to_string(),
            label_text(q.label),
            map.aggregate_meantop1().to_string(),
        ])?;
    }
    flush(w)
}

pub fn attack_fgsm(args: &FgsmArgs) -> Result<()> {
    let epsilon = parse_epsilon(&args.epsilon)?;
    if let Some(path) = &args.store {
        let store = EmbeddingStore::load(path)?;
        if !store.has_condition(Condition::Adversarial) {
            return Err(Error::MissingAdversarial(format!(
                "{} holds no adversarial records and its encoder has no gradients",
                path.display()
            )));
        }
        let (rows, cols) = store.grid();
        let mut out = EmbeddingStore::new(store.metadata().clone(), rows, cols, store.dim())?;
        for r in store.records().iter().filter(|r| r.condition == Condition::Adversarial) {
            out.insert(r.clone())?;
        }
        out.save(&args.out)?;
        println!("copied {} adversarial records to {}", out.len(), args.out.display());
        return Ok(());
    }
    let manifest = args
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("give either --manifest or --store".into()))?;
    let encoder = toy_encoder(&args.toy)?;
    let attack = AttackConfig::new(epsilon)?;
    let mut groups = by_category(load_manifest(manifest)?);
    if let Some(cat) = &args.category {
        let only = groups
            .remove(cat)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category `{cat}`")))?;
        groups = BTreeMap::from([(cat.clone(), only)]);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let mut written: Vec<Sample> = Vec::new();
    let mut max_delta = 0.0f64;
    for (category, samples) in groups {
        let test: Vec<Sample> = samples.into_iter().filter(|s| s.split == Split::Test).collect();
        let loaded = load_samples(&test, args.toy.resolution)?;
        let labels = LabeledScores::new(
            test.iter().map(|s| s.id.clone()).collect(),
            vec![0.0; test.len()],
            test.iter().map(|s| s.label).collect(),
        )?;
        let (fit_on, targets) = match args.probe_split {
            ProbeSplit::Calibration => {
                let split = split_calibration(&labels, args.split_fraction, args.seed)?;
                (split.calibration_indices, split.evaluation_indices)
            }
            ProbeSplit::Test => ((0..test.len()).collect(), (0..test.len()).collect()),
        };
        let embeddings: Vec<PatchEmbeddings> = loaded.iter().map(|l| encoder.encode(&l.image)).collect::<Result<_>>()?;
        let masks = loaded
            .iter()
            .map(|l| derive_patch_mask(&l.mask, args.toy.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let pool: Vec<_> = fit_on.iter().map(|&i| (&embeddings[i], &masks[i])).collect();
        let probe = fit_probe(&pool, &ProbeConfig::default())?;
        for &i in &targets {
            let clean = &loaded[i].image;
            let adv = fgsm_attack(&encoder, &probe, clean, &masks[i], &attack)?;
            for (a, b) in adv.pixels().iter().zip(clean.pixels()) {
                max_delta = max_delta.max((a - b).abs());
            }
            let name: String = test[i].id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            let path = args.out.join(format!("{name}.png"));
            save_image(&adv, &path)?;
            written.push(Sample {
                image: path,
                ..test[i].clone()
            });
        }
        log::info!("{category}: probe fitted on {} images", fit_on.len());
    }
    write_manifest(args.out.join("manifest.csv"), &written)?;
    println!(
        "{} adversarial images written to {} (epsilon {epsilon}, max |delta| {max_delta})",
        written.len(),
        args.out.display()
    );
    Ok(())
}

pub fn calibrate_fit(scores: &Path, split_fraction: f64, seed: u64, out: &Path) -> Result<()> {
    let rows = read_scores(scores, None)?;
    let labels = require_labels(&rows)?;
    let data = LabeledScores::new(
        rows.iter().map(|r| r.id.clone()).collect(),
        rows.iter().map(|r| r.score).collect(),
        labels,
    )?;
    let split = split_calibration(&data, split_fraction, seed)?;
    for w in &split.warnings {
        log::warn!("calibration split: {w:?}");
    }
    let params = fit_platt(&split.calibration)?;
    if params.a <= 0.0 {
        log::warn!("fitted Platt slope {} is not positive", params.a);
    }
    let calibrator = Calibrator {
        a: params.a,
        b: params.b,
        seed,
        split_fraction,
    };
    calibrator.save(out)?;
    println!("{}", serde_json::to_string(&calibrator)?);
    Ok(())
}

pub fn calibrate_apply(calibrator: &Path, scores: &Path, out: Option<&Path>) -> Result<()> {
    let params = Calibrator::load(calibrator)?.params();
    let rows = read_scores(scores, None)?;
    let mut w = csv_writer(out)?;
    w.write_record(["id", "label", "score", "probability", "entropy"])?;
    for r in &rows {
        let p = params.apply(r.score);
        w.write_record([
            r.id.clone(),
            label_text(r.label),
            r.score.to_string(),
            p.to_string(),
            predictive_entropy(p).to_string(),
        ])?;
    }
    flush(w)
}

pub fn metrics(scores: &Path, bins: usize, probability_column: Option<&str>) -> Result<()> {
    let rows = read_scores(scores, probability_column)?;
    let labels = require_labels(&rows)?;
    let raw: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let probs: Vec<f64> = rows
        .iter()
        .map(|r| r.probability.unwrap_or_else(|| uncalibrated_probability(r.score)))
        .collect();
    let (report, reliability) = MetricReport::compute(&raw, &probs, &labels, bins)?;
    let out = serde_json::json!({ "metrics": report, "reliability": reliability });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn report(dir: &Path, category: &str, emit: Option<&Path>) -> Result<()> {
    let report = load_report(dir)?;
    if !report.summary.iter().any(|r| r.category == category) {
        return Err(Error::InvalidArgument(format!("report has no category `{category}`")));
    }
    print!("{}", format_summary(&report, category));
    if let Some(target) = emit {
        emit_report(&report, target)?;
        println!("report written to {}", target.display());
    }
    Ok(())
}

pub fn synth(out: &Path, categories: usize, seed: u64) -> Result<()> {
    let cfg = SyntheticConfig {
        categories,
        seed,
        ..SyntheticConfig::default()
    };
    let loaded = generate_synthetic(&cfg)?;
    write_mvtec_layout(out, &loaded)?;
    let relative: Vec<Sample> = loaded.into_iter().map(|l| l.sample).collect();
    write_manifest(out.join("manifest.csv"), &relative)?;
    println!("{} images in {} categories written to {}", relative.len(), categories, out.display());
    Ok(())
}
