use std::path::{Path, PathBuf};

use super::experiment::RunReport;
use crate::metrics::MetricReport;
use crate::{Error, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const RELIABILITY_CSV: &str = "reliability_bins.csv";
pub const ENTROPY_HIST_CSV: &str = "entropy_hist.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const ENTROPY_DELTA_CSV: &str = "entropy_delta.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const PATCH_SCORES_DIR: &str = "patch_scores";

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes the metric rows, one per (category, shot, seed, condition,
/// calibration).
pub fn write_metrics_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["category", "shot", "seed", "condition", "calibration"];
    header.extend(MetricReport::FIELDS);
    w.write_record(&header)?;
    for cell in &report.cells {
        for row in &cell.rows {
            let mut record = vec![
                cell.category.clone(),
                cell.shot.to_string(),
                cell.seed.to_string(),
                row.condition.to_string(),
                row.calibration.as_str().to_string(),
                row.metrics.n.to_string(),
            ];
            record.extend(row.metrics.values().iter().map(f64::to_string));
            w.write_record(&record)?;
        }
    }
    finish(w, path)
}

/// Writes every report file into `dir` and returns the paths written.
pub fn emit_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let patch_dir = dir.join(PATCH_SCORES_DIR);
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let mut written = Vec::new();

    let path = dir.join(METRICS_CSV);
    write_metrics_csv(report, &path)?;
    written.push(path);

    let path = dir.join(METRICS_JSON);
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = dir.join(RELIABILITY_CSV);
    let mut w = writer(&path)?;
    w.write_record([
        "category", "shot", "seed", "condition", "calibration", "bin", "lower", "upper", "count", "confidence",
        "accuracy",
    ])?;
    for cell in &report.cells {
        for row in &cell.rows {
            for (m, bin) in row.reliability.bins.iter().enumerate() {
                w.write_record([
                    cell.category.clone(),
                    cell.shot.to_string(),
                    cell.seed.to_string(),
                    row.condition.to_string(),
                    row.calibration.as_str().to_string(),
                    m.to_string(),
                    bin.lower.to_string(),
                    bin.upper.to_string(),
                    bin.count.to_string(),
                    bin.confidence.to_string(),
                    bin.accuracy.to_string(),
                ])?;
            }
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join(ENTROPY_HIST_CSV);
    let mut w = writer(&path)?;
    w.write_record([
        "category", "shot", "seed", "condition", "calibration", "bin", "lower", "upper", "count",
    ])?;
    for cell in &report.cells {
        for row in &cell.rows {
            let bins = row.entropy_histogram.len();
            for (m, count) in row.entropy_histogram.iter().enumerate() {
                let edge = |i: usize| std::f64::consts::LN_2 * i as f64 / bins as f64;
                w.write_record([
                    cell.category.clone(),
                    cell.shot.to_string(),
                    cell.seed.to_string(),
                    row.condition.to_string(),
                    row.calibration.as_str().to_string(),
                    m.to_string(),
                    edge(m).to_string(),
                    edge(m + 1).to_string(),
                    count.to_string(),
                ])?;
            }
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join(SUMMARY_CSV);
    let mut w = writer(&path)?;
    w.write_record(["category", "shot", "condition", "calibration", "seeds", "metric", "mean", "std"])?;
    for row in &report.summary {
        for (name, mean) in &row.mean {
            w.write_record([
                row.category.clone(),
                row.shot.to_string(),
                row.condition.to_string(),
                row.calibration.as_str().to_string(),
                row.seeds.to_string(),
                name.clone(),
                mean.to_string(),
                row.std[name].to_string(),
            ])?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join(ENTROPY_DELTA_CSV);
    let mut w = writer(&path)?;
    w.write_record(["category", "shot", "seed", "calibration", "clean_mean", "adversarial_mean", "delta"])?;
    for row in &report.entropy_delta {
        w.write_record([
            row.category.clone(),
            row.shot.to_string(),
            row.seed.to_string(),
            row.calibration.as_str().to_string(),
            row.clean_mean.to_string(),
            row.adversarial_mean.to_string(),
            row.delta.to_string(),
        ])?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join(SCORES_CSV);
    let mut w = writer(&path)?;
    w.write_record(["category", "shot", "seed", "id", "label", "clean", "adversarial"])?;
    for cell in &report.cells {
        for s in &cell.evaluation {
            w.write_record([
                cell.category.clone(),
                cell.shot.to_string(),
                cell.seed.to_string(),
                s.id.clone(),
                u8::from(s.label).to_string(),
                s.clean.to_string(),
                s.adversarial.to_string(),
            ])?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    for cell in &report.cells {
        for record in &cell.patch_maps {
            let name = format!(
                "{}__k{}__s{}__{}__{}.csv",
                sanitize(&cell.category),
                cell.shot,
                cell.seed,
                record.condition,
                sanitize(&record.id)
            );
            let path = patch_dir.join(name);
            record.map.save_csv(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads `metrics.json` from a report directory.
pub fn load_report(dir: impl AsRef<Path>) -> Result<RunReport> {
    let path = dir.as_ref().join(METRICS_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Plain-text table of the cross-category summary.
pub fn format_summary(report: &RunReport, category: &str) -> String {
    let metrics = ["auroc", "ap", "f1_max", "g_mean", "ece", "nll", "brier", "entropy_mean"];
    let mut out = format!("{:<6}{:<13}{:<14}", "shot", "condition", "calibration");
    for m in metrics {
        out.push_str(&format!("{m:>14}"));
    }
    out.push('\n');
    for row in report.summary.iter().filter(|r| r.category == category) {
        out.push_str(&format!(
            "{:<6}{:<13}{:<14}",
            row.shot,
            row.condition.as_str(),
            row.calibration.as_str()
        ));
        for m in metrics {
            out.push_str(&format!("{:>14}", format!("{:.4}±{:.4}", row.mean[m], row.std[m])));
        }
        out.push('\n');
    }
    for row in report.entropy_delta_summary.iter().filter(|r| r.category == category) {
        out.push_str(&format!(
            "entropy delta k={} {}: {:.4} ± {:.4}\n",
            row.shot,
            row.calibration.as_str(),
            row.mean,
            row.std
        ));
    }
    out
}
