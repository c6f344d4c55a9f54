//! Experiment orchestration: support sampling, scoring, attack, calibration
//! and metrics for every (category, shot, seed) cell, plus report files.

mod config;
mod experiment;
mod report;

pub use config::{BackendKind, DatasetKind, Epsilon, ExperimentConfig};
pub use experiment::{
    entropy_histogram, run_experiment, uncalibrated_probability, CalibrationKind, CellReport, ConditionReport,
    EntropyDeltaRow, EntropyDeltaSummary, Experiment, PatchMapRecord, RunReport, SampleScore, SummaryRow, ALL_CATEGORIES,
    SEED_STD_WARNING,
};
pub use report::{
    emit_report, format_summary, load_report, write_metrics_csv, ENTROPY_DELTA_CSV, ENTROPY_HIST_CSV, METRICS_CSV,
    METRICS_JSON, PATCH_SCORES_DIR, RELIABILITY_CSV, SCORES_CSV, SUMMARY_CSV,
};
