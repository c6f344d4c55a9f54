//! Few-shot anomaly detection over patch embeddings.
//!
//! The pipeline scores query images against a memory bank of nominal support
//! patches (nearest-neighbor cosine distance, mean of the top 1% patch
//! scores), crafts single-step FGSM perturbations through a linear patch
//! probe, calibrates raw scores with Platt scaling, and evaluates detection,
//! calibration and predictive-entropy metrics.
//!
//! Module map:
//!
//! - [`encoder`]: image and patch-embedding types, the toy linear encoder and
//!   the `PEB1` embedding store.
//! - [`memory_bank`]: bank construction, patch scores and image aggregation.
//! - [`probe_attack`]: patch masks, linear probe, BCE loss and FGSM.
//! - [`calibration`]: stratified split, Platt fitting, entropy.
//! - [`metrics`]: AUROC, AP, F1-max, G-mean, ECE, NLL, Brier.
//! - [`dataset`]: MVTec-AD layout, CSV manifests, preprocessing, synthetic data.
//! - [`runner`]: experiment orchestration and report files.

pub mod calibration;
pub mod dataset;
pub mod encoder;
mod error;
pub mod memory_bank;
pub mod metrics;
pub mod probe_attack;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
