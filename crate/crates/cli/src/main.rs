//! `fsad`: command-line front end for the few-shot anomaly detection harness.
//!
//! Failures exit nonzero and print `{"error": ..., "kind": ...}` on stderr.

mod commands;
mod scores;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsad_core::Error;

#[derive(Parser)]
#[command(name = "fsad", version, about = "Few-shot anomaly detection with FGSM robustness and Platt calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a TOML config and write the report files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Memory-bank operations.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// Score query images against a memory bank.
    Score(ScoreArgs),
    /// Adversarial attacks.
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },
    /// Platt calibration.
    Calibrate {
        #[command(subcommand)]
        command: CalibrateCommand,
    },
    /// Compute metrics for a score CSV (`id,score,label[,probability]`).
    Metrics {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Column holding probabilities; `score` clamped to [0, 1] when absent.
        #[arg(long)]
        probability_column: Option<String>,
    },
    /// Print or re-emit a finished report.
    Report {
        /// Directory containing `metrics.json`.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = fsad_core::runner::ALL_CATEGORIES)]
        category: String,
        /// Rewrite every report file into this directory.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Write the synthetic dataset in MVTec layout plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        categories: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub encoder_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
}

/// Where embeddings come from: an embedding store, or images through the toy
/// encoder.
#[derive(Args, Clone)]
pub struct SourceArgs {
    /// PEB1 embedding file.
    #[arg(long, conflicts_with = "images")]
    pub store: Option<PathBuf>,
    /// Record ids to read from the store.
    #[arg(long = "id", requires = "store")]
    pub ids: Vec<String>,
    /// Image files encoded with the toy encoder; ids are file stems.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub toy: ToyArgs,
}

#[derive(Subcommand)]
enum BankCommand {
    /// Encode support images and save their patches as a PEB1 bank file.
    Build {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Bank file written by `bank build`.
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_enum, default_value_t = ConditionArg::Clean)]
    pub condition: ConditionArg,
    /// Output CSV (`id,condition,label,score`); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one patch score CSV per query into this directory.
    #[arg(long)]
    pub patch_maps: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ConditionArg {
    Clean,
    Adversarial,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeSplit {
    /// Fit on the calibration side of the split, attack the evaluation side.
    Calibration,
    /// Fit on and attack every test image.
    Test,
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Single-step FGSM through a linear patch probe.
    Fgsm(FgsmArgs),
}

#[derive(Args)]
pub struct FgsmArgs {
    /// Dataset manifest (toy path) with test images and masks.
    #[arg(long, conflicts_with = "store")]
    pub manifest: Option<PathBuf>,
    /// PEB1 file whose adversarial records are copied to `--out`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long, default_value = "8/255")]
    pub epsilon: String,
    #[arg(long, value_enum, default_value_t = ProbeSplit::Calibration)]
    pub probe_split: ProbeSplit,
    #[arg(long, default_value_t = 0.2)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Output directory for images and `manifest.csv`, or output PEB1 file
    /// with `--store`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Fit Platt parameters on the calibration side of a stratified split.
    Fit {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        split_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map scores to probabilities and entropies.
    Apply {
        #[arg(long)]
        calibrator: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> fsad_core::Result<()> {
    match cli.command {
        Command::Run { config, output } => commands::run(&config, output),
        Command::Bank {
            command: BankCommand::Build { source, out },
        } => commands::bank_build(&source, &out),
        Command::Score(args) => commands::score(&args),
        Command::Attack {
            command: AttackCommand::Fgsm(args),
        } => commands::attack_fgsm(&args),
        Command::Calibrate { command } => match command {
            CalibrateCommand::Fit {
                scores,
                split_fraction,
                seed,
                out,
            } => commands::calibrate_fit(&scores, split_fraction, seed, &out),
            CalibrateCommand::Apply { calibrator, scores, out } => {
                commands::calibrate_apply(&calibrator, &scores, out.as_deref())
            }
        },
        Command::Metrics {
            scores,
            bins,
            probability_column,
        } => commands::metrics(&scores, bins, probability_column.as_deref()),
        Command::Report { dir, category, emit } => commands::report(&dir, &category, emit.as_deref()),
        Command::Synth { out, categories, seed } => commands::synth(&out, categories, seed),
    }
}

fn fail(message: String, kind: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": message, "kind": kind }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(e.to_string().trim().to_string(), "usage"),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_chain(&e), e.kind()),
    }
}

fn error_chain(e: &Error) -> String {
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        source = s.source();
    }
    msg
}
