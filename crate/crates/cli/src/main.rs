//! `binens`: command-line driver for the boosted binary-encoder pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use binens::distill::KdStrategy;
use binens::Error;

#[derive(Parser, Debug)]
#[command(name = "binens", version, about = "Boosted ensembles of binarized transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Pipeline config (TOML). Desk-scale defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation fan-out.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full-precision teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a half-width ternary student and split it into a binary model.
    DistillSplit {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint from `train-teacher`.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Boost fine-tuned copies of a split checkpoint into an ensemble.
    Boost {
        #[command(flatten)]
        common: Common,
        /// Split checkpoint from `distill-split`.
        #[arg(long)]
        split: PathBuf,
        /// Teacher checkpoint; required for KD strategies B and C.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_parser = parse_kd)]
        kd: Option<KdStrategy>,
        #[arg(long)]
        ensemble_size: Option<usize>,
    },
    /// Accuracy, Matthews correlation and confusion matrix.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// TSV dataset; the configured dev set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Accuracy under Gaussian embedding noise over several rounds.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        noise_variance: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Closed-form model size and FLOPs.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Use BERT-base geometry instead of the configured student.
        #[arg(long)]
        bert_base: bool,
        /// Bit setting for `--bert-base`: fp, 1-1-4 or 2-2-4.
        #[arg(long, default_value = "1-1-4")]
        quant: String,
        #[arg(long)]
        ensemble_size: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Every stage end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kd)]
        kd: Option<KdStrategy>,
        #[arg(long)]
        ensemble_size: Option<usize>,
        #[arg(long)]
        noise_variance: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
    },
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct Target {
    /// A single checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// An `ensemble.toml` manifest.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
}

fn parse_kd(s: &str) -> Result<KdStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 2: config or input, 3: degenerate training, 4: internal assertion.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Degenerate(_) => 3,
        Error::Assertion(_) | Error::Shape { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let level = std::env::var("BINENS_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp_millis().init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { common } => commands::train_teacher(&common),
        Command::DistillSplit { common, teacher } => commands::distill_split(&common, &teacher),
        Command::Boost { common, split, teacher, kd, ensemble_size } => {
            commands::boost(&common, &split, teacher.as_deref(), kd, ensemble_size)
        }
        Command::Eval { common, target, data } => commands::eval(&common, &target, data.as_deref()),
        Command::Robustness { common, target, data, noise_variance, rounds } => {
            commands::robustness(&common, &target, data.as_deref(), noise_variance, rounds)
        }
        Command::Cost { common, bert_base, quant, ensemble_size, seq_len } => {
            commands::cost(&common, bert_base, &quant, ensemble_size, seq_len)
        }
        Command::Pipeline { common, kd, ensemble_size, noise_variance, rounds } => {
            commands::pipeline(&common, kd, ensemble_size, noise_variance, rounds)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
