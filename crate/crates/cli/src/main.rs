//! Command-line driver: dataset generation, folding, training, evaluation
//! and prediction.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rnaformer",
    about = "Axial-attention RNA secondary-structure laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic-family dataset with an inter-family split.
    Generate {
        /// Number of families to sample.
        #[arg(long)]
        families: usize,
        /// Members per family.
        #[arg(long)]
        members: usize,
        #[arg(long, default_value_t = 20)]
        min_len: usize,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        #[arg(long, default_value_t = 0.1)]
        mutation_rate: f64,
        /// Families reserved for validation.
        #[arg(long, default_value_t = 25)]
        valid_families: usize,
        /// Families reserved for testing.
        #[arg(long, default_value_t = 30)]
        test_families: usize,
        /// Fraction of families drawn from the short length range.
        #[arg(long)]
        short_frac: Option<f64>,
        /// Boundary length of the short range.
        #[arg(long)]
        short_cutoff: Option<usize>,
        /// Minimum hairpin loop used by the folding oracle.
        #[arg(long, default_value_t = 3)]
        min_loop: usize,
        /// Additionally reject training sequences within this identity of
        /// any validation/test sequence.
        #[arg(long)]
        identity_cutoff: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold FASTA records with the maximum-pairing oracle.
    Fold {
        #[arg(long, value_name = "FASTA")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_loop: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        /// JSON config with sections model/train/data; missing keys default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory holding train.tsv and valid.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from <out>/last.ckpt.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// Stop after this many completed steps (controlled interrupt).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate checkpoints on a dataset split.
    Eval {
        /// Checkpoint path; repeat for a multi-run aggregate.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Dataset directory or a single TSV file.
        #[arg(long)]
        data: PathBuf,
        /// Which split file to use when --data is a directory.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 6)]
        cycles: usize,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
        /// Optional CSV of per-sample (length, F1) scatter data.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Predict structures for FASTA records.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FASTA")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        cycles: usize,
    },
}

/// Errors mapped onto the documented exit codes: 1 usage/config, 2 data,
/// 3 numerical abort.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numerical(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<rnaformer_core::fold::FoldError> for CliError {
    fn from(e: rnaformer_core::fold::FoldError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<rnaformer_core::data::DataError> for CliError {
    fn from(e: rnaformer_core::data::DataError) -> Self {
        use rnaformer_core::data::DataError;
        match e {
            DataError::Config { message } => Self::Config(message),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<rnaformer_core::model::ModelError> for CliError {
    fn from(e: rnaformer_core::model::ModelError) -> Self {
        use rnaformer_core::model::ModelError;
        match e {
            ModelError::Config { .. } => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<rnaformer_core::train::TrainError> for CliError {
    fn from(e: rnaformer_core::train::TrainError) -> Self {
        use rnaformer_core::train::TrainError;
        match e {
            TrainError::Config { message } => Self::Config(message),
            TrainError::NonFiniteLoss { .. } => Self::Numerical(e.to_string()),
            TrainError::StepOutOfRange { .. } => Self::Usage(e.to_string()),
            TrainError::EmptyDataset => Self::Data(e.to_string()),
            TrainError::Model(m) => Self::from(m),
            TrainError::Sink(io) => Self::Data(io.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Generate {
            families,
            members,
            min_len,
            max_len,
            mutation_rate,
            valid_families,
            test_families,
            short_frac,
            short_cutoff,
            min_loop,
            identity_cutoff,
            seed,
            out,
        } => commands::generate::run(commands::generate::Args {
            families,
            members,
            min_len,
            max_len,
            mutation_rate,
            valid_families,
            test_families,
            short_frac,
            short_cutoff,
            min_loop,
            identity_cutoff,
            seed,
            out,
        }),
        Command::Fold { r#in, out, min_loop } => commands::fold::run(&r#in, &out, min_loop),
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            stop_after,
        } => commands::train::run(config.as_deref(), &data, &out, seed, resume, stop_after),
        Command::Eval {
            checkpoint,
            data,
            split,
            cycles,
            report,
            scatter,
        } => commands::eval::run(&checkpoint, &data, &split, cycles, &report, scatter.as_deref()),
        Command::Predict {
            checkpoint,
            r#in,
            out,
            cycles,
        } => commands::predict::run(&checkpoint, &r#in, &out, cycles),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
