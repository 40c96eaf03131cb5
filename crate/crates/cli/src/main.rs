//! `dsv`: batch front end for training, DSV extraction and evaluation runs.

// stdout writes ignore a closed pipe (`dsv ... | head`)
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! sayln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A failure with a machine-readable code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

pub fn fail(code: &'static str, message: impl Into<String>) -> anyhow::Error {
    CliError {
        code,
        message: message.into(),
    }
    .into()
}

fn error_code(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<CliError>() {
        c.code
    } else if let Some(c) = e.downcast_ref::<dsv_core::Error>() {
        c.code()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "internal"
    }
}

#[derive(Parser, Debug)]
#[command(name = "dsv", version, about = "Train models, extract deep support vectors and evaluate them", after_help = config::key_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the `mode` key
    #[arg(long, global = true, value_parser = ["synth", "select"])]
    mode: Option<String>,
    /// Overrides the `mask` key
    #[arg(long, global = true)]
    mask: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and test datasets
    GenData,
    /// Pretrain a model; writes the checkpoint and a training log
    Train,
    /// Synthesize or select DSVs from a checkpoint
    Extract,
    /// Print the condition report of a checkpoint and DSV set
    CheckKkt,
    /// Compare hinge training, the SVM oracle and DeepKKT on a linear model
    SvmCompare,
    /// Retrain from one sample per class and report test accuracy
    DistillEval,
    /// Flip rates of images mixed with DSVs versus real images
    MixEval,
    /// Primal-only versus stationarity-only synthesis
    Ablate,
    /// Cosine between per-step gradients and the final gradient
    GradTrace,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cli.common),
        Command::Train => commands::train(&cli.common),
        Command::Extract => commands::extract(&cli.common),
        Command::CheckKkt => commands::check_kkt(&cli.common),
        Command::SvmCompare => commands::svm_compare(&cli.common),
        Command::DistillEval => commands::distill_eval(&cli.common),
        Command::MixEval => commands::mix_eval(&cli.common),
        Command::Ablate => commands::ablate(&cli.common),
        Command::GradTrace => commands::grad_trace(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {message}", error_code(&e));
            ExitCode::from(1)
        }
    }
}
