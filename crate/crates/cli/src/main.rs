//! `movepred`: dataset building, training, evaluation, backtesting and
//! significance tests for the hybrid movement classifier.

mod commands;
mod config;
mod output;

use clap::{ArgAction, Args, Parser, Subcommand};
use config::FileConfig;
use movepred_core::ErrorKind;
use output::OutDir;
use std::path::PathBuf;
use std::process::ExitCode;

pub const DEFAULT_SEED: u64 = 42;

/// Failures raised by the CLI itself, mapped onto exit codes like core errors.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

#[derive(Debug, Parser)]
#[command(name = "movepred", version, about, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "MOVEPRED_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align prices and tweets, label days and write the dataset archive.
    BuildDataset(commands::dataset::BuildDatasetArgs),
    /// Train a model on the training split.
    Train(commands::model::TrainArgs),
    /// Accuracy, sensitivity and specificity of a checkpoint on one split.
    Evaluate(commands::model::EvaluateArgs),
    /// Write per-day scores of a checkpoint.
    Predict(commands::model::PredictArgs),
    /// Simulate a strategy on one ticker's scores.
    Backtest(commands::trading::BacktestArgs),
    /// Monte Carlo portfolios over per-ticker backtests.
    Mc(commands::trading::McArgs),
    /// SMA or MACD crossover baseline and its backtest.
    Baseline(commands::trading::BaselineArgs),
    /// Welch t-test between two return series.
    Ttest(commands::trading::TtestArgs),
    /// Finite-difference gradient checks over every op and model path.
    Gradcheck,
}

/// Settings shared by every command after config resolution.
pub struct Context {
    pub file: FileConfig,
    pub seed: u64,
    pub out: OutDir,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    let seed = config::pick(cli.global.seed, file.seed, DEFAULT_SEED);
    let out_path = config::pick(cli.global.out, file.out.clone(), PathBuf::from(output::DEFAULT_OUT));
    let ctx = Context {
        file,
        seed,
        out: OutDir::create(out_path)?,
    };
    match cli.command {
        Command::BuildDataset(a) => commands::dataset::build_dataset(&ctx, a),
        Command::Train(a) => commands::model::train(&ctx, a),
        Command::Evaluate(a) => commands::model::evaluate(&ctx, a),
        Command::Predict(a) => commands::model::predict(&ctx, a),
        Command::Backtest(a) => commands::trading::backtest(&ctx, a),
        Command::Mc(a) => commands::trading::mc(&ctx, a),
        Command::Baseline(a) => commands::trading::baseline(&ctx, a),
        Command::Ttest(a) => commands::trading::ttest(&ctx, a),
        Command::Gradcheck => commands::check::gradcheck(&ctx),
    }
}

/// 1 usage, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
                CliError::Numerical(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<movepred_core::Error>() {
            return match e.kind() {
                ErrorKind::Contract => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            };
        }
    }
    2
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message before them.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
