mod eval;
mod plot;
mod restore;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wxrestore::config::Config;
use wxrestore::Error;

/// All-in-one adverse weather restoration: synthesize data, train, restore, evaluate.
#[derive(Debug, Parser)]
#[command(name = "wxrestore", version)]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a paired degraded/clean dataset.
    Synth(synth::SynthArgs),
    /// Train a model; logs `step, l1, cor, total, lr` lines.
    Train(train::TrainArgs),
    /// Restore images with a trained checkpoint.
    Restore(restore::RestoreArgs),
    /// Per-degradation PSNR/SSIM table of a dataset split.
    Eval(eval::EvalArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self, seed: Option<u64>) -> Result<Config, Error> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => synth::run(a, cli.seed),
        Command::Train(a) => train::run(a, cli.seed),
        Command::Restore(a) => restore::run(a),
        Command::Eval(a) => eval::run(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
