use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use wxrestore::checkpoint::Checkpoint;
use wxrestore::data::Dataset;
use wxrestore::train::Trainer;
use wxrestore::{Error, Result};

use crate::ConfigArg;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `train.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `train.output`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides `train.steps` (total, counted from step 0).
    #[arg(long)]
    steps: Option<u64>,
}

pub fn run(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = args.config.load(seed)?;
    if let Some(d) = args.data {
        cfg.train.data = d;
    }
    if let Some(o) = args.output {
        cfg.train.output = o;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let train = Dataset::load(&cfg.train.data, "train")?;
    if train.is_empty() {
        return Err(Error::Validation(format!("{} has no training pairs", cfg.train.data.display())));
    }
    let val_dir = Dataset::split_dir(&cfg.train.data, "val");
    let val = if val_dir.exists() { Some(Dataset::load(&cfg.train.data, "val")?) } else { None };
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let out = &cfg.train.output;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let log_path = out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let mut write_err = None;
    let res = trainer.run(&train, val.as_ref(), |event| {
        println!("{event}");
        if let Err(e) = writeln!(log, "{event}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(Error::Io { path: log_path, source: e });
    }
    res.map(|_| ())
}
