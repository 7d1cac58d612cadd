use std::fs;
use std::path::PathBuf;

use clap::Args;
use wxrestore::data::Dataset;
use wxrestore::eval::{evaluate, EvalReport, SampleScores, Scores};
use wxrestore::{Error, Result};

use crate::plot::bar_plot;
use crate::restore::load_model;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model to evaluate; without it the degraded inputs are scored as they are.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Write the table as TSV.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write a PSNR bar plot PNG.
    #[arg(long)]
    plot: Option<PathBuf>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let data = Dataset::load(&args.data, &args.split)?;
    if data.is_empty() {
        return Err(Error::Validation(format!("{} split of {} is empty", args.split, args.data.display())));
    }
    let report = match &args.checkpoint {
        Some(ck) => {
            let (net, params) = load_model(ck)?;
            evaluate(&net, &params, &data)?
        }
        None => {
            let samples = data
                .samples
                .iter()
                .map(|s| {
                    let d = Scores::of(&s.sample.degraded, &s.sample.clean)?;
                    Ok(SampleScores { name: s.name.clone(), kind: s.sample.kind, restored: d, degraded: d })
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport::from_samples(samples)?
        }
    };
    print!("{report}");
    if let Some(p) = &args.table {
        fs::write(p, report.to_tsv()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    if let Some(p) = &args.plot {
        bar_plot(&report).save(p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
    }
    Ok(())
}
