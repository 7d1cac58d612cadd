use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use wxrestore::data::{load_image, Dataset};
use wxrestore::{Error, Result, Tensor};

use crate::ConfigArg;

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset root to create.
    #[arg(long, short)]
    out: PathBuf,
    /// Directory of clean PNGs; procedural scenes are used when omitted.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
}

fn clean_images(dir: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| Ok((p.file_stem().unwrap().to_string_lossy().into_owned(), load_image(p)?)))
        .collect()
}

pub fn run(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = args.config.load(seed)?;
    let clean = match &args.clean_dir {
        Some(d) => clean_images(d)?,
        None => cfg.synth.procedural(),
    };
    let (train, val) = cfg.synth.build(&clean)?;
    train.save(&args.out, "train")?;
    if !val.is_empty() {
        val.save(&args.out, "val")?;
    }
    for (split, ds) in [("train", &train), ("val", &val)] {
        let tags: Vec<String> = Dataset::tag_counts(ds).iter().map(|(k, n)| format!("{k}={n}")).collect();
        println!("{split}: {} pairs ({})", ds.len(), tags.join(", "));
    }
    Ok(())
}
