use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use wxrestore::checkpoint::Checkpoint;
use wxrestore::config::Config;
use wxrestore::data::{load_image, save_image};
use wxrestore::network::{Network, StageTrace};
use wxrestore::{Error, ParamStore, Result, Tensor};

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Write one grouping-mask PNG per stage plus a group-boundary sidecar.
    #[arg(long)]
    dump_masks: bool,
    /// Write the per-stage spectral prompt features as channel grids.
    #[arg(long)]
    dump_fs: bool,
    /// Images or directories of PNGs.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

pub fn load_model(path: &Path) -> Result<(Network, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = Config::from_toml(&ck.config)?;
    let (net, mut params) = Network::new::<f32>(cfg.model)?;
    ck.restore_params(&mut params)?;
    Ok((net, params))
}

fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            v.sort();
            out.extend(v);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Min-max normalization to `[0, 1]`; constant inputs map to zero.
fn normalize(v: &[f32]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.iter().map(|&x| (x as f64 - lo) / span).collect()
}

fn dump_masks(out: &Path, stem: &str, stages: &[StageTrace<f32>]) -> Result<()> {
    for (p, st) in stages.iter().enumerate() {
        let (h, w) = match &st.mask {
            Some(m) => (m.shape()[0], m.shape()[1]),
            None => (st.fs.shape()[0], st.fs.shape()[1]),
        };
        let values: Vec<f32> = match &st.mask {
            Some(m) => m.data().to_vec(),
            None => vec![1.0; h * w],
        };
        let img = Tensor::new(&[h, w, 1], normalize(&values))?;
        save_image(&out.join(format!("{stem}_mask{}.png", p + 1)), &img)?;
        let part = &st.partition;
        let mut side = String::from("group\ttokens\tmask_min\tmask_max\n");
        for m in 0..part.group_count() {
            let vals: Vec<f32> = part.group(m).iter().map(|&i| values[i]).collect();
            let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            side.push_str(&format!("{m}\t{}\t{lo}\t{hi}\n", vals.len()));
        }
        let path = out.join(format!("{stem}_mask{}_groups.tsv", p + 1));
        fs::write(&path, side).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

/// Tiles the channels of an `[H, W, C]` feature into a near-square grid,
/// each channel normalized on its own, with one-pixel gaps.
pub fn channel_grid(fs: &Tensor<f32>) -> Tensor<f64> {
    let (h, w, c) = fs.hwc();
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut grid = vec![0.0; gh * gw];
    for ch in 0..c {
        let plane: Vec<f32> = fs.data().iter().skip(ch).step_by(c).copied().collect();
        let n = normalize(&plane);
        let (oy, ox) = ((ch / cols) * (h + 1), (ch % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                grid[(oy + y) * gw + ox + x] = n[y * w + x];
            }
        }
    }
    Tensor::new(&[gh, gw, 1], grid).expect("grid size")
}

pub fn run(args: RestoreArgs) -> Result<()> {
    let (net, params) = load_model(&args.checkpoint)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let inputs = expand(&args.inputs)?;
    if inputs.is_empty() {
        return Err(Error::Validation("no input images".into()));
    }
    for path in inputs {
        let img = load_image(&path)?;
        let (restored, stages) = net.restore(&params, &img)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        save_image(&args.out.join(format!("{stem}.png")), &restored)?;
        if args.dump_masks {
            dump_masks(&args.out, &stem, &stages)?;
        }
        if args.dump_fs {
            for (p, st) in stages.iter().enumerate() {
                save_image(&args.out.join(format!("{stem}_fs{}.png", p + 1)), &channel_grid(&st.fs))?;
            }
        }
        println!("{} -> {}", path.display(), args.out.join(format!("{stem}.png")).display());
    }
    Ok(())
}
