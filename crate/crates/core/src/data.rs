//! 8-bit PNG image IO and the paired dataset layout
//! `root/{split}/{degraded,clean}/NAME.png` with a `manifest.tsv` of
//! `NAME<TAB>tag` lines next to the two image directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::degrade::{DegradationKind, PairedSample};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.tsv";
pub const DEGRADED_DIR: &str = "degraded";
pub const CLEAN_DIR: &str = "clean";

/// Reads a PNG (or any decodable image) as `[H, W, 3]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

fn to_u8<T: Real>(v: T) -> u8 {
    (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, 3]` or `[H, W, 1]` tensor as 8-bit PNG, clamping to `[0, 1]`.
pub fn save_image<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || !(s[2] == 3 || s[2] == 1) {
        return Err(Error::Dimension(format!("cannot write a {s:?} tensor as an image")));
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let res = if s[2] == 3 {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer size").save(path)
    } else {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer size").save(path)
    };
    res.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Rounds to the 8-bit grid, matching a save/load round trip.
pub fn quantize(img: &Tensor<f64>) -> Tensor<f64> {
    img.map(|v| to_u8(v) as f64 / 255.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedSample {
    pub name: String,
    pub sample: PairedSample,
}

/// In-memory paired dataset, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<NamedSample>,
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, DegradationKind>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tags = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::Validation(format!("{}:{}: expected NAME<TAB>tag", path.display(), i + 1)))?;
        tags.insert(name.to_string(), tag.trim().parse()?);
    }
    Ok(tags)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, sample: PairedSample) {
        self.samples.push(NamedSample { name: name.into(), sample });
    }

    pub fn split_dir(root: &Path, split: &str) -> PathBuf {
        root.join(split)
    }

    /// Loads every pair of `root/split`. Each degraded image needs a clean
    /// partner of the same name and size and a manifest entry.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let dir = Self::split_dir(root, split);
        let tags = read_manifest(&dir.join(MANIFEST))?;
        let listing = dir.join(DEGRADED_DIR);
        let mut names: Vec<String> = fs::read_dir(&listing)
            .map_err(|e| Error::io(&listing, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("png"))
                    .then(|| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                    .flatten()
            })
            .collect();
        names.sort();
        let mut out = Dataset::default();
        for name in names {
            let file = format!("{name}.png");
            let degraded = load_image(&dir.join(DEGRADED_DIR).join(&file))?;
            let clean = load_image(&dir.join(CLEAN_DIR).join(&file))?;
            if degraded.shape() != clean.shape() {
                return Err(Error::Validation(format!(
                    "{name}: degraded {:?} and clean {:?} differ in size",
                    degraded.shape(),
                    clean.shape()
                )));
            }
            let kind = *tags
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("{name} has no entry in {MANIFEST}")))?;
            out.push(name, PairedSample { degraded, clean, kind });
        }
        Ok(out)
    }

    /// Writes the pairs and the manifest under `root/split`.
    pub fn save(&self, root: &Path, split: &str) -> Result<()> {
        let dir = Self::split_dir(root, split);
        for sub in [DEGRADED_DIR, CLEAN_DIR] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut manifest = String::new();
        for s in &self.samples {
            let file = format!("{}.png", s.name);
            save_image(&dir.join(DEGRADED_DIR).join(&file), &s.sample.degraded)?;
            save_image(&dir.join(CLEAN_DIR).join(&file), &s.sample.clean)?;
            manifest.push_str(&format!("{}\t{}\n", s.name, s.sample.kind));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Sample counts per tag.
    pub fn tag_counts(&self) -> BTreeMap<DegradationKind, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.sample.kind).or_insert(0) += 1;
        }
        m
    }
}
