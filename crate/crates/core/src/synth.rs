//! Building paired train/val sets from clean images and degradation templates.

use serde::{Deserialize, Serialize};

use crate::data::{quantize, Dataset};
use crate::degrade::{procedural_scene, synthesize_degradation, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How clean images are matched with degradation kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Every clean image with every kind.
    #[default]
    Every,
    /// Clean image `i` with kind `i mod kinds.len()`.
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of procedural clean scenes when no clean directory is given.
    pub scenes: usize,
    /// Procedural scene size `[H, W]`.
    pub size: [usize; 2],
    pub kinds: Vec<DegradationKind>,
    pub pairing: Pairing,
    /// Share of clean images whose pairs go to the `val` split, `[0, 1)`.
    pub val_fraction: f64,
    /// Per-pair density drawn uniformly from this range, inside `[0, 1]`.
    pub density: [f64; 2],
    pub rain: DegradationSpec,
    pub snow: DegradationSpec,
    pub raindrop: DegradationSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            size: [64, 64],
            kinds: DegradationKind::ALL.to_vec(),
            pairing: Pairing::Every,
            val_fraction: 0.0,
            density: [0.4, 0.8],
            rain: DegradationSpec::of_kind(DegradationKind::Rain, 0.5, 0),
            snow: DegradationSpec::of_kind(DegradationKind::Snow, 0.5, 0),
            raindrop: DegradationSpec::of_kind(DegradationKind::Raindrop, 0.5, 0),
            seed: 0,
        }
    }
}

const PAIR_SALT: u64 = 0xd15e_a5e0_0000_0001;

/// SplitMix64 step, used to derive independent per-pair seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("synth.kinds must name at least one degradation".into()));
        }
        if self.size[0] < 16 || self.size[1] < 16 {
            return Err(Error::Config(format!("synth.size {:?} must be at least 16x16", self.size)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("synth.val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        let [lo, hi] = self.density;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("synth.density {:?} must satisfy 0 <= lo <= hi <= 1", self.density)));
        }
        for (spec, kind) in [(&self.rain, DegradationKind::Rain), (&self.snow, DegradationKind::Snow), (&self.raindrop, DegradationKind::Raindrop)] {
            if spec.kind != kind {
                return Err(Error::Config(format!("synth.{kind}.kind must be {kind}")));
            }
            spec.validate().map_err(|e| Error::Config(format!("synth.{kind}: {e}")))?;
        }
        Ok(())
    }

    pub fn template(&self, kind: DegradationKind) -> &DegradationSpec {
        match kind {
            DegradationKind::Rain => &self.rain,
            DegradationKind::Snow => &self.snow,
            DegradationKind::Raindrop => &self.raindrop,
        }
    }

    /// Procedural clean scenes named `scene000`, `scene001`, ...
    pub fn procedural(&self) -> Vec<(String, Tensor<f64>)> {
        (0..self.scenes)
            .map(|i| (format!("scene{i:03}"), quantize(&procedural_scene(self.size[0], self.size[1], mix_seed(self.seed, i as u64)))))
            .collect()
    }

    /// Pairs named `NAME_kind` according to `pairing`. The last
    /// `val_fraction` of the clean images feed the validation split.
    pub fn build(&self, clean: &[(String, Tensor<f64>)]) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let n_val = (clean.len() as f64 * self.val_fraction).round() as usize;
        let (mut train, mut val) = (Dataset::default(), Dataset::default());
        for (i, (name, img)) in clean.iter().enumerate() {
            for (k, &kind) in self.kinds.iter().enumerate() {
                if self.pairing == Pairing::Cycle && k != i % self.kinds.len() {
                    continue;
                }
                let seed = mix_seed(self.seed ^ PAIR_SALT, (i * 16 + k) as u64);
                let u = (seed >> 11) as f64 / (1u64 << 53) as f64;
                let spec = DegradationSpec {
                    density: self.density[0] + u * (self.density[1] - self.density[0]),
                    seed,
                    ..self.template(kind).clone()
                };
                let mut s = synthesize_degradation(&quantize(img), &spec)?;
                s.degraded = quantize(&s.degraded);
                let target = if i >= clean.len() - n_val { &mut val } else { &mut train };
                target.push(format!("{name}_{kind}"), s);
            }
        }
        Ok((train, val))
    }
}
