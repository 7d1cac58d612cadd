//! Four-stage encoder-decoder restoration network.

use serde::{Deserialize, Serialize};

use crate::block::{AttentionKind, BlockConfig, TransformerBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grouping::{generate_mask, GroupPartition, Pooling, MASK_KERNEL};
use crate::params::{Bound, Conv, ParamBuilder, ParamStore};
use crate::prompt::{PromptConfig, SpectralPrompt, StageSpectra};
use crate::tensor::{reflect_index, Real, Tensor};

pub const STAGES: usize = 4;

/// Attention kinds used inside each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockLayout {
    /// First half of every stage channel-kind, second half spatial-kind.
    #[default]
    Mixed,
    ChannelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of stage 1; every deeper stage doubles it.
    pub base_channels: usize,
    pub blocks: [usize; STAGES],
    pub groups: [usize; STAGES],
    pub heads: [usize; STAGES],
    /// Largest group size allowed for spatial-kind attention.
    pub spatial_cap: usize,
    /// Channel-kind blocks after the decoder, at stage-1 width.
    pub refinement_blocks: usize,
    pub layout: BlockLayout,
    /// Grouped attention; when off every block attends over all tokens and
    /// no mask is generated.
    pub grouping: bool,
    pub cross_group: bool,
    pub pooling: Pooling,
    pub sdp: PromptConfig,
    /// Seed of parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            blocks: [4, 4, 4, 4],
            groups: [4, 4, 2, 2],
            heads: [1, 2, 4, 8],
            spatial_cap: 2048,
            refinement_blocks: 2,
            layout: BlockLayout::Mixed,
            grouping: true,
            cross_group: true,
            pooling: Pooling::Mean,
            sdp: PromptConfig::default(),
            seed: 0,
        }
    }
}

/// Derived settings of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub groups: usize,
    pub channels: usize,
    pub heads: usize,
    pub spatial_cap: usize,
}

impl ModelConfig {
    pub fn stage(&self, p: usize) -> StageConfig {
        StageConfig {
            blocks: self.blocks[p],
            groups: if self.grouping { self.groups[p] } else { 1 },
            channels: self.base_channels << p,
            heads: self.heads[p],
            spatial_cap: self.spatial_cap,
        }
    }

    /// Input sides are padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        (1 << (STAGES - 1)) * self.sdp.reorg
    }

    pub fn validate(&self) -> Result<()> {
        self.sdp.validate()?;
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!("base_channels {} must be even and at least 2", self.base_channels)));
        }
        for p in 0..STAGES {
            let s = self.stage(p);
            if s.blocks == 0 || !s.blocks.is_multiple_of(2) {
                return Err(Error::Config(format!("stage {} block count {} must be even and positive", p + 1, s.blocks)));
            }
            if self.groups[p] == 0 {
                return Err(Error::Config(format!("stage {} group count must be at least 1", p + 1)));
            }
            if s.heads == 0 || !s.channels.is_multiple_of(s.heads) {
                return Err(Error::Config(format!(
                    "stage {} width {} is not divisible by {} heads",
                    p + 1,
                    s.channels,
                    s.heads
                )));
            }
        }
        if self.spatial_cap == 0 {
            return Err(Error::Config("spatial_cap must be positive".into()));
        }
        Ok(())
    }

    fn block_config(&self, p: usize, kind: AttentionKind) -> BlockConfig {
        let s = self.stage(p);
        BlockConfig {
            kind,
            heads: s.heads,
            groups: s.groups,
            cross_group: self.cross_group && self.grouping,
            pooling: self.pooling,
            spatial_cap: s.spatial_cap,
        }
    }

    fn kind(&self, i: usize, blocks: usize) -> AttentionKind {
        match self.layout {
            BlockLayout::ChannelOnly => AttentionKind::Channel,
            BlockLayout::Mixed if i < blocks / 2 => AttentionKind::Channel,
            BlockLayout::Mixed => AttentionKind::Spatial,
        }
    }
}

/// Per-stage tensors recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct StageTrace<T: Real> {
    /// `[H_p, W_p, 1]` grouping mask; absent when grouping is off.
    pub mask: Option<Tensor<T>>,
    pub partition: GroupPartition,
    /// `[H_p, W_p, C_p]` degradation-aware feature.
    pub fs: Tensor<T>,
}

/// Graph output of [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real> {
    /// `[H, W, 3]` restored image in `[0, 1]`.
    pub output: Var,
    pub stages: Vec<StageTrace<T>>,
}

/// Layer layout of the network; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    embed: Conv,
    prompts: Vec<SpectralPrompt>,
    masks: Vec<Conv>,
    encoder: Vec<Vec<TransformerBlock>>,
    down: Vec<Conv>,
    up: Vec<Conv>,
    fuse: Vec<Conv>,
    decoder: Vec<Vec<TransformerBlock>>,
    refinement: Vec<TransformerBlock>,
    head: Conv,
}

/// Space-to-channel by 2 then a 1x1 convolution `4C -> 2C`.
pub fn downsample<T: Real>(g: &mut Graph<T>, p: &Bound, conv: &Conv, f: Var) -> Result<Var> {
    let s = g.shape(f);
    if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) || 4 * s[2] != conv.cin {
        return Err(Error::Dimension(format!("cannot downsample {s:?} with a {}-input projection", conv.cin)));
    }
    let r = g.space_to_depth(f, 2);
    Ok(conv.forward(g, p, r))
}

/// 1x1 convolution `2C -> 4C` then pixel shuffle by 2.
pub fn upsample<T: Real>(g: &mut Graph<T>, p: &Bound, conv: &Conv, f: Var) -> Result<Var> {
    let s = g.shape(f);
    if s.len() != 3 || s[2] != conv.cin || !conv.cout.is_multiple_of(4) {
        return Err(Error::Dimension(format!("cannot upsample {s:?} with a {}-input projection", conv.cin)));
    }
    let y = conv.forward(g, p, f);
    Ok(g.depth_to_space(y, 2))
}

/// Reflect-pads an `[H, W, C]` image at the bottom and right.
pub fn pad_reflect(img: &Tensor<f64>, h2: usize, w2: usize) -> Tensor<f64> {
    let (h, w, c) = img.hwc();
    let mut out = Vec::with_capacity(h2 * w2 * c);
    for y in 0..h2 {
        let sy = reflect_index(y as isize, h);
        for x in 0..w2 {
            let sx = reflect_index(x as isize, w);
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&img.data()[base..base + c]);
        }
    }
    Tensor::new(&[h2, w2, c], out).unwrap()
}

/// Checks that `img` is a finite `[H, W, 3]` image with values in `[0, 1]`.
pub fn validate_image<T: Real>(img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Dimension(format!("expected a non-empty [H, W, 3] image, got {s:?}")));
    }
    if let Some(v) = img.data().iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
        return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

impl Network {
    /// Builds the layer layout and registers freshly initialized parameters.
    pub fn new<T: Real>(cfg: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, cfg.seed);
        let c1 = cfg.base_channels;
        let embed = b.conv("embed", 3, 3, c1, true);
        let mut prompts = Vec::new();
        let mut masks = Vec::new();
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for p in 0..STAGES {
            let s = cfg.stage(p);
            let name = format!("enc{}", p + 1);
            let (prompt, mask, blocks) = b.scope(&name, |b| -> Result<_> {
                let prompt = b.scope("sdp", |b| SpectralPrompt::new(b, s.channels, s.heads, cfg.sdp.clone()))?;
                let mask = b.conv("mask", MASK_KERNEL, s.channels, 1, true);
                let blocks = (0..s.blocks)
                    .map(|i| {
                        b.scope(&format!("block{i}"), |b| {
                            TransformerBlock::new(b, s.channels, cfg.block_config(p, cfg.kind(i, s.blocks)))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((prompt, mask, blocks))
            })?;
            prompts.push(prompt);
            masks.push(mask);
            encoder.push(blocks);
            if p + 1 < STAGES {
                down.push(b.conv(&format!("down{}", p + 1), 1, 4 * s.channels, 2 * s.channels, true));
            }
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for p in 0..STAGES - 1 {
            let s = cfg.stage(p);
            let name = format!("dec{}", p + 1);
            let (u, f, blocks) = b.scope(&name, |b| -> Result<_> {
                let u = b.conv("up", 1, 2 * s.channels, 4 * s.channels, true);
                let f = b.conv("fuse", 1, 2 * s.channels, s.channels, true);
                let blocks = (0..s.blocks)
                    .map(|i| {
                        b.scope(&format!("block{i}"), |b| {
                            TransformerBlock::new(b, s.channels, cfg.block_config(p, cfg.kind(i, s.blocks)))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((u, f, blocks))
            })?;
            up.push(u);
            fuse.push(f);
            decoder.push(blocks);
        }
        let refinement = (0..cfg.refinement_blocks)
            .map(|i| {
                b.scope(&format!("refine{i}"), |b| {
                    TransformerBlock::new(b, c1, cfg.block_config(0, AttentionKind::Channel))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = b.conv("head", 3, c1, 3, true);
        drop(b);
        Ok((Self { cfg, embed, prompts, masks, encoder, down, up, fuse, decoder, refinement, head }, store))
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    pub fn prompts(&self) -> &[SpectralPrompt] {
        &self.prompts
    }

    /// Padded working size of an `h x w` input.
    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.cfg.pad_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Spectral inputs of every stage for an already padded image.
    pub fn stage_spectra(&self, padded: &Tensor<f64>) -> Result<Vec<StageSpectra>> {
        let (h, w, _) = padded.hwc();
        (0..STAGES).map(|p| StageSpectra::compute(padded, h >> p, w >> p, &self.cfg.sdp)).collect()
    }

    /// Restores `img` (`[H, W, 3]`, values in `[0, 1]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: &Tensor<f64>) -> Result<ForwardOutput<T>> {
        validate_image(img)?;
        let (h, w, _) = img.hwc();
        let (hp, wp) = self.padded_dims(h, w);
        let padded = pad_reflect(img, hp, wp);
        let spectra = self.stage_spectra(&padded)?;
        self.forward_padded(g, p, &padded, &spectra, (h, w), None)
    }

    /// Forward pass on a padded image with precomputed spectra; the result
    /// is cropped to `crop`. `routing` replaces the mask-derived partitions
    /// with fixed ones, one per stage.
    pub fn forward_padded<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        padded: &Tensor<f64>,
        spectra: &[StageSpectra],
        crop: (usize, usize),
        routing: Option<&[GroupPartition]>,
    ) -> Result<ForwardOutput<T>> {
        let (hp, wp, _) = padded.hwc();
        let m = self.cfg.pad_multiple();
        if hp % m != 0 || wp % m != 0 || spectra.len() != STAGES {
            return Err(Error::Dimension(format!("{hp}x{wp} input is not padded to a multiple of {m}")));
        }
        let x_img = g.constant(padded.cast());
        let mut f = self.embed.forward(g, p, x_img);
        let mut stages = Vec::with_capacity(STAGES);
        let mut ctx = Vec::with_capacity(STAGES);
        let mut skips = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cfg = self.cfg.stage(s);
            let fs = self.prompts[s].build_prompt(g, p, &spectra[s])?.fs;
            let (hs, ws) = (hp >> s, wp >> s);
            let (mask, part, mask_t) = if self.cfg.grouping {
                let mv = generate_mask(g, p, &self.masks[s], fs)?;
                let part = match routing {
                    Some(r) => r[s].clone(),
                    None => crate::grouping::partition(g.value(mv).data(), cfg.groups)?,
                };
                let t = g.value(mv).clone();
                (mv, part, Some(t))
            } else {
                let ones = g.constant(Tensor::full(&[hs, ws, 1], T::one()));
                (ones, GroupPartition::from_order((0..hs * ws).collect(), 1)?, None)
            };
            for blk in &self.encoder[s] {
                f = blk.forward(g, p, f, fs, mask, &part)?.out;
            }
            stages.push(StageTrace { mask: mask_t, partition: part.clone(), fs: g.value(fs).clone() });
            ctx.push((fs, mask, part));
            if s + 1 < STAGES {
                skips.push(f);
                f = downsample(g, p, &self.down[s], f)?;
            }
        }
        for s in (0..STAGES - 1).rev() {
            let (fs, mask, part) = &ctx[s];
            f = upsample(g, p, &self.up[s], f)?;
            let cat = g.concat_cols(&[f, skips[s]]);
            f = self.fuse[s].forward(g, p, cat);
            for blk in &self.decoder[s] {
                f = blk.forward(g, p, f, *fs, *mask, part)?.out;
            }
        }
        let (fs, mask, part) = &ctx[0];
        for blk in &self.refinement {
            f = blk.forward(g, p, f, *fs, *mask, part)?.out;
        }
        let r = self.head.forward(g, p, f);
        let y = g.add(r, x_img);
        let y = g.crop(y, crop.0, crop.1);
        let output = g.clamp(y, T::zero(), T::one());
        Ok(ForwardOutput { output, stages })
    }

    /// Inference-only restoration returning the image tensor.
    pub fn restore<T: Real>(&self, params: &ParamStore<T>, img: &Tensor<f64>) -> Result<(Tensor<T>, Vec<StageTrace<T>>)> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g);
        let out = self.forward(&mut g, &p, img)?;
        Ok((g.value(out.output).clone(), out.stages))
    }
}
