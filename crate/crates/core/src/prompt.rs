//! Spectral decomposition prompt: turns the Sobel and low-rank channels of the
//! degraded image into the degradation-aware feature `F_S` of one stage.

use serde::{Deserialize, Serialize};

use crate::attention::linear_attention;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv, ParamBuilder};
use crate::spectral::{resize_bilinear, sobel_reflect, svd_lowrank, to_grayscale, SpectralChannel};
use crate::tensor::{Real, Tensor};

/// Which decomposition filters feed the prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralMode {
    #[default]
    Both,
    SobelOnly,
    SvdOnly,
    /// No spectral branch; `F_S` is a projection of the image alone.
    Off,
}

impl SpectralMode {
    pub fn uses_sobel(self) -> bool {
        matches!(self, Self::Both | Self::SobelOnly)
    }

    pub fn uses_svd(self) -> bool {
        matches!(self, Self::Both | Self::SvdOnly)
    }
}

/// Filter whose fused branch goes through max pooling; the other one is
/// globally averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxPoolBranch {
    #[default]
    Sobel,
    Svd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub mode: SpectralMode,
    /// Space-to-channel factor of the refinement branches.
    pub reorg: usize,
    /// Truncation rank is `max(1, min(h, w) / rank_divisor)`.
    pub rank_divisor: usize,
    pub max_pool: MaxPoolBranch,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { mode: SpectralMode::Both, reorg: 2, rank_divisor: 16, max_pool: MaxPoolBranch::Sobel }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reorg == 0 {
            return Err(Error::Config("sdp.reorg must be at least 1".into()));
        }
        if self.rank_divisor == 0 {
            return Err(Error::Config("sdp.rank_divisor must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rank(&self, h: usize, w: usize) -> usize {
        (h.min(w) / self.rank_divisor).max(1)
    }
}

/// Image and spectral channels resized to one stage's resolution.
#[derive(Clone, Debug)]
pub struct StageSpectra {
    pub image: Tensor<f64>,
    pub sobel: SpectralChannel,
    pub svd: SpectralChannel,
}

impl StageSpectra {
    /// Resizes `img` to `h x w` and runs both decomposition filters in `f64`.
    pub fn compute(img: &Tensor<f64>, h: usize, w: usize, cfg: &PromptConfig) -> Result<Self> {
        let image = resize_bilinear(img, h, w);
        let gray = to_grayscale(&image)?;
        let sobel = sobel_reflect(&gray);
        let svd = svd_lowrank(&gray, cfg.rank(h, w))?;
        Ok(Self { image, sobel, svd })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.sobel.h, self.sobel.w)
    }
}

/// Intermediate and final prompt tensors of one call.
#[derive(Clone, Copy, Debug)]
pub struct PromptOutput {
    /// `[H, W, C]` degradation-aware feature.
    pub fs: Var,
    /// `F'_Sobel ⊙ Conv(I_D)`, `[H, W, C_f]`.
    pub sobel_half: Var,
    /// `F'_SVD ⊙ Conv(F_SVD)`, `[H, W, C_f]`.
    pub svd_half: Var,
}

/// Parameters of one stage's prompt module.
#[derive(Clone, Debug)]
pub struct SpectralPrompt {
    pub channels: usize,
    pub branch_channels: usize,
    pub heads: usize,
    pub cfg: PromptConfig,
    sobel_conv: Conv,
    svd_conv: Conv,
    offset_conv: Conv,
    deform: Conv,
    embed: Conv,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
    gate_image: Conv,
    gate_svd: Conv,
    proj: Conv,
}

fn check_plane<T: Real>(g: &Graph<T>, x: Var, channels: usize, s: usize) -> Result<(usize, usize)> {
    let sh = g.shape(x);
    if sh.len() != 3 || sh[2] != channels {
        return Err(Error::Dimension(format!("expected [H, W, {channels}], got {sh:?}")));
    }
    if !sh[0].is_multiple_of(s) || !sh[1].is_multiple_of(s) {
        return Err(Error::Dimension(format!("{}x{} is not divisible by the reorganization factor {s}", sh[0], sh[1])));
    }
    Ok((sh[0], sh[1]))
}

impl SpectralPrompt {
    /// `channels` is the stage width `C`; each branch uses `C / 2`.
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, heads: usize, cfg: PromptConfig) -> Result<Self> {
        cfg.validate()?;
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!("prompt width {channels} must be even")));
        }
        let cf = channels / 2;
        let tok = 2 * cf * cfg.reorg * cfg.reorg;
        if heads == 0 || !tok.is_multiple_of(heads) {
            return Err(Error::Config(format!("{tok} fusion channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            channels,
            branch_channels: cf,
            heads,
            sobel_conv: b.conv("sobel_conv", 3, 1, cf, true),
            svd_conv: b.conv("svd_conv", 3, 1, cf, true),
            offset_conv: b.zero_conv("offset_conv", 3, 3, 18, true),
            deform: b.conv("deform", 3, cf, cf, true),
            embed: b.conv("embed", 3, 3, 2 * cf, true),
            q: b.conv("q", 1, tok, tok, false),
            k: b.conv("k", 1, tok, tok, false),
            v: b.conv("v", 1, tok, tok, false),
            out: b.conv("out", 1, tok, tok, true),
            gate_image: b.conv("gate_image", 1, 3, cf, true),
            gate_svd: b.conv("gate_svd", 1, 1, cf, true),
            proj: b.conv("proj", 1, 2 * cf, channels, true),
            cfg,
        })
    }

    pub fn offset_conv(&self) -> &Conv {
        &self.offset_conv
    }

    fn tokens<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.space_to_depth(x, self.cfg.reorg);
        let (h, w, c) = g.value(s).hwc();
        g.reshape(s, &[h * w, c])
    }

    /// 3x3 convolution then space-to-channel; returns `[HW / s², s² C_f]` tokens.
    pub fn sobel_refine<T: Real>(&self, g: &mut Graph<T>, p: &Bound, sobel: Var) -> Result<Var> {
        check_plane(g, sobel, 1, self.cfg.reorg)?;
        let x = self.sobel_conv.forward(g, p, sobel);
        Ok(self.tokens(g, x))
    }

    /// Convolution, deformable convolution with offsets predicted from the
    /// image, then space-to-channel.
    pub fn svd_refine<T: Real>(&self, g: &mut Graph<T>, p: &Bound, svd: Var, image: Var) -> Result<Var> {
        let (h, w) = check_plane(g, svd, 1, self.cfg.reorg)?;
        if g.shape(image) != [h, w, 3] {
            return Err(Error::Dimension(format!("image {:?} does not match {h}x{w}", g.shape(image))));
        }
        let x = self.svd_conv.forward(g, p, svd);
        let offsets = self.offset_conv.forward(g, p, image);
        let cols = g.deform_columns(x, offsets, 3);
        let y = g.linear(cols, p.var(self.deform.weight));
        let y = g.add_cols(y, p.var(self.deform.bias.expect("deform bias")));
        let y = g.reshape(y, &[h, w, self.branch_channels]);
        Ok(self.tokens(g, y))
    }

    /// Joint linear attention over both token sets, then channel split, pixel
    /// shuffle and pooling. Returns `(F'_Sobel, F'_SVD)`.
    pub fn spectral_fuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sobel_tokens: Var,
        svd_tokens: Var,
        image: Var,
    ) -> Result<(Var, Var)> {
        let s = self.cfg.reorg;
        let (h, w) = check_plane(g, image, 3, s)?;
        let want = [h * w / (s * s), s * s * self.branch_channels];
        for t in [sobel_tokens, svd_tokens] {
            if g.shape(t) != want {
                return Err(Error::Dimension(format!("token matrix {:?} differs from {want:?}", g.shape(t))));
            }
        }
        let x = g.concat_cols(&[sobel_tokens, svd_tokens]);
        let e = self.embed.forward(g, p, image);
        let e = self.tokens(g, e);
        let ctx = g.add(x, e);
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, ctx);
        let v = self.v.forward(g, p, ctx);
        let a = linear_attention(g, q, k, v, self.heads)?;
        let a = self.out.forward(g, p, a);
        let fused = g.add(x, a);

        let half = want[1];
        let mut branches = Vec::with_capacity(2);
        for i in 0..2 {
            let part = g.narrow_cols(fused, i * half, half);
            let part = g.reshape(part, &[h / s, w / s, half]);
            branches.push(g.depth_to_space(part, s));
        }
        let max_idx = match self.cfg.max_pool {
            MaxPoolBranch::Sobel => 0,
            MaxPoolBranch::Svd => 1,
        };
        let pooled_max = g.max_pool3(branches[max_idx]);
        let flat = g.reshape(branches[1 - max_idx], &[h * w, self.branch_channels]);
        let avg = g.mean_rows_broadcast(flat);
        let pooled_avg = g.reshape(avg, &[h, w, self.branch_channels]);
        branches[max_idx] = pooled_max;
        branches[1 - max_idx] = pooled_avg;
        Ok((branches[0], branches[1]))
    }

    /// Full prompt for one stage.
    pub fn build_prompt<T: Real>(&self, g: &mut Graph<T>, p: &Bound, spectra: &StageSpectra) -> Result<PromptOutput> {
        let (h, w) = spectra.dims();
        let s = self.cfg.reorg;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Dimension(format!("{h}x{w} is not divisible by the reorganization factor {s}")));
        }
        let cf = self.branch_channels;
        let image = g.constant(spectra.image.cast());
        let svd = g.constant(spectra.svd.to_tensor());
        let mode = self.cfg.mode;
        let zero_half = |g: &mut Graph<T>| g.constant(Tensor::zeros(&[h, w, cf]));

        let (sobel_half, svd_half) = if mode == SpectralMode::Off {
            let gi = self.gate_image.forward(g, p, image);
            (gi, zero_half(g))
        } else {
            let zero_tokens = |g: &mut Graph<T>| g.constant(Tensor::zeros(&[h * w / (s * s), s * s * cf]));
            let st = if mode.uses_sobel() {
                let sobel = g.constant(spectra.sobel.to_tensor());
                self.sobel_refine(g, p, sobel)?
            } else {
                zero_tokens(g)
            };
            let vt = if mode.uses_svd() { self.svd_refine(g, p, svd, image)? } else { zero_tokens(g) };
            let (fs_sobel, fs_svd) = self.spectral_fuse(g, p, st, vt, image)?;
            let a = if mode.uses_sobel() {
                let gi = self.gate_image.forward(g, p, image);
                g.mul(fs_sobel, gi)
            } else {
                zero_half(g)
            };
            let b = if mode.uses_svd() {
                let gs = self.gate_svd.forward(g, p, svd);
                g.mul(fs_svd, gs)
            } else {
                zero_half(g)
            };
            (a, b)
        };
        let cat = g.concat_cols(&[sobel_half, svd_half]);
        let fs = self.proj.forward(g, p, cat);
        Ok(PromptOutput { fs, sobel_half, svd_half })
    }
}
