//! Spatial grouping transformer block: prompt injection, masked layer norm,
//! feature-grouped attention and a gated feed-forward network.

use serde::{Deserialize, Serialize};

use crate::attention::{channel_attention, spatial_attention};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grouping::{gather, partition, scatter, select_partner, GroupPartition, Pooling};
use crate::params::{Bound, Conv, DepthwiseConv, LayerNorm, ParamBuilder, ParamId};
use crate::tensor::Real;

/// Initial value of the in-group weight vector.
pub const ALPHA_IN_INIT: f64 = 1.0;
/// Initial value of the cross-group weight vector.
pub const ALPHA_CROSS_INIT: f64 = 0.1;
/// Hidden width of the feed-forward network relative to the block width.
pub const FFN_EXPANSION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// `C x C` attention matrix.
    Channel,
    /// `N x N` attention matrix.
    Spatial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub kind: AttentionKind,
    pub heads: usize,
    /// Token groups; `1` disables grouping and the cross-group path.
    pub groups: usize,
    pub cross_group: bool,
    pub pooling: Pooling,
    pub spatial_cap: usize,
}

/// Learned tensors of one block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub channels: usize,
    pub cfg: BlockConfig,
    pub inject: Conv,
    pub norm1: LayerNorm,
    pub qkv: Conv,
    pub temperature: ParamId,
    pub alpha_in: ParamId,
    pub alpha_cross: ParamId,
    pub out: Conv,
    pub norm2: LayerNorm,
    pub ffn_in: Conv,
    pub ffn_dw: DepthwiseConv,
    pub ffn_out: Conv,
}

/// Result of a grouped attention call, with the partner table for inspection.
#[derive(Clone, Debug)]
pub struct FgaOutput {
    pub out: Var,
    /// `partners[m]` is the group whose query attends to group `m`; empty when
    /// the cross path is off.
    pub partners: Vec<usize>,
}

/// Cross-group attention: group `m` uses the query of group `partners[m]` and
/// its own key and value. `attend` is called once per group as
/// `attend(g, q, k, v)`.
pub fn cross_group_attention<T, F>(
    g: &mut Graph<T>,
    q: &[Var],
    k: &[Var],
    v: &[Var],
    partners: &[usize],
    mut attend: F,
) -> Result<Vec<Var>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var, Var, Var) -> Result<Var>,
{
    let n = partners.len();
    if q.len() != n || k.len() != n || v.len() != n {
        return Err(Error::Dimension("one query, key and value per group expected".into()));
    }
    (0..n)
        .map(|m| {
            let a = partners[m];
            if a == m || a >= n {
                return Err(Error::Parameter(format!("invalid partner {a} for group {m}")));
            }
            attend(g, q[a], k[m], v[m])
        })
        .collect()
}

impl TransformerBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cfg: BlockConfig) -> Result<Self> {
        if cfg.heads == 0 || !channels.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("{channels} channels cannot be split into {} heads", cfg.heads)));
        }
        if cfg.groups == 0 {
            return Err(Error::Config("group count must be at least 1".into()));
        }
        let c = channels;
        let hidden = FFN_EXPANSION * c;
        Ok(Self {
            channels,
            inject: b.conv("inject", 1, 2 * c, c, true),
            norm1: b.layer_norm("norm1", c),
            qkv: b.conv("qkv", 1, c, 5 * c, false),
            temperature: b.constant("temperature", &[cfg.heads], 1.0),
            alpha_in: b.constant("alpha_in", &[c], ALPHA_IN_INIT),
            alpha_cross: b.constant("alpha_cross", &[c], ALPHA_CROSS_INIT),
            out: b.conv("out", 1, c, c, true),
            norm2: b.layer_norm("norm2", c),
            ffn_in: b.conv("ffn_in", 1, c, 2 * hidden, true),
            ffn_dw: b.depthwise("ffn_dw", 3, 2 * hidden),
            ffn_out: b.conv("ffn_out", 1, hidden, c, true),
            cfg,
        })
    }

    /// `Conv1x1([f_prev, f_s])`.
    pub fn inject_prompt<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_prev: Var, f_s: Var) -> Result<Var> {
        let (a, b) = (g.shape(f_prev), g.shape(f_s));
        if a.len() != 3 || b.len() != 3 || a[..2] != b[..2] || a[2] != self.channels || b[2] != self.channels {
            return Err(Error::Dimension(format!(
                "feature {a:?} and prompt {b:?} must both be [H, W, {}]",
                self.channels
            )));
        }
        let cat = g.concat_cols(&[f_prev, f_s]);
        Ok(self.inject.forward(g, p, cat))
    }

    fn attend<T: Real>(&self, g: &mut Graph<T>, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let t = p.var(self.temperature);
        match self.cfg.kind {
            AttentionKind::Channel => channel_attention(g, q, k, v, self.cfg.heads, t),
            AttentionKind::Spatial => {
                spatial_attention(g, q, k, v, self.cfg.heads, t, self.cfg.spatial_cap).map_err(|e| match e {
                    Error::Resource { tokens, cap } => Error::Config(format!(
                        "spatial attention over {tokens} tokens per group exceeds spatial_cap {cap}; \
                         raise the group count or the cap"
                    )),
                    other => other,
                })
            }
        }
    }

    /// Grouped attention over an `[H, W, C]` map already normalized and
    /// multiplied by the mask.
    pub fn fga<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, part: &GroupPartition) -> Result<FgaOutput> {
        let shape = g.shape(x).to_vec();
        let c = self.channels;
        if shape.len() != 3 || shape[2] != c {
            return Err(Error::Dimension(format!("expected [H, W, {c}], got {shape:?}")));
        }
        if part.group_count() != self.cfg.groups {
            return Err(Error::Dimension(format!(
                "partition has {} groups, block expects {}",
                part.group_count(),
                self.cfg.groups
            )));
        }
        let qkv = self.qkv.forward(g, p, x);
        let groups = gather(g, qkv, part)?;
        let split = |g: &mut Graph<T>, i: usize| -> Vec<Var> { groups.iter().map(|&m| g.narrow_cols(m, i * c, c)).collect() };
        let (qi, qc, ki, kc, v) = (split(g, 0), split(g, 1), split(g, 2), split(g, 3), split(g, 4));

        let mut a_in = Vec::with_capacity(groups.len());
        for m in 0..groups.len() {
            a_in.push(self.attend(g, p, qi[m], ki[m], v[m])?);
        }
        let a_in = scatter(g, &a_in, part)?;
        let mut comb = g.mul_cols(a_in, p.var(self.alpha_in));

        let mut partners = Vec::new();
        if self.cfg.cross_group && self.cfg.groups > 1 {
            let values: Vec<_> = v.iter().map(|&m| g.value(m)).collect();
            partners = select_partner(&values, self.cfg.pooling)?;
            let a_cross = cross_group_attention(g, &qc, &kc, &v, &partners, |g, q, k, v| self.attend(g, p, q, k, v))?;
            let a_cross = scatter(g, &a_cross, part)?;
            let a_cross = g.mul_cols(a_cross, p.var(self.alpha_cross));
            comb = g.add(comb, a_cross);
        }
        let out = self.out.forward(g, p, comb);
        Ok(FgaOutput { out: g.reshape(out, &shape), partners })
    }

    /// Gated depthwise feed-forward network.
    pub fn ffn<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let hidden = FFN_EXPANSION * self.channels;
        let h = self.ffn_in.forward(g, p, x);
        let h = self.ffn_dw.forward(g, p, h);
        let (a, b) = (g.narrow_cols(h, 0, hidden), g.narrow_cols(h, hidden, hidden));
        let a = g.gelu(a);
        let gated = g.mul(a, b);
        self.ffn_out.forward(g, p, gated)
    }

    /// Full block. `mask` is the stage's `[H, W, 1]` grouping mask and `part`
    /// the partition derived from it.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_prev: Var,
        f_s: Var,
        mask: Var,
        part: &GroupPartition,
    ) -> Result<FgaOutput> {
        let x = self.inject_prompt(g, p, f_prev, f_s)?;
        let n1 = self.norm1.forward(g, p, x);
        if g.value(mask).len() != g.value(x).len() / self.channels {
            return Err(Error::Dimension(format!("mask {:?} does not match feature {:?}", g.shape(mask), g.shape(x))));
        }
        let masked = g.mul_rows(n1, mask);
        let fga = self.fga(g, p, masked, part)?;
        let xh = g.add(x, fga.out);
        let n2 = self.norm2.forward(g, p, xh);
        let f = self.ffn(g, p, n2);
        Ok(FgaOutput { out: g.add(xh, f), partners: fga.partners })
    }

    /// Partition helper using this block's group count.
    pub fn partition<T: Real>(&self, g: &Graph<T>, mask: Var) -> Result<GroupPartition> {
        partition(g.value(mask).data(), self.cfg.groups)
    }
}
