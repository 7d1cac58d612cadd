//! Grouping masks, equal-size token partitions and cross-group partner
//! selection.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv};
use crate::tensor::{Real, Tensor};

/// Kernel size of the mask generator.
pub const MASK_KERNEL: usize = 7;

/// Reduction over the token axis used to summarize a group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Tokens sorted by mask value and split into equal contiguous chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    order: Rc<[usize]>,
    inverse: Rc<[usize]>,
    groups: usize,
}

impl GroupPartition {
    /// Builds a partition from an explicit permutation.
    pub fn from_order(order: Vec<usize>, groups: usize) -> Result<Self> {
        let n = order.len();
        if groups == 0 || n == 0 || !n.is_multiple_of(groups) {
            return Err(Error::Partition { tokens: n, groups });
        }
        let mut inverse = vec![usize::MAX; n];
        for (pos, &t) in order.iter().enumerate() {
            if t >= n || inverse[t] != usize::MAX {
                return Err(Error::Parameter(format!("order is not a permutation of 0..{n}")));
            }
            inverse[t] = pos;
        }
        Ok(Self { order: order.into(), inverse: inverse.into(), groups })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `inverse()[t]` is the position of token `t` in [`Self::order`].
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn tokens(&self) -> usize {
        self.order.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn group_size(&self) -> usize {
        self.order.len() / self.groups
    }

    pub fn group(&self, m: usize) -> &[usize] {
        let s = self.group_size();
        &self.order[m * s..(m + 1) * s]
    }
}

/// Stable ascending argsort of `mask`, split into `groups` equal chunks.
pub fn partition<T: Real>(mask: &[T], groups: usize) -> Result<GroupPartition> {
    if groups == 0 || mask.is_empty() || !mask.len().is_multiple_of(groups) {
        return Err(Error::Partition { tokens: mask.len(), groups });
    }
    if let Some(i) = mask.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("mask value at token {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..mask.len()).collect();
    order.sort_by(|&a, &b| mask[a].partial_cmp(&mask[b]).expect("finite"));
    GroupPartition::from_order(order, groups)
}

fn token_matrix<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    match g.shape(f).len() {
        2 => Ok(f),
        3 => {
            let (h, w, c) = g.value(f).hwc();
            Ok(g.reshape(f, &[h * w, c]))
        }
        _ => Err(Error::Dimension(format!("expected [H, W, C] or [N, C], got {:?}", g.shape(f)))),
    }
}

/// Splits a feature map into `(N/g) x C` token matrices in partition order.
pub fn gather<T: Real>(g: &mut Graph<T>, f: Var, part: &GroupPartition) -> Result<Vec<Var>> {
    let x = token_matrix(g, f)?;
    let n = g.shape(x)[0];
    if n != part.tokens() {
        return Err(Error::Dimension(format!("feature has {n} tokens, partition covers {}", part.tokens())));
    }
    let sorted = g.gather_rows(x, part.order.clone());
    if part.groups == 1 {
        return Ok(vec![sorted]);
    }
    let s = part.group_size();
    Ok((0..part.groups).map(|m| g.narrow_rows(sorted, m * s, s)).collect())
}

/// Inverse of [`gather`]; returns an `[N, C]` token matrix in raster order.
pub fn scatter<T: Real>(g: &mut Graph<T>, groups: &[Var], part: &GroupPartition) -> Result<Var> {
    if groups.len() != part.groups {
        return Err(Error::Dimension(format!("expected {} groups, got {}", part.groups, groups.len())));
    }
    let want = [part.group_size(), g.shape(groups[0]).get(1).copied().unwrap_or(0)];
    for &m in groups {
        if g.shape(m) != want {
            return Err(Error::Dimension(format!("group shape {:?} differs from {want:?}", g.shape(m))));
        }
    }
    let sorted = if groups.len() == 1 { groups[0] } else { g.concat_rows(groups) };
    Ok(g.gather_rows(sorted, part.inverse.clone()))
}

/// Per-group summary vector used by [`select_partner`].
pub fn representative<T: Real>(v: &Tensor<T>, pooling: Pooling) -> Vec<f64> {
    let (n, c) = v.rows_cols();
    let mut r = vec![
        match pooling {
            Pooling::Mean => 0.0,
            Pooling::Max => f64::NEG_INFINITY,
        };
        c
    ];
    for row in v.data().chunks(c) {
        for (acc, &e) in r.iter_mut().zip(row) {
            let e = e.to_f64().unwrap_or(f64::NAN);
            match pooling {
                Pooling::Mean => *acc += e,
                Pooling::Max => *acc = acc.max(e),
            }
        }
    }
    if pooling == Pooling::Mean {
        r.iter_mut().for_each(|e| *e /= n as f64);
    }
    r
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|e| e * e).sum::<f64>().sqrt();
    let nb = b.iter().map(|e| e * e).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// For each group, the index of the most similar other group.
pub fn select_partner_from(reps: &[Vec<f64>]) -> Result<Vec<usize>> {
    let g = reps.len();
    if g < 2 {
        return Err(Error::Selector(g));
    }
    Ok((0..g)
        .map(|m| {
            let mut best = usize::MAX;
            let mut best_sim = f64::NEG_INFINITY;
            for n in (0..g).filter(|&n| n != m) {
                let s = cosine(&reps[m], &reps[n]);
                if best == usize::MAX || s > best_sim {
                    best = n;
                    best_sim = s;
                }
            }
            best
        })
        .collect())
}

/// Pools every value matrix and picks partners by cosine similarity; ties go
/// to the lowest group index.
pub fn select_partner<T: Real>(values: &[&Tensor<T>], pooling: Pooling) -> Result<Vec<usize>> {
    if values.len() < 2 {
        return Err(Error::Selector(values.len()));
    }
    let shape = values[0].shape();
    if shape.len() != 2 || values.iter().any(|v| v.shape() != shape) {
        return Err(Error::Dimension("value matrices must share one [n, C] shape".into()));
    }
    let reps: Vec<_> = values.iter().map(|v| representative(v, pooling)).collect();
    select_partner_from(&reps)
}

/// Single-channel mask from the degradation feature via a reflect-padded
/// 7x7 convolution.
pub fn generate_mask<T: Real>(g: &mut Graph<T>, p: &Bound, conv: &Conv, f_s: Var) -> Result<Var> {
    if conv.k != MASK_KERNEL || conv.cout != 1 {
        return Err(Error::Parameter(format!(
            "mask generator must be {MASK_KERNEL}x{MASK_KERNEL} with one output, got k={} cout={}",
            conv.k, conv.cout
        )));
    }
    let s = g.shape(f_s);
    if s.len() != 3 || s[2] != conv.cin {
        return Err(Error::Dimension(format!("expected [H, W, {}] feature, got {s:?}", conv.cin)));
    }
    Ok(conv.forward(g, p, f_s))
}
