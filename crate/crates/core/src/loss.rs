//! Reconstruction objective: mean absolute error plus a weighted patchwise
//! Pearson correlation term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the correlation term.
    pub beta: f64,
    /// Side of the square correlation patches.
    pub patch_size: usize,
    /// Patches whose prediction or target variance is at most this count as
    /// constant and get `rho = 0`.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.05, patch_size: 7, epsilon: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("loss.beta must be a non-negative number, got {}", self.beta)));
        }
        if self.patch_size < 2 {
            return Err(Error::Config(format!("loss.patch_size must be at least 2, got {}", self.patch_size)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("loss.epsilon must be non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Scalar loss nodes of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub l1: Var,
    pub cor: Var,
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension(format!("prediction {:?} and target {:?} differ", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target)?;
    let (pv, tv) = (g.value(pred), g.value(target));
    let n = T::c(pv.len() as f64);
    let sum: T = pv.data().iter().zip(tv.data()).map(|(&a, &b)| (a - b).abs()).sum();
    let out = Tensor::new(&[1], vec![sum / n]).unwrap();
    Ok(g.push(out, &[pred, target], move |gd, gr| {
        let s = gd.data()[0] / n;
        let sign: Vec<T> = gr
            .value(pred)
            .data()
            .iter()
            .zip(gr.value(target).data())
            .map(|(&a, &b)| if a > b { s } else if a < b { -s } else { T::zero() })
            .collect();
        gr.accumulate(pred, |buf| buf.iter_mut().zip(&sign).for_each(|(o, &d)| *o += d));
        gr.accumulate(target, |buf| buf.iter_mut().zip(&sign).for_each(|(o, &d)| *o -= d));
    }))
}

/// Pearson coefficient of one patch and its gradients with respect to both
/// inputs (`None` for a constant patch).
fn patch_rho(p: &[f64], t: &[f64], eps: f64) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let dp: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let dt: Vec<f64> = t.iter().map(|v| v - mt).collect();
    let vp = dp.iter().map(|v| v * v).sum::<f64>() / n;
    let vt = dt.iter().map(|v| v * v).sum::<f64>() / n;
    if vp <= eps || vt <= eps {
        return (0.0, None);
    }
    let cov = dp.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() / n;
    let s = (vp * vt).sqrt();
    let rho = cov / s;
    let gp = dp.iter().zip(&dt).map(|(a, b)| (b / s - rho * a / vp) / n).collect();
    let gt = dp.iter().zip(&dt).map(|(a, b)| (a / s - rho * b / vt) / n).collect();
    (rho.clamp(-1.0, 1.0), Some((gp, gt)))
}

/// Patch index lists of an `[H, W, C]` map tiled by `ps x ps` patches per
/// channel.
fn patches(h: usize, w: usize, c: usize, ps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity((h / ps) * (w / ps) * c);
    for ch in 0..c {
        for by in 0..h / ps {
            for bx in 0..w / ps {
                let mut idx = Vec::with_capacity(ps * ps);
                for y in by * ps..(by + 1) * ps {
                    for x in bx * ps..(bx + 1) * ps {
                        idx.push((y * w + x) * c + ch);
                    }
                }
                out.push(idx);
            }
        }
    }
    out
}

/// Mean of `1 - rho` over non-overlapping patches of every channel. Sides
/// that are not multiples of the patch size are reflect-padded first.
pub fn correlation_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    same_shape(g, pred, target)?;
    if g.shape(pred).len() != 3 {
        return Err(Error::Dimension(format!("expected [H, W, C], got {:?}", g.shape(pred))));
    }
    let (h, w, c) = g.value(pred).hwc();
    let ps = cfg.patch_size;
    let (h2, w2) = (h.div_ceil(ps) * ps, w.div_ceil(ps) * ps);
    let (pred, target) = if (h2, w2) != (h, w) {
        (g.pad_reflect(pred, h2, w2), g.pad_reflect(target, h2, w2))
    } else {
        (pred, target)
    };
    let index = patches(h2, w2, c, ps);
    let count = index.len() as f64;
    let (pv, tv) = (g.value(pred).data(), g.value(target).data());
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(index.len());
    for idx in &index {
        let p: Vec<f64> = idx.iter().map(|&i| pv[i].to_f64().unwrap()).collect();
        let t: Vec<f64> = idx.iter().map(|&i| tv[i].to_f64().unwrap()).collect();
        let (rho, grad) = patch_rho(&p, &t, cfg.epsilon);
        total += 1.0 - rho;
        grads.push(grad);
    }
    let out = Tensor::new(&[1], vec![T::c(total / count)]).unwrap();
    Ok(g.push(out, &[pred, target], move |gd, gr| {
        let s = -gd.data()[0].to_f64().unwrap() / count;
        for (which, var) in [(0, pred), (1, target)] {
            gr.accumulate(var, |buf| {
                for (idx, grad) in index.iter().zip(&grads) {
                    if let Some((gp, gt)) = grad {
                        let gsel = if which == 0 { gp } else { gt };
                        for (&i, &d) in idx.iter().zip(gsel) {
                            buf[i] += T::c(s * d);
                        }
                    }
                }
            });
        }
    }))
}

/// `l1 + beta * cor`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<LossParts> {
    let l1 = l1_loss(g, pred, target)?;
    let cor = correlation_loss(g, pred, target, cfg)?;
    let total = if cfg.beta == 0.0 {
        l1
    } else {
        let weighted = g.scale(cor, T::c(cfg.beta));
        g.add(l1, weighted)
    };
    Ok(LossParts { total, l1, cor })
}
