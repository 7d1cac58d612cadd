//! Multi-head attention primitives over token matrices `[N, C]`.
//!
//! * [`linear_attention`]: kernelized attention with the `elu + 1` feature map,
//!   linear in the token count.
//! * [`channel_attention`]: `(C/h) x (C/h)` attention matrix per head, with
//!   queries and keys L2-normalized along the token axis.
//! * [`spatial_attention`]: `N x N` attention matrix per head with
//!   `1/sqrt(C/h)` scaling.
//!
//! Both softmax variants scale their logits by a per-head temperature passed as
//! a `[heads]` variable so it can be learned.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// Denominator guard of [`linear_attention`].
pub const LINEAR_ATTENTION_EPS: f64 = 1e-6;

/// Validates a query/key/value triple and returns `(tokens, channels)`.
pub fn check_qkv<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(usize, usize)> {
    let dims = |x: Var| -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Dimension(format!("expected a non-empty [N, C] token matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    };
    let (qd, kd, vd) = (dims(q)?, dims(k)?, dims(v)?);
    if qd != kd || kd != vd {
        return Err(Error::Dimension(format!("q {qd:?}, k {kd:?} and v {vd:?} must share [N, C]")));
    }
    if heads == 0 || qd.1 % heads != 0 {
        return Err(Error::Dimension(format!("{} channels cannot be split into {heads} heads", qd.1)));
    }
    Ok(qd)
}

fn check_temperature<T: Real>(g: &Graph<T>, t: Var, heads: usize) -> Result<()> {
    if g.value(t).len() != heads {
        return Err(Error::Dimension(format!(
            "expected {heads} temperatures, got {}",
            g.value(t).len()
        )));
    }
    Ok(())
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize, d: usize) -> Vec<Var> {
    if heads == 1 {
        return vec![x];
    }
    (0..heads).map(|h| g.narrow_cols(x, h * d, d)).collect()
}

fn merge_heads<T: Real>(g: &mut Graph<T>, parts: Vec<Var>) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}

/// `phi(q) (phi(k)^T v) / (phi(q) . sum phi(k) + eps)` per head.
pub fn linear_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (_, c) = check_qkv(g, q, k, v, heads)?;
    let d = c / heads;
    let fq = g.elu_plus_one(q);
    let fk = g.elu_plus_one(k);
    let qs = split_heads(g, fq, heads, d);
    let ks = split_heads(g, fk, heads, d);
    let vs = split_heads(g, v, heads, d);
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let kv = g.matmul(kh, vh, true, false);
        let num = g.matmul(qh, kv, false, false);
        let ksum = g.sum_rows(kh);
        let den = g.matmul(qh, ksum, false, true);
        let den = g.add_scalar(den, T::c(LINEAR_ATTENTION_EPS));
        outs.push(g.div_rows(num, den));
    }
    Ok(merge_heads(g, outs))
}

/// Channel-wise softmax attention; `temperature` has one entry per head.
pub fn channel_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    temperature: Var,
) -> Result<Var> {
    let (_, c) = check_qkv(g, q, k, v, heads)?;
    check_temperature(g, temperature, heads)?;
    let d = c / heads;
    let qn = g.l2norm_cols(q, T::c(1e-12));
    let kn = g.l2norm_cols(k, T::c(1e-12));
    let qs = split_heads(g, qn, heads, d);
    let ks = split_heads(g, kn, heads, d);
    let vs = split_heads(g, v, heads, d);
    let mut outs = Vec::with_capacity(heads);
    for (h, ((qh, kh), vh)) in qs.into_iter().zip(ks).zip(vs).enumerate() {
        let logits = g.matmul(qh, kh, true, false);
        let t = g.select(temperature, h);
        let logits = g.scale_by(logits, t);
        let attn = g.softmax_rows(logits);
        outs.push(g.matmul(vh, attn, false, true));
    }
    Ok(merge_heads(g, outs))
}

/// Token-wise softmax attention; fails when `N` exceeds `cap`.
pub fn spatial_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    temperature: Var,
    cap: usize,
) -> Result<Var> {
    let (n, c) = check_qkv(g, q, k, v, heads)?;
    check_temperature(g, temperature, heads)?;
    if n > cap {
        return Err(Error::Resource { tokens: n, cap });
    }
    let inv_sqrt = T::one() / T::c((c / heads) as f64).sqrt();
    Ok(g.softmax_attention(q, k, v, heads, inv_sqrt, temperature))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check, project, GradCheckOptions};
    use crate::tensor::Tensor;

    fn rand_t(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0))
    }

    fn run(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        f: impl Fn(&mut Graph<f64>, Var, Var, Var) -> Result<Var>,
    ) -> Result<Tensor<f64>> {
        let mut g = Graph::inference();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = f(&mut g, qv, kv, vv)?;
        Ok(g.value(out).clone())
    }

    fn temps(g: &mut Graph<f64>, t: &[f64]) -> Var {
        g.constant(Tensor::new(&[t.len()], t.to_vec()).unwrap())
    }

    fn elu1(x: f64) -> f64 {
        if x > 0.0 {
            x + 1.0
        } else {
            x.exp()
        }
    }

    fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Per-head, per-query double loop of the kernelized formula.
    fn linear_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Vec<f64> {
        let (n, c) = q.rows_cols();
        let d = c / heads;
        let at = |t: &Tensor<f64>, i: usize, j: usize| t.data()[i * c + j];
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let mut den = 0.0;
                let mut num = vec![0.0; d];
                for j in 0..n {
                    let w: f64 = (0..d).map(|e| elu1(at(q, i, h * d + e)) * elu1(at(k, j, h * d + e))).sum();
                    den += w;
                    for e in 0..d {
                        num[e] += w * at(v, j, h * d + e);
                    }
                }
                for e in 0..d {
                    out[i * c + h * d + e] = num[e] / (den + LINEAR_ATTENTION_EPS);
                }
            }
        }
        out
    }

    fn spatial_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, t: &[f64]) -> Vec<f64> {
        let (n, c) = q.rows_cols();
        let d = c / heads;
        let at = |x: &Tensor<f64>, i: usize, j: usize| x.data()[i * c + j];
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|e| at(q, i, h * d + e) * at(k, j, h * d + e)).sum::<f64>() / (d as f64).sqrt() * t[h])
                    .collect();
                let w = softmax(&logits);
                for e in 0..d {
                    out[i * c + h * d + e] = (0..n).map(|j| w[j] * at(v, j, h * d + e)).sum();
                }
            }
        }
        out
    }

    fn channel_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, t: f64) -> Vec<f64> {
        // Single head: softmax(qhat^T khat * t) applied to every token's value row.
        let (n, c) = q.rows_cols();
        let norm = |x: &Tensor<f64>, j: usize| (0..n).map(|i| x.data()[i * c + j].powi(2)).sum::<f64>().sqrt();
        let mut attn = vec![vec![0.0; c]; c];
        for a in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|b| {
                    (0..n).map(|i| q.data()[i * c + a] * k.data()[i * c + b]).sum::<f64>() / (norm(q, a) * norm(k, b)) * t
                })
                .collect();
            attn[a] = softmax(&logits);
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for a in 0..c {
                out[i * c + a] = (0..c).map(|b| attn[a][b] * v.data()[i * c + b]).sum();
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_single_token_returns_value() {
        let (q, k, v) = (rand_t(1, 4, 1), rand_t(1, 4, 2), rand_t(1, 4, 3));
        let out = run(&q, &k, &v, |g, q, k, v| linear_attention(g, q, k, v, 2)).unwrap();
        // Equal up to the denominator guard.
        assert!(close(out.data(), v.data(), 1e-5));
    }

    #[test]
    fn linear_identical_keys_average_values() {
        let q = rand_t(5, 4, 1);
        let row = rand_t(1, 4, 2);
        let k = Tensor::from_fn(&[5, 4], |i| row.data()[i % 4]);
        let v = rand_t(5, 4, 3);
        let out = run(&q, &k, &v, |g, q, k, v| linear_attention(g, q, k, v, 1)).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|r| v.data()[r * 4 + c]).sum::<f64>() / 5.0).collect();
        for r in 0..5 {
            assert!(close(&out.data()[r * 4..r * 4 + 4], &mean, 1e-6));
        }
    }

    #[test]
    fn linear_matches_double_loop() {
        let (q, k, v) = (rand_t(4, 8, 4), rand_t(4, 8, 5), rand_t(4, 8, 6));
        let out = run(&q, &k, &v, |g, q, k, v| linear_attention(g, q, k, v, 2)).unwrap();
        assert!(close(out.data(), &linear_oracle(&q, &k, &v, 2), 1e-12));
    }

    #[test]
    fn linear_rejects_mismatch() {
        let (q, k, v) = (rand_t(4, 8, 4), rand_t(3, 8, 5), rand_t(4, 8, 6));
        assert!(matches!(run(&q, &k, &v, |g, q, k, v| linear_attention(g, q, k, v, 2)), Err(Error::Dimension(_))));
        let (q, k, v) = (rand_t(4, 6, 4), rand_t(4, 6, 5), rand_t(4, 6, 6));
        assert!(matches!(run(&q, &k, &v, |g, q, k, v| linear_attention(g, q, k, v, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn channel_attention_matrix_rows_sum_to_one() {
        // With v = I-like probes the output reveals the attention matrix rows.
        let (q, k) = (rand_t(16, 8, 7), rand_t(16, 8, 8));
        let v = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let q8 = Tensor::new(&[8, 8], q.data()[..64].to_vec()).unwrap();
        let k8 = Tensor::new(&[8, 8], k.data()[..64].to_vec()).unwrap();
        let out = run(&q8, &k8, &v, |g, q, k, v| {
            let t = temps(g, &[1.3, 0.7]);
            channel_attention(g, q, k, v, 2, t)
        })
        .unwrap();
        // out[t, a] = A[a, t] for t inside a's head, so per-head column sums are 1.
        for head in 0..2 {
            for a in head * 4..head * 4 + 4 {
                let s: f64 = (head * 4..head * 4 + 4).map(|t| out.data()[t * 8 + a]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_attention_single_channel_heads_pass_values() {
        let (q, k, v) = (rand_t(6, 4, 1), rand_t(6, 4, 2), rand_t(6, 4, 3));
        let out = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[1.0, 2.0, 3.0, 4.0]);
            channel_attention(g, q, k, v, 4, t)
        })
        .unwrap();
        assert!(close(out.data(), v.data(), 1e-15));
    }

    #[test]
    fn channel_attention_matches_dense_oracle() {
        let (q, k, v) = (rand_t(8, 4, 9), rand_t(8, 4, 10), rand_t(8, 4, 11));
        let out = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[1.7]);
            channel_attention(g, q, k, v, 1, t)
        })
        .unwrap();
        assert!(close(out.data(), &channel_oracle(&q, &k, &v, 1.7), 1e-12));
    }

    #[test]
    fn spatial_attention_single_token() {
        let (q, k, v) = (rand_t(1, 4, 1), rand_t(1, 4, 2), rand_t(1, 4, 3));
        let out = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[1.0]);
            spatial_attention(g, q, k, v, 1, t, 16)
        })
        .unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn spatial_attention_uniform_logits_average() {
        let (q, k, v) = (rand_t(5, 4, 1), rand_t(5, 4, 2), rand_t(5, 4, 3));
        let out = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[0.0]);
            spatial_attention(g, q, k, v, 1, t, 16)
        })
        .unwrap();
        for r in 0..5 {
            for c in 0..4 {
                let mean = (0..5).map(|j| v.data()[j * 4 + c]).sum::<f64>() / 5.0;
                assert!((out.data()[r * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_attention_matches_double_loop() {
        let (q, k, v) = (rand_t(6, 4, 12), rand_t(6, 4, 13), rand_t(6, 4, 14));
        let t = [0.8, 1.6];
        let out = run(&q, &k, &v, |g, q, k, v| {
            let tv = temps(g, &t);
            spatial_attention(g, q, k, v, 2, tv, 16)
        })
        .unwrap();
        assert!(close(out.data(), &spatial_oracle(&q, &k, &v, 2, &t), 1e-12));
    }

    #[test]
    fn spatial_attention_enforces_token_cap() {
        let (q, k, v) = (rand_t(9, 4, 1), rand_t(9, 4, 2), rand_t(9, 4, 3));
        let res = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[1.0]);
            spatial_attention(g, q, k, v, 1, t, 8)
        });
        assert!(matches!(res, Err(Error::Resource { tokens: 9, cap: 8 })));
    }

    #[test]
    fn softmax_outputs_stay_in_value_hull() {
        let (q, k, v) = (rand_t(7, 6, 15), rand_t(7, 6, 16), rand_t(7, 6, 17));
        let sp = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[2.0, 0.5]);
            spatial_attention(g, q, k, v, 2, t, 64)
        })
        .unwrap();
        for c in 0..6 {
            let col: Vec<f64> = (0..7).map(|r| v.data()[r * 6 + c]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            assert!((0..7).all(|r| (lo - 1e-12..=hi + 1e-12).contains(&sp.data()[r * 6 + c])));
        }
        let ch = run(&q, &k, &v, |g, q, k, v| {
            let t = temps(g, &[2.0, 0.5]);
            channel_attention(g, q, k, v, 2, t)
        })
        .unwrap();
        for r in 0..7 {
            for head in 0..2 {
                let slice = &v.data()[r * 6 + head * 3..r * 6 + head * 3 + 3];
                let (lo, hi) = slice.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
                for a in 0..3 {
                    let o = ch.data()[r * 6 + head * 3 + a];
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_attention_is_token_permutation_equivariant() {
        let (q, k, v) = (rand_t(6, 4, 18), rand_t(6, 4, 19), rand_t(6, 4, 20));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |t: &Tensor<f64>| Tensor::from_fn(&[6, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
        let f = |g: &mut Graph<f64>, q, k, v| {
            let t = temps(g, &[1.1, 0.9]);
            channel_attention(g, q, k, v, 2, t)
        };
        let a = run(&q, &k, &v, f).unwrap();
        let b = run(&permute(&q), &permute(&k), &permute(&v), f).unwrap();
        assert!(close(permute(&a).data(), b.data(), 1e-12));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let inputs = vec![rand_t(4, 4, 21), rand_t(4, 4, 22), rand_t(4, 4, 23), Tensor::new(&[2], vec![1.2, 0.6]).unwrap()];
        let opts = GradCheckOptions::default();
        let lin = check(&inputs[..3], |g, x| {
            let o = linear_attention(g, x[0], x[1], x[2], 2).unwrap();
            project(g, o, 1)
        }, &opts);
        let ch = check(&inputs, |g, x| {
            let o = channel_attention(g, x[0], x[1], x[2], 2, x[3]).unwrap();
            project(g, o, 2)
        }, &opts);
        let sp = check(&inputs, |g, x| {
            let o = spatial_attention(g, x[0], x[1], x[2], 2, x[3], 64).unwrap();
            project(g, o, 3)
        }, &opts);
        for r in [lin, ch, sp] {
            assert!(r.max_rel_error < 1e-6, "{:?}", r.per_input);
        }
    }
}
