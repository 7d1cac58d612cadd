//! Fused multi-head softmax attention over token matrices.

use super::{softmax_in_place, Graph, Var};
use crate::tensor::{dot, Real, Tensor};

/// `c = alpha * a @ b + beta * c` on strided row-major views.
///
/// # Safety
/// The pointers and strides must describe valid, non-aliasing regions.
#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: (*const T, isize, isize),
    b: (*const T, isize, isize),
    beta: T,
    c: (*mut T, isize),
) {
    T::gemm(m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, 1);
}

impl<T: Real> Graph<T> {
    /// Per head `h`: `softmax(scale * t[h] * Q_h K_h^T) V_h`, where `Q_h` is the
    /// `h`-th block of `C / heads` columns. Keeps one `N x N` probability matrix
    /// per head for the backward pass.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: T, temperature: Var) -> Var {
        let (n, c) = self.values[q.0].rows_cols();
        assert_eq!(self.values[k.0].rows_cols(), (n, c), "softmax_attention: k shape");
        assert_eq!(self.values[v.0].rows_cols(), (n, c), "softmax_attention: v shape");
        assert_eq!(self.values[temperature.0].len(), heads, "softmax_attention: temperatures");
        assert!(heads > 0 && c % heads == 0, "softmax_attention: heads");
        let d = c / heads;
        let ci = c as isize;
        let temps: Vec<T> = self.values[temperature.0].data().to_vec();
        let mut probs: Vec<T> = Vec::with_capacity(heads * n * n);
        let mut out: Vec<T> = Vec::with_capacity(n * c);
        {
            let (qd, kd, vd) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
            for h in 0..heads {
                // SAFETY: every view stays inside the allocated capacity and the
                // outputs do not alias the inputs. With beta = 0 each gemm
                // writes its whole output block without reading it, so both
                // buffers are initialized once all heads are done.
                unsafe {
                    let p = probs.as_mut_ptr().add(h * n * n);
                    gemm(n, d, n, scale * temps[h], (qd.as_ptr().add(h * d), ci, 1), (kd.as_ptr().add(h * d), 1, ci), T::zero(), (p, n as isize));
                    std::slice::from_raw_parts_mut(p, n * n).chunks_mut(n).for_each(softmax_in_place);
                    gemm(n, n, d, T::one(), (p as *const T, n as isize, 1), (vd.as_ptr().add(h * d), ci, 1), T::zero(), (out.as_mut_ptr().add(h * d), ci));
                }
            }
            unsafe {
                probs.set_len(heads * n * n);
                out.set_len(n * c);
            }
        }
        let out = Tensor::new(&[n, c], out).unwrap();
        self.push(out, &[q, k, v, temperature], move |g, gr| {
            let (qv, kv, vv) = (gr.value(q).data(), gr.value(k).data(), gr.value(v).data());
            let temps = gr.value(temperature).data();
            let gd = g.data();
            let mut ds = vec![T::zero(); n * n];
            let mut gk = vec![T::zero(); n * d];
            for h in 0..heads {
                let p = &probs[h * n * n..(h + 1) * n * n];
                let a = scale * temps[h];
                // dV_h += P^T dO_h
                gr.accumulate(v, |buf| unsafe {
                    gemm(n, n, d, T::one(), (p.as_ptr(), 1, n as isize), (gd.as_ptr().add(h * d), ci, 1), T::one(), (buf.as_mut_ptr().add(h * d), ci));
                });
                // dP = dO_h V_h^T, then dS = P * (dP - rowsum(P * dP)).
                unsafe {
                    gemm(n, d, n, T::one(), (gd.as_ptr().add(h * d), ci, 1), (vv.as_ptr().add(h * d), 1, ci), T::zero(), (ds.as_mut_ptr(), n as isize));
                }
                for (dr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                    let dp = dot(dr, pr);
                    for (x, &y) in dr.iter_mut().zip(pr) {
                        *x = y * (*x - dp);
                    }
                }
                // G = dS K_h; dQ_h += a G; dt_h += scale * <Q_h, G>.
                unsafe {
                    gemm(n, n, d, T::one(), (ds.as_ptr(), n as isize, 1), (kv.as_ptr().add(h * d), ci, 1), T::zero(), (gk.as_mut_ptr(), d as isize));
                }
                if gr.wants(temperature) {
                    let mut dot = T::zero();
                    for (qr, gr_) in qv.chunks(c).zip(gk.chunks(d)) {
                        dot += qr[h * d..(h + 1) * d].iter().zip(gr_).map(|(&x, &y)| x * y).sum::<T>();
                    }
                    gr.accumulate(temperature, |buf| buf[h] += scale * dot);
                }
                gr.accumulate(q, |buf| {
                    for (o, gr_) in buf.chunks_mut(c).zip(gk.chunks(d)) {
                        for (o, &x) in o[h * d..(h + 1) * d].iter_mut().zip(gr_) {
                            *o += a * x;
                        }
                    }
                });
                // dK_h += a dS^T Q_h
                gr.accumulate(k, |buf| unsafe {
                    gemm(n, n, d, a, (ds.as_ptr(), 1, n as isize), (qv.as_ptr().add(h * d), ci, 1), T::one(), (buf.as_mut_ptr().add(h * d), ci));
                });
            }
        })
    }
}
