//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! backward closure. Nodes are appended in evaluation order, so walking the tape
//! backwards visits every node after all of its consumers.

mod attend;
mod spatial;

use std::rc::Rc;

use crate::tensor::{dot, matmul_new, matmul_slices, Real, Tensor};

pub use spatial::{im2col_index, Padding};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward<T> = Box<dyn for<'a> Fn(&Tensor<T>, &mut Grads<'a, T>)>;

/// Gradient accumulator handed to backward closures.
pub struct Grads<'a, T: Real> {
    values: &'a [Tensor<T>],
    requires: &'a [bool],
    grads: Vec<Option<Tensor<T>>>,
}

impl<'a, T: Real> Grads<'a, T> {
    #[inline]
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.values[v.0]
    }

    #[inline]
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulates in place into the gradient buffer of `v`, allocating zeros
    /// on first use. Does nothing when `v` does not require a gradient.
    pub fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.requires[v.0] {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.values[v.0].shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        self.accumulate(v, |buf| {
            for (a, &b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        });
    }

    /// Adds an owned gradient, reusing its allocation when the slot is empty.
    pub fn add_owned(&mut self, v: Var, g: Tensor<T>) {
        if !self.requires[v.0] {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g.reshape(self.values[v.0].shape()).expect("gradient shape")),
        }
    }
}

/// Gradients of the leaves after a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

/// Recording tape of tensor operations.
pub struct Graph<T: Real> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    backward: Vec<Option<Backward<T>>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self { values: Vec::new(), requires: Vec::new(), backward: Vec::new(), record: true }
    }

    /// Graph for forward evaluation only; no closures are kept.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that receives gradients (when recording).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor<T>, requires: bool) -> Var {
        let id = self.values.len();
        self.values.push(t);
        self.requires.push(requires && self.record);
        self.backward.push(None);
        Var(id)
    }

    /// Appends an operation result. `back` is stored only if some parent
    /// requires a gradient.
    pub(crate) fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], back: F) -> Var
    where
        F: for<'a> Fn(&Tensor<T>, &mut Grads<'a, T>) + 'static,
    {
        let id = self.values.len();
        let requires = self.record && parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(requires);
        self.backward.push(if requires { Some(Box::new(back)) } else { None });
        Var(id)
    }

    /// Index the next pushed node will receive.
    #[inline]
    pub(crate) fn next_id(&self) -> Var {
        Var(self.values.len())
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.values[out.0].len(), 1, "backward() needs a scalar output");
        let seed = Tensor::full(self.values[out.0].shape(), T::one());
        self.backward_with(out, seed)
    }

    /// Backpropagates an arbitrary output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads = Grads {
            values: &self.values,
            requires: &self.requires,
            grads: (0..self.values.len()).map(|_| None).collect(),
        };
        if !self.requires[out.0] {
            return Gradients { grads: grads.grads };
        }
        grads.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(back) = &self.backward[i] else { continue };
            let Some(g) = grads.grads[i].take() else { continue };
            back(&g, &mut grads);
        }
        Gradients { grads: grads.grads }
    }

    // ---------------------------------------------------------------------
    // Elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        self.push(v, &[a, b], move |g, gr| {
            gr.add(a, g.data());
            gr.add(b, g.data());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        self.push(v, &[a, b], move |g, gr| {
            gr.add(a, g.data());
            gr.accumulate(b, |buf| {
                for (o, &d) in buf.iter_mut().zip(g.data()) {
                    *o -= d;
                }
            });
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        self.push(v, &[a, b], move |g, gr| {
            let (av, bv) = (gr.value(a), gr.value(b));
            gr.accumulate(a, |buf| {
                for ((o, &d), &y) in buf.iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += d * y;
                }
            });
            gr.accumulate(b, |buf| {
                for ((o, &d), &x) in buf.iter_mut().zip(g.data()).zip(av.data()) {
                    *o += d * x;
                }
            });
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.values[a.0].scale(s);
        self.push(v, &[a], move |g, gr| {
            gr.accumulate(a, |buf| {
                for (o, &d) in buf.iter_mut().zip(g.data()) {
                    *o += d * s;
                }
            });
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.values[a.0].map(|x| x + s);
        self.push(v, &[a], move |g, gr| gr.add(a, g.data()))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.values[s.0].len(), 1, "scale_by expects a scalar");
        let sv = self.values[s.0].data()[0];
        let v = self.values[x.0].scale(sv);
        self.push(v, &[x, s], move |g, gr| {
            let sv = gr.value(s).data()[0];
            let xv = gr.value(x);
            gr.accumulate(x, |buf| {
                for (o, &d) in buf.iter_mut().zip(g.data()) {
                    *o += d * sv;
                }
            });
            if gr.wants(s) {
                let dot: T = g.data().iter().zip(xv.data()).map(|(&d, &x)| d * x).sum();
                gr.accumulate(s, |buf| buf[0] += dot);
            }
        })
    }

    /// Element `i` of a flat tensor as a one-element tensor.
    pub fn select(&mut self, x: Var, i: usize) -> Var {
        let v = Tensor::full(&[1], self.values[x.0].data()[i]);
        self.push(v, &[x], move |g, gr| gr.accumulate(x, |buf| buf[i] += g.data()[0]))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.values[x.0].map(|e| e.max(lo).min(hi));
        self.push(v, &[x], move |g, gr| {
            let xv = gr.value(x);
            gr.accumulate(x, |buf| {
                for ((o, &d), &e) in buf.iter_mut().zip(g.data()).zip(xv.data()) {
                    if e > lo && e < hi {
                        *o += d;
                    }
                }
            });
        })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = T::c((2.0 / std::f64::consts::PI).sqrt());
        let a = T::c(0.044715);
        let half = T::c(0.5);
        let v = self.values[x.0].map(|e| half * e * (T::one() + (k * (e + a * e * e * e)).tanh()));
        self.push(v, &[x], move |g, gr| {
            let xv = gr.value(x);
            gr.accumulate(x, |buf| {
                for ((o, &d), &e) in buf.iter_mut().zip(g.data()).zip(xv.data()) {
                    let inner = k * (e + a * e * e * e);
                    let t = inner.tanh();
                    let dinner = k * (T::one() + T::c(3.0) * a * e * e);
                    let dy = half * (T::one() + t) + half * e * (T::one() - t * t) * dinner;
                    *o += d * dy;
                }
            });
        })
    }

    /// `elu(x) + 1`, a strictly positive smooth feature map.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|e| if e > T::zero() { e + T::one() } else { e.exp() });
        self.push(v, &[x], move |g, gr| {
            let xv = gr.value(x);
            gr.accumulate(x, |buf| {
                for ((o, &d), &e) in buf.iter_mut().zip(g.data()).zip(xv.data()) {
                    *o += if e > T::zero() { d } else { d * e.exp() };
                }
            });
        })
    }

    // ---------------------------------------------------------------------
    // Row/column broadcasting. A tensor is viewed as `[rows, cols]` with the
    // last axis as columns.

    /// `x[r, c] * m[r]`.
    pub fn mul_rows(&mut self, x: Var, m: Var) -> Var {
        let (rows, cols) = self.values[x.0].rows_cols();
        assert_eq!(self.values[m.0].len(), rows, "mul_rows length mismatch");
        let mv = self.values[m.0].data();
        let mut out = self.values[x.0].clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            let s = mv[r];
            row.iter_mut().for_each(|e| *e *= s);
        }
        self.push(out, &[x, m], move |g, gr| {
            let (xv, mv) = (gr.value(x), gr.value(m));
            gr.accumulate(x, |buf| {
                for (r, (o, d)) in buf.chunks_mut(cols).zip(g.data().chunks(cols)).enumerate() {
                    let s = mv.data()[r];
                    for (o, &d) in o.iter_mut().zip(d) {
                        *o += d * s;
                    }
                }
            });
            gr.accumulate(m, |buf| {
                for (r, (xr, d)) in xv.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                    buf[r] += xr.iter().zip(d).map(|(&a, &b)| a * b).sum::<T>();
                }
            });
        })
    }

    /// `x[r, c] / d[r]`.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Var {
        let (rows, cols) = self.values[x.0].rows_cols();
        assert_eq!(self.values[d.0].len(), rows, "div_rows length mismatch");
        let dv = self.values[d.0].data();
        let mut out = self.values[x.0].clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            let inv = T::one() / dv[r];
            row.iter_mut().for_each(|e| *e *= inv);
        }
        let out_id = self.next_id();
        self.push(out, &[x, d], move |g, gr| {
            let (yv, dv) = (gr.value(out_id), gr.value(d));
            gr.accumulate(x, |buf| {
                for (r, (o, gd)) in buf.chunks_mut(cols).zip(g.data().chunks(cols)).enumerate() {
                    let inv = T::one() / dv.data()[r];
                    for (o, &gd) in o.iter_mut().zip(gd) {
                        *o += gd * inv;
                    }
                }
            });
            gr.accumulate(d, |buf| {
                for (r, (yr, gd)) in yv.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                    let s: T = yr.iter().zip(gd).map(|(&y, &gg)| y * gg).sum();
                    buf[r] -= s / dv.data()[r];
                }
            });
        })
    }

    /// `x[r, c] * v[c]`.
    pub fn mul_cols(&mut self, x: Var, v: Var) -> Var {
        let (_, cols) = self.values[x.0].rows_cols();
        assert_eq!(self.values[v.0].len(), cols, "mul_cols length mismatch");
        let vv = self.values[v.0].data();
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (e, &s) in row.iter_mut().zip(vv) {
                *e *= s;
            }
        }
        self.push(out, &[x, v], move |g, gr| {
            let (xv, vv) = (gr.value(x), gr.value(v));
            gr.accumulate(x, |buf| {
                for (o, d) in buf.chunks_mut(cols).zip(g.data().chunks(cols)) {
                    for ((o, &d), &s) in o.iter_mut().zip(d).zip(vv.data()) {
                        *o += d * s;
                    }
                }
            });
            gr.accumulate(v, |buf| {
                for (xr, d) in xv.data().chunks(cols).zip(g.data().chunks(cols)) {
                    for ((o, &a), &b) in buf.iter_mut().zip(xr).zip(d) {
                        *o += a * b;
                    }
                }
            });
        })
    }

    /// `x[r, c] + b[c]`.
    pub fn add_cols(&mut self, x: Var, b: Var) -> Var {
        let (_, cols) = self.values[x.0].rows_cols();
        assert_eq!(self.values[b.0].len(), cols, "add_cols length mismatch");
        let bv = self.values[b.0].data();
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (e, &s) in row.iter_mut().zip(bv) {
                *e += s;
            }
        }
        self.push(out, &[x, b], move |g, gr| {
            gr.add(x, g.data());
            gr.accumulate(b, |buf| {
                for d in g.data().chunks(cols) {
                    for (o, &d) in buf.iter_mut().zip(d) {
                        *o += d;
                    }
                }
            });
        })
    }

    /// Column sums as a `[1, cols]` tensor.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.values[x.0].rows_cols();
        let mut out = vec![T::zero(); cols];
        for row in self.values[x.0].data().chunks(cols) {
            for (o, &e) in out.iter_mut().zip(row) {
                *o += e;
            }
        }
        let out = Tensor::new(&[1, cols], out).unwrap();
        self.push(out, &[x], move |g, gr| {
            gr.accumulate(x, |buf| {
                for row in buf.chunks_mut(cols) {
                    for (o, &d) in row.iter_mut().zip(g.data()) {
                        *o += d;
                    }
                }
            });
        })
    }

    /// Replaces every row by the column mean (global average pooling followed
    /// by broadcast back to the input shape).
    pub fn mean_rows_broadcast(&mut self, x: Var) -> Var {
        let (rows, cols) = self.values[x.0].rows_cols();
        let inv = T::one() / T::c(rows as f64);
        let mut mean = vec![T::zero(); cols];
        for row in self.values[x.0].data().chunks(cols) {
            for (o, &e) in mean.iter_mut().zip(row) {
                *o += e;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        let shape = self.shape(x).to_vec();
        let out = Tensor::from_fn(&shape, |i| mean[i % cols]);
        self.push(out, &[x], move |g, gr| {
            let mut gsum = vec![T::zero(); cols];
            for row in g.data().chunks(cols) {
                for (o, &d) in gsum.iter_mut().zip(row) {
                    *o += d;
                }
            }
            gr.accumulate(x, |buf| {
                for row in buf.chunks_mut(cols) {
                    for (o, &s) in row.iter_mut().zip(&gsum) {
                        *o += s * inv;
                    }
                }
            });
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        self.push(Tensor::full(&[1], s), &[x], move |g, gr| {
            let d = g.data()[0];
            gr.accumulate(x, |buf| buf.iter_mut().for_each(|o| *o += d));
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::c(self.values[x.0].len() as f64);
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    // ---------------------------------------------------------------------
    // Normalization

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.values[x.0].rows_cols();
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out_id = self.next_id();
        self.push(out, &[x], move |g, gr| {
            let y = gr.value(out_id);
            gr.accumulate(x, |buf| {
                for ((o, yr), dr) in buf.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dp = dot(yr, dr);
                    for ((o, &yy), &dd) in o.iter_mut().zip(yr).zip(dr) {
                        *o += yy * (dd - dp);
                    }
                }
            });
        })
    }

    /// Divides every column by its L2 norm over the rows (floored at `eps`).
    pub fn l2norm_cols(&mut self, x: Var, eps: T) -> Var {
        let (rows, cols) = self.values[x.0].rows_cols();
        let norms = col_norms(self.values[x.0].data(), rows, cols, eps);
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (e, &n) in row.iter_mut().zip(&norms) {
                *e /= n;
            }
        }
        let out_id = self.next_id();
        self.push(out, &[x], move |g, gr| {
            let xv = gr.value(x);
            let y = gr.value(out_id);
            let norms = col_norms(xv.data(), rows, cols, eps);
            let raw = col_norms(xv.data(), rows, cols, T::zero());
            let mut dots = vec![T::zero(); cols];
            for (yr, dr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                for ((s, &a), &b) in dots.iter_mut().zip(yr).zip(dr) {
                    *s += a * b;
                }
            }
            gr.accumulate(x, |buf| {
                for ((o, yr), dr) in buf.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    for c in 0..cols {
                        let n = norms[c];
                        if raw[c] > eps {
                            o[c] += (dr[c] - yr[c] * dots[c]) / n;
                        } else {
                            o[c] += dr[c] / n;
                        }
                    }
                }
            });
        })
    }

    /// Layer normalization over the last axis with a learnable gain and no bias.
    pub fn layer_norm(&mut self, x: Var, weight: Var, eps: T) -> Var {
        let (_, cols) = self.values[x.0].rows_cols();
        assert_eq!(self.values[weight.0].len(), cols);
        let w = self.values[weight.0].data();
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(cols) {
            let (mean, inv) = row_stats(row, eps);
            for (e, &wc) in row.iter_mut().zip(w) {
                *e = (*e - mean) * inv * wc;
            }
        }
        self.push(out, &[x, weight], move |g, gr| {
            let xv = gr.value(x);
            let wv = gr.value(weight).data();
            let n = T::c(cols as f64);
            let want_x = gr.wants(x);
            let mut dw = vec![T::zero(); cols];
            let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            let mut xhat = vec![T::zero(); cols];
            let mut dxhat = vec![T::zero(); cols];
            for (r, (xr, dr)) in xv.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                let (mean, inv) = row_stats(xr, eps);
                for c in 0..cols {
                    xhat[c] = (xr[c] - mean) * inv;
                    dxhat[c] = dr[c] * wv[c];
                    dw[c] += dr[c] * xhat[c];
                }
                if want_x {
                    let m1: T = dxhat.iter().copied().sum::<T>() / n;
                    let m2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let o = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        o[c] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
            }
            if want_x {
                gr.add(x, &dx);
            }
            gr.add(weight, &dw);
        })
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    /// 2D product `op(a) @ op(b)`; inputs are viewed through [`Tensor::rows_cols`].
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (ar, ac) = self.values[a.0].rows_cols();
        let (br, bc) = self.values[b.0].rows_cols();
        let m = if trans_a { ac } else { ar };
        let n = if trans_b { br } else { bc };
        let out = matmul_new(self.values[a.0].data(), ar, ac, trans_a, self.values[b.0].data(), br, bc, trans_b);
        let out = Tensor::new(&[m, n], out).unwrap();
        self.push(out, &[a, b], move |g, gr| {
            let (av, bv) = (gr.value(a), gr.value(b));
            let gd = g.data();
            // C = op(A) op(B)
            gr.accumulate(a, |buf| {
                if trans_a {
                    // A^T = ... => dA = op(B) dC^T  (ar x ac) = (k x n)(n x m)
                    matmul_slices(bv.data(), br, bc, trans_b, gd, m, n, true, buf, true);
                } else {
                    // dA = dC op(B)^T
                    matmul_slices(gd, m, n, false, bv.data(), br, bc, !trans_b, buf, true);
                }
            });
            gr.accumulate(b, |buf| {
                if trans_b {
                    // dB = dC^T op(A)  (n x k)
                    matmul_slices(gd, m, n, true, av.data(), ar, ac, trans_a, buf, true);
                } else {
                    // dB = op(A)^T dC
                    matmul_slices(av.data(), ar, ac, !trans_a, gd, m, n, false, buf, true);
                }
            });
        })
    }

    /// Applies `w: [cin, cout]` to the last axis of `x`, keeping leading axes.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let mut shape = self.shape(x).to_vec();
        let (wr, wc) = self.values[w.0].rows_cols();
        assert_eq!(*shape.last().unwrap(), wr, "linear: channel mismatch");
        *shape.last_mut().unwrap() = wc;
        let y = self.matmul(x, w, false, false);
        self.reshape(y, &shape)
    }

    // ---------------------------------------------------------------------
    // Shape manipulation

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let v = self.values[x.0].clone().reshape(shape).expect("reshape");
        self.push(v, &[x], move |g, gr| gr.add(x, g.data()))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        let (rows, cols) = self.values[x.0].rows_cols();
        assert!(start + len <= cols, "narrow_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for row in self.values[x.0].data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, out).unwrap();
        self.push(out, &[x], move |g, gr| {
            gr.accumulate(x, |buf| {
                for (o, d) in buf.chunks_mut(cols).zip(g.data().chunks(len)) {
                    for (o, &d) in o[start..start + len].iter_mut().zip(d) {
                        *o += d;
                    }
                }
            });
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.values[xs[0].0].rows_cols().0;
        let widths: Vec<usize> = xs.iter().map(|x| self.values[x.0].rows_cols().1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, &w) in xs.iter().zip(&widths) {
                let d = self.values[x.0].data();
                assert_eq!(d.len(), rows * w, "concat_cols row mismatch");
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.shape(xs[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(&shape, out).unwrap();
        let xs: Vec<Var> = xs.to_vec();
        let parents = xs.clone();
        self.push(out, &parents, move |g, gr| {
            let mut offset = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                gr.accumulate(x, |buf| {
                    for (o, d) in buf.chunks_mut(w).zip(g.data().chunks(total)) {
                        for (o, &d) in o.iter_mut().zip(&d[offset..offset + w]) {
                            *o += d;
                        }
                    }
                });
                offset += w;
            }
        })
    }

    /// Rows `[start, start + len)` of a matrix view.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.values[x.0].rows_cols();
        assert!(start + len <= rows, "narrow_rows out of range");
        let data = self.values[x.0].data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(&[len, cols], data).unwrap();
        self.push(out, &[x], move |g, gr| {
            gr.accumulate(x, |buf| {
                for (o, &d) in buf[start * cols..(start + len) * cols].iter_mut().zip(g.data()) {
                    *o += d;
                }
            });
        })
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let cols = self.values[xs[0].0].rows_cols().1;
        let mut out = Vec::new();
        let mut sizes = Vec::with_capacity(xs.len());
        for x in xs {
            let (_, c) = self.values[x.0].rows_cols();
            assert_eq!(c, cols, "concat_rows column mismatch");
            out.extend_from_slice(self.values[x.0].data());
            sizes.push(self.values[x.0].len());
        }
        let rows = out.len() / cols;
        let out = Tensor::new(&[rows, cols], out).unwrap();
        let xs: Vec<Var> = xs.to_vec();
        let parents = xs.clone();
        self.push(out, &parents, move |g, gr| {
            let mut offset = 0;
            for (&x, &n) in xs.iter().zip(&sizes) {
                gr.add(x, &g.data()[offset..offset + n]);
                offset += n;
            }
        })
    }

    /// `out[i, :] = x[index[i], :]`; the index may repeat or skip rows.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Var {
        let (_, cols) = self.values[x.0].rows_cols();
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index.iter() {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(&[index.len(), cols], out).unwrap();
        self.push(out, &[x], move |g, gr| {
            gr.accumulate(x, |buf| {
                for (&r, d) in index.iter().zip(g.data().chunks(cols)) {
                    for (o, &d) in buf[r * cols..(r + 1) * cols].iter_mut().zip(d) {
                        *o += d;
                    }
                }
            });
        })
    }

    /// Flat element gather `out[i] = x[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Var {
        let src = self.values[x.0].data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, out).expect("gather shape");
        self.push(out, &[x], move |g, gr| {
            gr.accumulate(x, |buf| {
                for (&i, &d) in index.iter().zip(g.data()) {
                    buf[i] += d;
                }
            });
        })
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    // Eight independent lanes keep the reductions vectorizable.
    let mut lanes = [T::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for (l, &e) in lanes.iter_mut().zip(c) {
            *l = if e > *l { e } else { *l };
        }
    }
    let max = chunks.remainder().iter().chain(&lanes).fold(T::neg_infinity(), |m, &e| m.max(e));
    for e in row.iter_mut() {
        *e = (*e - max).exp_nonpos();
    }
    let mut lanes = [T::zero(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for (l, &e) in lanes.iter_mut().zip(c) {
            *l += e;
        }
    }
    let sum = chunks.remainder().iter().copied().sum::<T>() + lanes.iter().copied().sum::<T>();
    let inv = T::one() / sum;
    row.iter_mut().for_each(|e| *e *= inv);
}

fn col_norms<T: Real>(data: &[T], rows: usize, cols: usize, eps: T) -> Vec<T> {
    let mut sq = vec![T::zero(); cols];
    for row in data.chunks(cols).take(rows) {
        for (s, &e) in sq.iter_mut().zip(row) {
            *s += e * e;
        }
    }
    sq.into_iter().map(|s| s.sqrt().max(eps)).collect()
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}
