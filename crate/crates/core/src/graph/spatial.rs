//! Spatial operators on channel-last `[H, W, C]` maps.

use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{matmul_slices, reflect_coord, reflect_index, Real, Tensor};

/// Border handling for sliding-window operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge sample.
    Reflect,
    /// Out-of-bounds taps read zero.
    Zero,
}

const OUTSIDE: u32 = u32::MAX;

/// Source pixel of every `(pixel, tap)` pair of a same-size `k x k` window,
/// laid out as `[h * w, k * k]`. Zero-padded taps are `u32::MAX`.
pub fn im2col_index(h: usize, w: usize, k: usize, padding: Padding) -> Vec<u32> {
    let r = (k / 2) as isize;
    let mut idx = Vec::with_capacity(h * w * k * k);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    let src = match padding {
                        Padding::Reflect => (reflect_index(y, h) * w + reflect_index(x, w)) as u32,
                        Padding::Zero => {
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                OUTSIDE
                            } else {
                                (y as usize * w + x as usize) as u32
                            }
                        }
                    };
                    idx.push(src);
                }
            }
        }
    }
    idx
}

fn im2col<T: Real>(x: &[T], index: &[u32], kk: usize, c: usize) -> Vec<T> {
    let n = index.len() / kk;
    let mut cols = vec![T::zero(); n * kk * c];
    for (dst, &s) in cols.chunks_mut(c).zip(index) {
        if s != OUTSIDE {
            let s = s as usize;
            dst.copy_from_slice(&x[s * c..(s + 1) * c]);
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], index: &[u32], c: usize, out: &mut [T]) {
    for (src, &s) in cols.chunks(c).zip(index) {
        if s != OUTSIDE {
            let s = s as usize;
            for (o, &v) in out[s * c..(s + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
}

/// Flat index table of the `s x s` space-to-channel rearrangement.
/// `out[(i, j), (dy * s + dx) * c + ch] = x[(i * s + dy, j * s + dx), ch]`.
pub fn space_to_depth_index(h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let (ho, wo) = (h / s, w / s);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..ho {
        for j in 0..wo {
            for dy in 0..s {
                for dx in 0..s {
                    let base = ((i * s + dy) * w + (j * s + dx)) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

/// Inverse of [`space_to_depth_index`] for an `[h, w, c * s * s]` input.
pub fn depth_to_space_index(h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let (ho, wo) = (h * s, w * s);
    let cin = c * s * s;
    let mut idx = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for x in 0..wo {
            let (i, dy, j, dx) = (y / s, y % s, x / s, x % s);
            let base = (i * w + j) * cin + (dy * s + dx) * c;
            idx.extend(base..base + c);
        }
    }
    idx
}

impl<T: Real> Graph<T> {
    /// Same-size `k x k` convolution (cross-correlation), stride 1.
    /// `w` has shape `[k * k * cin, cout]` with tap-major rows.
    pub fn conv2d(&mut self, x: Var, w: Var, k: usize, padding: Padding) -> Var {
        let (h, wd, cin) = self.value(x).hwc();
        let (wr, cout) = self.value(w).rows_cols();
        assert_eq!(wr, k * k * cin, "conv2d weight rows must be k*k*cin");
        if k == 1 {
            return self.linear(x, w);
        }
        let kk = k * k;
        let index: Rc<[u32]> = im2col_index(h, wd, k, padding).into();
        let n = h * wd;
        let cols = im2col(self.value(x).data(), &index, kk, cin);
        let mut out = vec![T::zero(); n * cout];
        matmul_slices(&cols, n, kk * cin, false, self.value(w).data(), wr, cout, false, &mut out, false);
        drop(cols);
        let out = Tensor::new(&[h, wd, cout], out).unwrap();
        self.push(out, &[x, w], move |g, gr| {
            let (xv, wv) = (gr.value(x), gr.value(w));
            if gr.wants(w) {
                let cols = im2col(xv.data(), &index, kk, cin);
                gr.accumulate(w, |buf| {
                    matmul_slices(&cols, n, kk * cin, true, g.data(), n, cout, false, buf, true);
                });
            }
            if gr.wants(x) {
                let mut dcols = vec![T::zero(); n * kk * cin];
                matmul_slices(g.data(), n, cout, false, wv.data(), wr, cout, true, &mut dcols, false);
                gr.accumulate(x, |buf| col2im_add(&dcols, &index, cin, buf));
            }
        })
    }

    /// Depthwise `k x k` convolution with reflect padding; `w` is `[k * k, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, k: usize) -> Var {
        let (h, wd, c) = self.value(x).hwc();
        assert_eq!(self.value(w).len(), k * k * c, "depthwise weight must be [k*k, c]");
        let kk = k * k;
        let index: Rc<[u32]> = im2col_index(h, wd, k, Padding::Reflect).into();
        let (xd, wdt) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); h * wd * c];
        for (p, o) in out.chunks_mut(c).enumerate() {
            for t in 0..kk {
                let s = index[p * kk + t] as usize;
                let (src, wt) = (&xd[s * c..(s + 1) * c], &wdt[t * c..(t + 1) * c]);
                for ((o, &a), &b) in o.iter_mut().zip(src).zip(wt) {
                    *o += a * b;
                }
            }
        }
        let out = Tensor::new(&[h, wd, c], out).unwrap();
        self.push(out, &[x, w], move |g, gr| {
            let (xv, wv) = (gr.value(x).data(), gr.value(w).data());
            let gd = g.data();
            gr.accumulate(w, |buf| {
                for (p, gp) in gd.chunks(c).enumerate() {
                    for t in 0..kk {
                        let s = index[p * kk + t] as usize;
                        for ((o, &a), &d) in buf[t * c..(t + 1) * c].iter_mut().zip(&xv[s * c..(s + 1) * c]).zip(gp) {
                            *o += a * d;
                        }
                    }
                }
            });
            gr.accumulate(x, |buf| {
                for (p, gp) in gd.chunks(c).enumerate() {
                    for t in 0..kk {
                        let s = index[p * kk + t] as usize;
                        for ((o, &b), &d) in buf[s * c..(s + 1) * c].iter_mut().zip(&wv[t * c..(t + 1) * c]).zip(gp) {
                            *o += b * d;
                        }
                    }
                }
            });
        })
    }

    /// Bilinearly sampled `k x k` neighbourhoods displaced by learned offsets.
    ///
    /// `offsets` is `[H, W, 2 * k * k]` holding `(dy, dx)` per tap. The result is
    /// `[H * W, k * k * C]`, laid out like an im2col matrix so that multiplying
    /// by a conv weight gives the deformable convolution. Sampling positions are
    /// reflected at the borders, so zero offsets reproduce a reflect-padded conv.
    pub fn deform_columns(&mut self, x: Var, offsets: Var, k: usize) -> Var {
        let (h, w, c) = self.value(x).hwc();
        let kk = k * k;
        assert_eq!(self.value(offsets).shape(), &[h, w, 2 * kk], "offset map shape");
        let taps = bilinear_taps(self.value(offsets).data(), h, w, k);
        let xd = self.value(x).data();
        let n = h * w;
        let mut cols = vec![T::zero(); n * kk * c];
        for (dst, tap) in cols.chunks_mut(c).zip(&taps) {
            for (corner, &wt) in tap.idx.iter().zip(&tap.wt) {
                let src = &xd[*corner * c..(*corner + 1) * c];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wt * v;
                }
            }
        }
        let out = Tensor::new(&[n, kk * c], cols).unwrap();
        self.push(out, &[x, offsets], move |g, gr| {
            let xv = gr.value(x).data();
            let gd = g.data();
            let offv = gr.value(offsets).data();
            let taps = bilinear_taps(offv, h, w, k);
            gr.accumulate(x, |buf| {
                for (gp, tap) in gd.chunks(c).zip(&taps) {
                    for (corner, &wt) in tap.idx.iter().zip(&tap.wt) {
                        for (o, &d) in buf[*corner * c..(*corner + 1) * c].iter_mut().zip(gp) {
                            *o += wt * d;
                        }
                    }
                }
            });
            gr.accumulate(offsets, |buf| {
                for (t_id, (gp, tap)) in gd.chunks(c).zip(&taps).enumerate() {
                    let (p, t) = (t_id / kk, t_id % kk);
                    let v = |i: usize| &xv[tap.idx[i] * c..(tap.idx[i] + 1) * c];
                    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                    let (ly, lx) = (tap.ly, tap.lx);
                    let mut dy = T::zero();
                    let mut dx = T::zero();
                    for ch in 0..c {
                        let d = gp[ch];
                        dy += d * ((T::one() - lx) * (v10[ch] - v00[ch]) + lx * (v11[ch] - v01[ch]));
                        dx += d * ((T::one() - ly) * (v01[ch] - v00[ch]) + ly * (v11[ch] - v10[ch]));
                    }
                    buf[p * 2 * kk + 2 * t] += dy * tap.sy;
                    buf[p * 2 * kk + 2 * t + 1] += dx * tap.sx;
                }
            });
        })
    }

    /// `3 x 3` max pooling with stride 1; the window is clipped at the borders.
    pub fn max_pool3(&mut self, x: Var) -> Var {
        let (h, w, c) = self.value(x).hwc();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); h * w * c];
        let mut argmax = vec![0u32; h * w * c];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut arg = 0;
                    for y in i.saturating_sub(1)..(i + 2).min(h) {
                        for xx in j.saturating_sub(1)..(j + 2).min(w) {
                            let s = (y * w + xx) * c + ch;
                            if xd[s] > best {
                                best = xd[s];
                                arg = s;
                            }
                        }
                    }
                    let o = (i * w + j) * c + ch;
                    out[o] = best;
                    argmax[o] = arg as u32;
                }
            }
        }
        let out = Tensor::new(&[h, w, c], out).unwrap();
        self.push(out, &[x], move |g, gr| {
            gr.accumulate(x, |buf| {
                for (&a, &d) in argmax.iter().zip(g.data()) {
                    buf[a as usize] += d;
                }
            });
        })
    }

    /// `[H, W, C] -> [H / s, W / s, s * s * C]`.
    pub fn space_to_depth(&mut self, x: Var, s: usize) -> Var {
        let (h, w, c) = self.value(x).hwc();
        assert!(h % s == 0 && w % s == 0, "space_to_depth needs dims divisible by {s}");
        let idx: Rc<[usize]> = space_to_depth_index(h, w, c, s).into();
        self.gather(x, idx, &[h / s, w / s, s * s * c])
    }

    /// `[H, W, s * s * C] -> [H * s, W * s, C]` (pixel shuffle).
    pub fn depth_to_space(&mut self, x: Var, s: usize) -> Var {
        let (h, w, cin) = self.value(x).hwc();
        assert_eq!(cin % (s * s), 0, "depth_to_space needs channels divisible by {}", s * s);
        let c = cin / (s * s);
        let idx: Rc<[usize]> = depth_to_space_index(h, w, c, s).into();
        self.gather(x, idx, &[h * s, w * s, c])
    }

    /// Reflect-pads the bottom and right borders up to `[h2, w2]`.
    pub fn pad_reflect(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let (h, w, c) = self.value(x).hwc();
        if (h, w) == (h2, w2) {
            return x;
        }
        let mut idx = Vec::with_capacity(h2 * w2 * c);
        for i in 0..h2 {
            let y = reflect_index(i as isize, h);
            for j in 0..w2 {
                let xx = reflect_index(j as isize, w);
                let base = (y * w + xx) * c;
                idx.extend(base..base + c);
            }
        }
        self.gather(x, idx.into(), &[h2, w2, c])
    }

    /// Keeps the top-left `[h2, w2]` window.
    pub fn crop(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let (h, w, c) = self.value(x).hwc();
        if (h, w) == (h2, w2) {
            return x;
        }
        assert!(h2 <= h && w2 <= w);
        let mut idx = Vec::with_capacity(h2 * w2 * c);
        for i in 0..h2 {
            for j in 0..w2 {
                let base = (i * w + j) * c;
                idx.extend(base..base + c);
            }
        }
        self.gather(x, idx.into(), &[h2, w2, c])
    }
}

struct Tap<T> {
    /// Corners `(y0, x0), (y0, x1), (y1, x0), (y1, x1)` as flat pixel indices.
    idx: [usize; 4],
    wt: [T; 4],
    ly: T,
    lx: T,
    sy: T,
    sx: T,
}

fn bilinear_taps<T: Real>(offsets: &[T], h: usize, w: usize, k: usize) -> Vec<Tap<T>> {
    let kk = k * k;
    let r = (k / 2) as isize;
    let mut taps = Vec::with_capacity(h * w * kk);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for t in 0..kk {
                let di = (t / k) as isize - r;
                let dj = (t % k) as isize - r;
                let y = T::c((i as isize + di) as f64) + offsets[p * 2 * kk + 2 * t];
                let x = T::c((j as isize + dj) as f64) + offsets[p * 2 * kk + 2 * t + 1];
                let (yr, sy) = reflect_coord(y, h);
                let (xr, sx) = reflect_coord(x, w);
                let y0 = (yr.floor().to_usize().unwrap_or(0)).min(h - 1);
                let x0 = (xr.floor().to_usize().unwrap_or(0)).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let ly = yr - T::c(y0 as f64);
                let lx = xr - T::c(x0 as f64);
                let one = T::one();
                taps.push(Tap {
                    idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                    wt: [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx],
                    ly,
                    lx,
                    sy,
                    sx,
                });
            }
        }
    }
    taps
}
