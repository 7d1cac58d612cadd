//! Classical spectral decomposition of an image: a Sobel gradient-magnitude map
//! for high-frequency edges and a truncated SVD reconstruction for the
//! low-frequency, low-rank content. Both keep the input resolution.
//!
//! Everything here runs in `f64` regardless of the network precision.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, Real, Tensor};

/// Luma weights applied to `(R, G, B)`.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];


/// Row-major `h x w` matrix of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!("{h}x{w} plane needs {} values, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn transpose(&self) -> Plane {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                data[x * self.h + y] = self.at(y, x);
            }
        }
        Plane { h: self.w, w: self.h, data }
    }

    pub fn frobenius_distance(&self, other: &Plane) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// `[h, w, 1]` tensor in the requested precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[self.h, self.w, 1], self.data.iter().map(|&v| T::c(v)).collect()).unwrap()
    }
}

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage(Plane);

impl GrayImage {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(v) = plane.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("gray value {v} outside [0, 1]")));
        }
        Ok(Self(plane))
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }
}

impl Deref for GrayImage {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

/// Single-channel output of a decomposition filter, same size as its source.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralChannel(pub Plane);

impl Deref for SpectralChannel {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

/// Weighted luma of an `[H, W, 3]` image.
pub fn to_grayscale<T: Real>(img: &Tensor<T>) -> Result<GrayImage> {
    if img.ndim() != 3 || img.shape()[2] != 3 {
        return Err(Error::Dimension(format!("expected an [H, W, 3] image, got {:?}", img.shape())));
    }
    let (h, w, _) = img.hwc();
    let mut data = Vec::with_capacity(h * w);
    for px in img.data().chunks(3) {
        let v: f64 = px.iter().zip(LUMA_WEIGHTS).map(|(c, k)| c.to_f64().unwrap() * k).sum();
        // Rounding can push a white pixel a few ulps past 1.
        data.push(if v > 1.0 { 1.0 } else { v });
    }
    GrayImage::new(Plane { h, w, data })
}

/// Gradient magnitude `sqrt(Gx^2 + Gy^2)` from the 3x3 Sobel pair with reflect
/// padding.
pub fn sobel_magnitude(gray: &GrayImage) -> Result<SpectralChannel> {
    if gray.h < 3 || gray.w < 3 {
        return Err(Error::Dimension(format!(
            "Sobel needs at least 3x3 pixels, got {}x{}",
            gray.h, gray.w
        )));
    }
    Ok(sobel_reflect(gray))
}

/// Sobel magnitude for any size; reflection folds repeatedly on tiny inputs.
/// `Gx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]` and `Gy = Gx^T`.
pub(crate) fn sobel_reflect(plane: &Plane) -> SpectralChannel {
    let (h, w) = (plane.h, plane.w);
    let mut out = Vec::with_capacity(h * w);
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
    for i in 0..h {
        for j in 0..w {
            let v = |di: usize, dj: usize| {
                plane.at(reflect_index(i as isize + di as isize - 1, h), reflect_index(j as isize + dj as isize - 1, w))
            };
            // Differences first, so constant neighbourhoods give exactly zero.
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (t, &s) in SMOOTH.iter().enumerate() {
                gx += s * (v(t, 2) - v(t, 0));
                gy += s * (v(2, t) - v(0, t));
            }
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    SpectralChannel(Plane { h, w, data: out })
}

/// Truncation rank used when none is configured: `max(1, min(h, w) / 16)`.
pub fn default_rank(h: usize, w: usize) -> usize {
    (h.min(w) / 16).max(1)
}

/// Thin singular value decomposition with singular values sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    pub singular_values: Vec<f64>,
    /// Left singular vectors, one `rows`-long column each.
    pub u: Vec<Vec<f64>>,
    /// Right singular vectors, one `cols`-long column each.
    pub v: Vec<Vec<f64>>,
}

impl Svd {
    /// `sum_{i < rank} s_i u_i v_i^T`.
    pub fn reconstruct(&self, rank: usize) -> Plane {
        let mut out = Plane::zeros(self.rows, self.cols);
        for k in 0..rank.min(self.singular_values.len()) {
            let s = self.singular_values[k];
            if s == 0.0 {
                continue;
            }
            for (y, &uy) in self.u[k].iter().enumerate() {
                let a = s * uy;
                let row = &mut out.data[y * self.cols..(y + 1) * self.cols];
                for (o, &vx) in row.iter_mut().zip(&self.v[k]) {
                    *o += a * vx;
                }
            }
        }
        out
    }
}

/// One-sided Jacobi SVD.
pub fn svd(a: &Plane) -> Result<Svd> {
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("SVD input contains non-finite values".into()));
    }
    if a.h < a.w {
        let t = svd(&a.transpose())?;
        return Ok(Svd { rows: a.h, cols: a.w, singular_values: t.singular_values, u: t.v, v: t.u });
    }
    let (m, n) = (a.h, a.w);
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = dots(&b[p], &b[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> =
        b.iter().enumerate().map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut singular_values = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for (s, j) in order {
        singular_values.push(s);
        u.push(if s > 0.0 { b[j].iter().map(|x| x / s).collect() } else { vec![0.0; m] });
        vs.push(std::mem::take(&mut v[j]));
    }
    Ok(Svd { rows: m, cols: n, singular_values, u, v: vs })
}

fn dots(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        a += x * x;
        b += y * y;
        g += x * y;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Best rank-`rank` approximation of `plane` in the Frobenius norm.
pub fn svd_lowrank(plane: &Plane, rank: usize) -> Result<SpectralChannel> {
    let max = plane.h.min(plane.w);
    if rank == 0 || rank > max {
        return Err(Error::Parameter(format!("SVD rank {rank} outside 1..={max}")));
    }
    Ok(SpectralChannel(svd(plane)?.reconstruct(rank)))
}

/// Bilinear resize of an `[H, W, C]` tensor using half-pixel centres.
pub fn resize_bilinear<T: Real>(img: &Tensor<T>, h2: usize, w2: usize) -> Tensor<T> {
    let (h, w, c) = img.hwc();
    if (h, w) == (h2, w2) {
        return img.clone();
    }
    let src = img.data();
    let sy = h as f64 / h2 as f64;
    let sx = w as f64 / w2 as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let p0 = p.floor() as usize;
        (p0, (p0 + 1).min(n - 1), p - p0 as f64)
    };
    let mut out = Vec::with_capacity(h2 * w2 * c);
    for i in 0..h2 {
        let (y0, y1, ly) = coord(i, sy, h);
        for j in 0..w2 {
            let (x0, x1, lx) = coord(j, sx, w);
            for ch in 0..c {
                let v = |y: usize, x: usize| src[(y * w + x) * c + ch].to_f64().unwrap();
                let top = v(y0, x0) * (1.0 - lx) + v(y0, x1) * lx;
                let bot = v(y1, x0) * (1.0 - lx) + v(y1, x1) * lx;
                out.push(T::c(top * (1.0 - ly) + bot * ly));
            }
        }
    }
    Tensor::new(&[h2, w2, c], out).unwrap()
}
