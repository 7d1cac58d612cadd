//! Full-reference image quality metrics on `[H, W, C]` tensors in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("images {:?} and {:?} differ in shape", a.shape(), b.shape())));
    }
    if a.ndim() != 3 {
        return Err(Error::Dimension(format!("expected [H, W, C], got {:?}", a.shape())));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / MSE)` in decibels, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, e) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *e = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|e| *e /= s);
    w
}

/// Separable valid-region filtering of a single `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions of every channel, averaged
/// across channels.
pub fn ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_pair(pred, target)?;
    let (h, w, c) = pred.hwc();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().skip(ch).step_by(c).map(|v| v.to_f64().unwrap()).collect() };
        let (x, y) = (plane(pred), plane(target));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}
