//! Shared fixtures for the benchmarks.

use wxrestore::Tensor;

/// Deterministic `[n, c]` token matrix with values in `[-1, 1]`.
pub fn tokens(n: usize, c: usize, salt: f64) -> Tensor<f32> {
    Tensor::from_fn(&[n, c], |i| ((i as f64 * 0.618 + salt).sin()) as f32)
}

/// Deterministic smooth `[h, w, 3]` image in `[0, 1]`.
pub fn image(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 3], |i| {
        let (p, ch) = (i / 3, i % 3);
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        0.5 + 0.4 * ((0.13 * x + 0.07 * y + ch as f64).sin() * (0.05 * x * y / (h as f64)).cos())
    })
}
