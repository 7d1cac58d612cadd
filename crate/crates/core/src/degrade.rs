//! Seeded synthetic weather degradations and procedural clean scenes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Rain,
    Snow,
    Raindrop,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [Self::Rain, Self::Snow, Self::Raindrop];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rain => "rain",
            Self::Snow => "snow",
            Self::Raindrop => "raindrop",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(Self::Rain),
            "snow" => Ok(Self::Snow),
            "raindrop" => Ok(Self::Raindrop),
            other => Err(Error::Validation(format!("unknown degradation tag {other:?}"))),
        }
    }
}

/// Parameters of every degradation kind; only the fields of `kind` are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// In `[0, 1]`; expected element count scales linearly with it.
    pub density: f64,
    /// Streak length range in pixels, `1 <= min <= max <= 256`.
    pub streak_length: [f64; 2],
    /// Mean streak angle from vertical in degrees, `[-60, 60]`.
    pub streak_angle: f64,
    /// Uniform angle jitter in degrees, `[0, 30]`.
    pub streak_jitter: f64,
    /// Peak additive streak brightness, `(0, 1]`.
    pub streak_intensity: f64,
    /// Snow particle radius range in pixels, `0.5 <= min <= max <= 16`.
    pub particle_radius: [f64; 2],
    /// Peak particle opacity, `(0, 1]`.
    pub particle_opacity: f64,
    /// Exact raindrop blob count in `[1, 256]`; derived from `density` when unset.
    /// A zero density still produces no blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blob_count: Option<usize>,
    /// Raindrop blob radius range in pixels, `2 <= min <= max <= 64`.
    pub blob_radius: [f64; 2],
    /// Radial displacement at the blob centre relative to the radius, `[0, 1]`.
    pub refraction: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Rain,
            density: 0.5,
            streak_length: [6.0, 16.0],
            streak_angle: 15.0,
            streak_jitter: 6.0,
            streak_intensity: 0.6,
            particle_radius: [0.8, 2.5],
            particle_opacity: 0.9,
            blob_count: None,
            blob_radius: [4.0, 9.0],
            refraction: 0.6,
            seed: 0,
        }
    }
}

/// Pixel area per expected element at density 1.
const RAIN_AREA: f64 = 40.0;
const SNOW_AREA: f64 = 60.0;
const DROP_AREA: f64 = 300.0;
const DROP_GLOW: f64 = 0.4;

fn check_range(name: &str, v: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(v[0].is_finite() && v[1].is_finite() && lo <= v[0] && v[0] <= v[1] && v[1] <= hi) {
        return Err(Error::Validation(format!("{name} {v:?} must satisfy {lo} <= min <= max <= {hi}")));
    }
    Ok(())
}

fn check_scalar(name: &str, v: f64, lo: f64, hi: f64, open_lo: bool) -> Result<()> {
    let ok = v.is_finite() && v <= hi && if open_lo { v > lo } else { v >= lo };
    if !ok {
        return Err(Error::Validation(format!("{name} {v} outside the allowed range [{lo}, {hi}]")));
    }
    Ok(())
}

impl DegradationSpec {
    pub fn of_kind(kind: DegradationKind, density: f64, seed: u64) -> Self {
        Self { kind, density, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        check_scalar("density", self.density, 0.0, 1.0, false)?;
        check_range("streak_length", self.streak_length, 1.0, 256.0)?;
        check_scalar("streak_angle", self.streak_angle, -60.0, 60.0, false)?;
        check_scalar("streak_jitter", self.streak_jitter, 0.0, 30.0, false)?;
        check_scalar("streak_intensity", self.streak_intensity, 0.0, 1.0, true)?;
        check_range("particle_radius", self.particle_radius, 0.5, 16.0)?;
        check_scalar("particle_opacity", self.particle_opacity, 0.0, 1.0, true)?;
        if let Some(n) = self.blob_count {
            if !(1..=256).contains(&n) {
                return Err(Error::Validation(format!("blob_count {n} outside [1, 256]")));
            }
        }
        check_range("blob_radius", self.blob_radius, 2.0, 64.0)?;
        check_scalar("refraction", self.refraction, 0.0, 1.0, false)?;
        Ok(())
    }
}

/// A degraded/clean pair with its degradation tag.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub degraded: Tensor<f64>,
    pub clean: Tensor<f64>,
    pub kind: DegradationKind,
}

/// Element count with stochastic rounding of the expected value.
fn element_count(rng: &mut ChaCha8Rng, density: f64, area: usize, per: f64) -> usize {
    let expect = density * area as f64 / per;
    let base = expect.floor();
    base as usize + usize::from(rng.random::<f64>() < expect - base)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn rain(img: &mut Tensor<f64>, spec: &DegradationSpec, rng: &mut ChaCha8Rng) {
    let (h, w, _) = img.hwc();
    let n = element_count(rng, spec.density, h * w, RAIN_AREA);
    let mut layer = vec![0.0f64; h * w];
    let mut streak: Vec<(usize, f64)> = Vec::new();
    for _ in 0..n {
        let y0 = rng.random_range(0.0..h as f64);
        let x0 = rng.random_range(0.0..w as f64);
        let jitter = if spec.streak_jitter > 0.0 { rng.random_range(-spec.streak_jitter..spec.streak_jitter) } else { 0.0 };
        let theta = (spec.streak_angle + jitter).to_radians();
        let len = uniform(rng, spec.streak_length);
        let amp = spec.streak_intensity * rng.random_range(0.6..1.0);
        let (dy, dx) = (theta.cos(), theta.sin());
        streak.clear();
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let (y, x) = ((y0 + t * dy).floor(), (x0 + t * dx).floor());
            if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                continue;
            }
            // Brightest at the centre of the streak.
            let fade = 1.0 - (2.0 * t / len.max(1e-9) - 1.0).abs() * 0.5;
            streak.push((y as usize * w + x as usize, amp * fade));
        }
        // A pixel visited twice by one streak keeps its brightest sample.
        streak.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        streak.dedup_by_key(|e| e.0);
        for &(i, a) in &streak {
            layer[i] += a;
        }
    }
    for (px, &a) in img.data_mut().chunks_mut(3).zip(&layer) {
        if a > 0.0 {
            px.iter_mut().for_each(|v| *v = (*v + a).min(1.0));
        }
    }
}

fn snow(img: &mut Tensor<f64>, spec: &DegradationSpec, rng: &mut ChaCha8Rng) {
    let (h, w, _) = img.hwc();
    let n = element_count(rng, spec.density, h * w, SNOW_AREA);
    for _ in 0..n {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = uniform(rng, spec.particle_radius);
        let alpha = spec.particle_opacity * rng.random_range(0.6..1.0);
        let white = rng.random_range(0.88..1.0);
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                if d >= r {
                    continue;
                }
                let a = alpha * (1.0 - d / r).sqrt();
                let i = (y * w + x) * 3;
                for v in &mut img.data_mut()[i..i + 3] {
                    *v = (1.0 - a) * *v + a * white;
                }
            }
        }
    }
}

fn sample_bilinear(src: &Tensor<f64>, y: f64, x: f64, out: &mut [f64]) {
    let (h, w, c) = src.hwc();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let v = |yy: usize, xx: usize| src.data()[(yy * w + xx) * c + ch];
        *o = (v(y0, x0) * (1.0 - lx) + v(y0, x1) * lx) * (1.0 - ly) + (v(y1, x0) * (1.0 - lx) + v(y1, x1) * lx) * ly;
    }
}

fn raindrop(img: &mut Tensor<f64>, spec: &DegradationSpec, rng: &mut ChaCha8Rng) {
    let (h, w, _) = img.hwc();
    let n = match spec.blob_count {
        Some(n) if spec.density > 0.0 => n,
        _ => element_count(rng, spec.density, h * w, DROP_AREA),
    };
    for _ in 0..n {
        let src = img.clone();
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = uniform(rng, spec.blob_radius);
                let ry = r * rng.random_range(0.8..1.25);
        let strength = spec.refraction * rng.random_range(0.7..1.0);
        let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        let (bh, bw) = (y1 - y0, x1 - x0);
        // Warped content per pixel of the bounding box; `None` outside the drop.
        let mut warped: Vec<Option<(f64, [f64; 3])>> = vec![None; bh * bw];
        for y in y0..y1 {
            for x in x0..x1 {
                let (oy, ox) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / r);
                let d2 = oy * oy + ox * ox;
                if d2 >= 1.0 {
                    continue;
                }
                // Radial displacement, strongest at the centre: a magnifying lens.
                let k = 1.0 - strength * (1.0 - d2);
                let mut px = [0.0; 3];
                sample_bilinear(&src, cy + oy * ry * k - 0.5, cx + ox * r * k - 0.5, &mut px);
                warped[(y - y0) * bw + (x - x0)] = Some((d2, px));
            }
        }
        for by in 0..bh {
            for bx in 0..bw {
                let Some((d2, px)) = warped[by * bw + bx] else { continue };
                let mut acc = [0.0; 3];
                let mut cnt = 0.0;
                for ny in by.saturating_sub(1)..(by + 2).min(bh) {
                    for nx in bx.saturating_sub(1)..(bx + 2).min(bw) {
                        if let Some((_, q)) = warped[ny * bw + nx] {
                            acc.iter_mut().zip(q).for_each(|(a, q)| *a += q);
                            cnt += 1.0;
                        }
                    }
                }
                let edge = d2.sqrt();
                let i = ((y0 + by) * w + x0 + bx) * 3;
                for c in 0..3 {
                    let v = 0.6 * acc[c] / cnt + 0.4 * px[c];
                    // Drops scatter light towards white; the rim fades back into the scene.
                    let a = DROP_GLOW * (1.0 - edge * edge);
                    let v = (1.0 - a) * v + a;
                    let v = (1.0 - 0.3 * edge) * v + 0.3 * edge * src.data()[i + c];
                    img.data_mut()[i + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Applies `spec` to a copy of `clean`.
pub fn synthesize_degradation(clean: &Tensor<f64>, spec: &DegradationSpec) -> Result<PairedSample> {
    spec.validate()?;
    let s = clean.shape();
    if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Validation(format!("expected a non-empty [H, W, 3] image, got {s:?}")));
    }
    let mut img = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        DegradationKind::Rain => rain(&mut img, spec, &mut rng),
        DegradationKind::Snow => snow(&mut img, spec, &mut rng),
        DegradationKind::Raindrop => raindrop(&mut img, spec, &mut rng),
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(PairedSample { degraded: img, clean: clean.clone(), kind: spec.kind })
}

/// Smooth outdoor-like scene: sky gradient, horizon, a few shapes and a
/// low-frequency texture. Values stay inside `[0.05, 0.95]`.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_e5ce);
    let mut col = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let (sky_top, sky_bottom, ground) = (col(), col(), col());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.35..0.7) * h as f64;
    let tilt = rng.random_range(-0.3..0.3);
    let shapes: Vec<(f64, f64, f64, f64, [f64; 3], bool)> = (0..rng.random_range(3..7))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.08..0.3) * h.min(w) as f64,
                rng.random_range(0.08..0.3) * h.min(w) as f64,
                [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
                rng.random::<bool>(),
            )
        })
        .collect();
    #[allow(clippy::approx_constant)]
    let (fy, fx, phase) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.0..6.28));
    Tensor::from_fn(&[h, w, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let line = horizon + tilt * (x - w as f64 / 2.0);
        let mut v = if y < line {
            let t = y / line.max(1.0);
            sky_top[c] * (1.0 - t) + sky_bottom[c] * t
        } else {
            ground[c] * (0.8 + 0.2 * ((y - line) / h as f64))
        };
        for &(cy, cx, ry, rx, colour, ellipse) in &shapes {
            let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
            let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
            if inside {
                v = colour[c];
            }
        }
        v += 0.06 * ((fy * y + phase).sin() * (fx * x + 0.5 * phase).cos());
        v.clamp(0.05, 0.95)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> Tensor<f64> {
        Tensor::full(&[h, w, 3], 0.4)
    }

    #[test]
    fn zero_density_is_identity() {
        let clean = procedural_scene(32, 40, 1);
        for kind in DegradationKind::ALL {
            let s = synthesize_degradation(&clean, &DegradationSpec::of_kind(kind, 0.0, 3)).unwrap();
            assert_eq!(s.degraded, clean);
        }
    }

    #[test]
    fn seeded_output_is_reproducible_and_input_untouched() {
        let clean = procedural_scene(48, 48, 2);
        let before = clean.clone();
        for kind in DegradationKind::ALL {
            let spec = DegradationSpec::of_kind(kind, 0.7, 9);
            let a = synthesize_degradation(&clean, &spec).unwrap();
            let b = synthesize_degradation(&clean, &spec).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.degraded, clean, "{kind} changed nothing");
            assert!(a.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.kind, kind);
        }
        assert_eq!(clean, before);
    }

    #[test]
    fn rain_pixel_count_scales_with_density() {
        let clean = gray(64, 64);
        let count = |d: f64| -> f64 {
            (0..100)
                .map(|seed| {
                    let s = synthesize_degradation(&clean, &DegradationSpec::of_kind(DegradationKind::Rain, d, seed)).unwrap();
                    s.degraded.data().chunks(3).zip(clean.data().chunks(3)).filter(|(a, b)| a != b).count() as f64
                })
                .sum()
        };
        let ratio = count(0.2) / count(0.1);
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let clean = gray(8, 8);
        let bad = [
            DegradationSpec { density: 1.5, ..DegradationSpec::default() },
            DegradationSpec { streak_length: [5.0, 2.0], ..DegradationSpec::default() },
            DegradationSpec { particle_opacity: 0.0, ..DegradationSpec::default() },
            DegradationSpec { refraction: f64::NAN, ..DegradationSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(synthesize_degradation(&clean, &spec), Err(Error::Validation(_))));
        }
        assert!(synthesize_degradation(&Tensor::zeros(&[4, 4, 1]), &DegradationSpec::default()).is_err());
    }

    #[test]
    fn tags_round_trip() {
        for kind in DegradationKind::ALL {
            assert_eq!(kind.as_str().parse::<DegradationKind>().unwrap(), kind);
        }
        assert!("fog".parse::<DegradationKind>().is_err());
    }

    #[test]
    fn scenes_are_textured_and_in_range() {
        let s = procedural_scene(64, 64, 7);
        assert!(s.data().iter().all(|v| (0.05..=0.95).contains(v)));
        let mean = s.sum() / s.len() as f64;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(var > 1e-3);
        assert_ne!(procedural_scene(64, 64, 7), procedural_scene(64, 64, 8));
    }
}
