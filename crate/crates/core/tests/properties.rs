use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wxrestore::attention::{channel_attention, linear_attention, spatial_attention};
use wxrestore::degrade::{procedural_scene, synthesize_degradation, DegradationKind, DegradationSpec};
use wxrestore::metrics::{psnr, ssim};
use wxrestore::spectral::{sobel_magnitude, svd_lowrank, to_grayscale, GrayImage, Plane};
use wxrestore::{Graph, Tensor};

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn gray(h: usize, w: usize, seed: u64) -> GrayImage {
    to_grayscale(&rand_tensor(&[h, w, 3], seed, 0.0, 1.0)).unwrap()
}

fn frob(a: &Plane, b: &Plane) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs one attention op on `[n, c]` inputs with two heads.
fn attend(kind: usize, q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let t = g.constant(Tensor::new(&[2], vec![0.7, 1.9]).unwrap());
    let o = match kind {
        0 => channel_attention(&mut g, q, k, v, 2, t).unwrap(),
        1 => spatial_attention(&mut g, q, k, v, 2, t, 1 << 16).unwrap(),
        _ => linear_attention(&mut g, q, k, v, 2).unwrap(),
    };
    g.value(o).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sobel_is_positively_homogeneous(seed in any::<u64>(), c in 0.01f64..1.0, h in 3usize..12, w in 3usize..12) {
        let g = gray(h, w, seed);
        let scaled = GrayImage::new(Plane::new(h, w, g.data.iter().map(|v| c * v).collect()).unwrap()).unwrap();
        let (a, b) = (sobel_magnitude(&g).unwrap(), sobel_magnitude(&scaled).unwrap());
        prop_assert_eq!((b.h, b.w), (h, w));
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((c * x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn svd_error_falls_with_rank_and_keeps_size(seed in any::<u64>(), h in 2usize..14, w in 2usize..14) {
        let g = gray(h, w, seed);
        let mut last = f64::INFINITY;
        for r in 1..=h.min(w) {
            let approx = svd_lowrank(&g, r).unwrap();
            prop_assert_eq!((approx.h, approx.w), (h, w));
            let e = frob(&g, &approx);
            prop_assert!(e <= last + 1e-10, "rank {} error {} after {}", r, e, last);
            last = e;
        }
        prop_assert!(last <= 1e-9 * (1.0 + frob(&g, &Plane::zeros(h, w))));
    }

    #[test]
    fn softmax_attention_stays_in_value_hull(seed in any::<u64>(), n in 1usize..9, kind in 0usize..2) {
        let c = 4;
        let (q, k, v) = (
            rand_tensor(&[n, c], seed, -3.0, 3.0),
            rand_tensor(&[n, c], seed ^ 1, -3.0, 3.0),
            rand_tensor(&[n, c], seed ^ 2, -3.0, 3.0),
        );
        let o = attend(kind, &q, &k, &v);
        if kind == 1 {
            // Spatial: every output channel mixes the same channel of v.
            for j in 0..c {
                let col = (0..n).map(|i| v.data()[i * c + j]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                for i in 0..n {
                    let x = o.data()[i * c + j];
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
        if kind == 0 {
            // Channel: each head's output row is a convex mix of that head's v entries.
            let d = c / 2;
            for i in 0..n {
                for h in 0..2 {
                    let row = &v.data()[i * c + h * d..i * c + (h + 1) * d];
                    let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                    for j in 0..d {
                        let x = o.data()[i * c + h * d + j];
                        prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_attention_commutes_with_token_permutation(seed in any::<u64>(), n in 2usize..9) {
        let c = 4;
        let (q, k, v) = (rand_tensor(&[n, c], seed, -1.0, 1.0), rand_tensor(&[n, c], seed ^ 3, -1.0, 1.0), rand_tensor(&[n, c], seed ^ 4, -1.0, 1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| Tensor::from_fn(&[n, c], |idx| t.data()[perm[idx / c] * c + idx % c]);
        let a = permute(&attend(0, &q, &k, &v));
        let b = attend(0, &permute(&q), &permute(&k), &permute(&v));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_attention_is_finite_for_large_inputs(seed in any::<u64>(), n in 1usize..9, scale in 1.0f64..80.0) {
        let c = 4;
        let (q, k, v) = (rand_tensor(&[n, c], seed, -scale, scale), rand_tensor(&[n, c], seed ^ 5, -scale, scale), rand_tensor(&[n, c], seed ^ 6, -1.0, 1.0));
        let o = attend(2, &q, &k, &v);
        prop_assert!(o.data().iter().all(|x| x.is_finite() && x.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn degradation_leaves_the_clean_image_alone(seed in any::<u64>(), density in 0.0f64..1.0, kind in 0usize..3) {
        let clean = procedural_scene(24, 20, seed);
        let before = clean.clone();
        let spec = DegradationSpec::of_kind(DegradationKind::ALL[kind], density, seed);
        let s = synthesize_degradation(&clean, &spec).unwrap();
        prop_assert_eq!(&clean, &before);
        prop_assert_eq!(&s.clean, &before);
        prop_assert_eq!(s.degraded.shape(), clean.shape());
        prop_assert!(s.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let a = rand_tensor(&[h, w, 3], seed, 0.0, 1.0);
        let b = rand_tensor(&[h, w, 3], seed ^ 7, 0.0, 1.0);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = procedural_scene(32, 32, 1);
    let noise = rand_tensor(&[32, 32, 3], 2, -1.0, 1.0);
    let scores: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
        .iter()
        .map(|&a| psnr(&clean.zip_map(&noise, |c, n| c + a * n), &clean).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
}
