//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `cargo test -p wxrestore-core --test acceptance -- overfit` runs only the
//! criteria whose name contains `overfit`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wxrestore::attention::{channel_attention, linear_attention, spatial_attention};
use wxrestore::block::{AttentionKind, BlockConfig, TransformerBlock};
use wxrestore::checkpoint::Checkpoint;
use wxrestore::config::Config;
use wxrestore::data::Dataset;
use wxrestore::gradcheck::{check, project, GradCheckOptions};
use wxrestore::grouping::{gather, generate_mask, partition, scatter, select_partner, Pooling};
use wxrestore::loss::{correlation_loss, l1_loss, total_loss, LossConfig};
use wxrestore::network::{ModelConfig, Network};
use wxrestore::params::ParamBuilder;
use wxrestore::prompt::{PromptConfig, SpectralMode, SpectralPrompt, StageSpectra};
use wxrestore::spectral::{sobel_magnitude, svd_lowrank, GrayImage, Plane};
use wxrestore::synth::{Pairing, SynthConfig};
use wxrestore::train::Trainer;
use wxrestore::{Bound, Graph, ParamStore, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Reflection without repeating the edge sample, written out case by case.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

// ---------------------------------------------------------------- oracles

fn oracle_equivalence() -> Outcome {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(3..14), r.random_range(3..14));

        let gray = GrayImage::new(Plane::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()).unwrap();
        let sob = sobel_magnitude(&gray).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        let v = gray.at(reflect(y as isize + i as isize - 1, h), reflect(x as isize + j as isize - 1, w));
                        gx += KX[i][j] * v;
                        gy += KX[j][i] * v;
                    }
                }
                let want = (gx * gx + gy * gy).sqrt();
                worst = worst.max((sob.at(y, x) - want).abs());
                ensure!(close(sob.at(y, x), want, 1e-12), "sobel seed {seed} at ({y},{x}): {} vs {want}", sob.at(y, x));
            }
        }

        let cin = r.random_range(1..6);
        let f = rand_tensor(&[h, w, cin], seed + 100, -1.0, 1.0);
        let mut store = ParamStore::<f64>::new();
        let (mask_conv, proj) = {
            let mut b = ParamBuilder::new(&mut store, seed);
            (b.conv("mask", 7, cin, 1, true), b.conv("proj", 1, cin, 3, true))
        };
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let fv = g.constant(f.clone());
        let m = generate_mask(&mut g, &p, &mask_conv, fv).map_err(|e| e.to_string())?;
        let (wm, bm) = (store.get(mask_conv.weight), store.get(mask_conv.bias.unwrap()).data()[0]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = bm;
                for dy in 0..7 {
                    for dx in 0..7 {
                        let (sy, sx) = (reflect(y as isize + dy as isize - 3, h), reflect(x as isize + dx as isize - 3, w));
                        for c in 0..cin {
                            acc += wm.data()[(dy * 7 + dx) * cin + c] * f.data()[(sy * w + sx) * cin + c];
                        }
                    }
                }
                let got = g.value(m).data()[y * w + x];
                worst = worst.max((got - acc).abs());
                ensure!(close(got, acc, 1e-12), "mask seed {seed} at ({y},{x}): {got} vs {acc}");
            }
        }

        let out = proj.forward(&mut g, &p, fv);
        let (wp, bp) = (store.get(proj.weight), store.get(proj.bias.unwrap()));
        for px in 0..h * w {
            for o in 0..3 {
                let mut acc = bp.data()[o];
                for c in 0..cin {
                    acc += f.data()[px * cin + c] * wp.data()[c * 3 + o];
                }
                let got = g.value(out).data()[px * 3 + o];
                worst = worst.max((got - acc).abs());
                ensure!(close(got, acc, 1e-12), "1x1 seed {seed}: {got} vs {acc}");
            }
        }

        let groups = [1, 2, 4][seed as usize % 3];
        let (gh, gw) = (4 * r.random_range(1..4), 4);
        let f = rand_tensor(&[gh, gw, cin], seed + 200, -1.0, 1.0);
        let mask: Vec<f64> = (0..gh * gw).map(|_| r.random_range(0.0..1.0)).collect();
        let part = partition(&mask, groups).map_err(|e| e.to_string())?;
        let fv = g.constant(f.clone());
        let gathered = gather(&mut g, fv, &part).map_err(|e| e.to_string())?;
        let mut sorted: Vec<usize> = (0..gh * gw).collect();
        sorted.sort_by(|&a, &b| mask[a].total_cmp(&mask[b]).then(a.cmp(&b)));
        let size = gh * gw / groups;
        for (k, &gv) in gathered.iter().enumerate() {
            for (i, &tok) in sorted[k * size..(k + 1) * size].iter().enumerate() {
                ensure!(
                    g.value(gv).data()[i * cin..(i + 1) * cin] == f.data()[tok * cin..(tok + 1) * cin],
                    "gather seed {seed} group {k} row {i}"
                );
            }
        }
        let back = scatter(&mut g, &gathered, &part).map_err(|e| e.to_string())?;
        ensure!(g.value(back).data() == f.data(), "scatter seed {seed} does not invert gather");
    }
    Ok(format!("20 instances each; largest arithmetic deviation {worst:.1e}, gather/scatter bit-exact"))
}

// ---------------------------------------------------------------- SVD

fn frob(a: &Plane, b: &Plane) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn svd_filter() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut worst_margin = f64::INFINITY;
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let (h, w) = (r.random_range(4..24), r.random_range(4..24));
        let data: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let a = Plane::new(h, w, data.clone()).unwrap();
        let sigma = DMatrix::from_row_slice(h, w, &data).singular_values();
        let mut sigma: Vec<f64> = sigma.iter().copied().collect();
        sigma.sort_by(|x, y| y.total_cmp(x));
        let rank = r.random_range(1..h.min(w));
        let approx = svd_lowrank(&a, rank).map_err(|e| e.to_string())?;
        let err = frob(&a, &approx);
        let want = sigma[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let rel = (err - want).abs() / want;
        worst_rel = worst_rel.max(rel);
        ensure!(rel <= 1e-8, "seed {seed} {h}x{w} rank {rank}: error {err} vs tail {want} (rel {rel:.2e})");

        for t in 0..20 {
            // Random factors, half of them near the optimum.
            let near = t % 2 == 0;
            let mut comp = Plane::zeros(h, w);
            let u: Vec<f64> = (0..h * rank).map(|_| r.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..rank * w).map(|_| r.random_range(-1.0..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = (0..rank).map(|k| u[y * rank + k] * v[k * w + x]).sum();
                    comp.data[y * w + x] = if near { approx.data[y * w + x] + 1e-3 * s } else { s };
                }
            }
            if near {
                // A tiny perturbation of a rank-r matrix plus a rank-r term has
                // rank up to 2r; project it back to rank r first.
                comp = svd_lowrank(&comp, rank).map_err(|e| e.to_string())?.0;
            }
            let e = frob(&a, &comp);
            worst_margin = worst_margin.min(e - err);
            ensure!(e >= err * (1.0 - 1e-12), "seed {seed}: competitor {t} beats the truncation ({e} < {err})");
        }
    }
    Ok(format!("20 instances; tail-energy rel. error <= {worst_rel:.1e}; 400 competitors, smallest margin {worst_margin:.2e}"))
}

// ---------------------------------------------------------------- grouping

fn brute_partners(values: &[Tensor<f64>]) -> Vec<usize> {
    let reps: Vec<Vec<f64>> = values
        .iter()
        .map(|v| {
            let (n, c) = (v.shape()[0], v.shape()[1]);
            (0..c).map(|j| (0..n).map(|i| v.data()[i * c + j]).sum::<f64>() / n as f64).collect()
        })
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            d / (na * nb)
        }
    };
    (0..reps.len())
        .map(|m| {
            let mut best = None;
            for n in 0..reps.len() {
                if n == m {
                    continue;
                }
                let s = cos(&reps[m], &reps[n]);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((n, s));
                }
            }
            best.unwrap().0
        })
        .collect()
}

fn grouping() -> Outcome {
    for seed in 0..100u64 {
        let mut r = rng(2000 + seed);
        let groups = [1, 2, 4][seed as usize % 3];
        let n = 4 * r.random_range(1..17);
        let mask: Vec<f64> = match seed % 4 {
            0 => vec![0.5; n],
            1 => (0..n).map(|_| r.random_range(0..3) as f64).collect(),
            _ => (0..n).map(|_| r.random_range(-5.0..5.0)).collect(),
        };
        let part = partition(&mask, groups).map_err(|e| e.to_string())?;
        let mut seen = vec![0u8; n];
        for m in 0..groups {
            ensure!(part.group(m).len() == n / groups, "seed {seed}: group {m} has {} tokens", part.group(m).len());
            part.group(m).iter().for_each(|&t| seen[t] += 1);
        }
        ensure!(seen.iter().all(|&c| c == 1), "seed {seed}: not a bijection");
        for m in 1..groups {
            let hi = part.group(m - 1).iter().map(|&t| mask[t]).fold(f64::NEG_INFINITY, f64::max);
            let lo = part.group(m).iter().map(|&t| mask[t]).fold(f64::INFINITY, f64::min);
            ensure!(hi <= lo, "seed {seed}: group {} max {hi} above group {m} min {lo}", m - 1);
        }
        ensure!(partition(&mask, groups).unwrap().order() == part.order(), "seed {seed}: not deterministic");
    }
    for seed in 0..50u64 {
        let mut r = rng(3000 + seed);
        let g = r.random_range(2..9);
        let (n, c) = (r.random_range(1..6), r.random_range(1..7));
        let values: Vec<Tensor<f64>> = (0..g).map(|i| rand_tensor(&[n, c], seed * 100 + i as u64, -1.0, 1.0)).collect();
        let got = select_partner(&values.iter().collect::<Vec<_>>(), Pooling::Mean).map_err(|e| e.to_string())?;
        ensure!(got == brute_partners(&values), "trial {seed}: {got:?} vs brute force {:?}", brute_partners(&values));
        ensure!(got.iter().enumerate().all(|(m, &p)| p != m), "trial {seed}: self partner");
        for scale in [1e-3, 0.37, 42.0] {
            let scaled: Vec<Tensor<f64>> = values.iter().map(|v| v.scale(scale)).collect();
            let s = select_partner(&scaled.iter().collect::<Vec<_>>(), Pooling::Mean).map_err(|e| e.to_string())?;
            ensure!(s == got, "trial {seed}: scaling by {scale} changed partners");
        }
    }
    Ok("100 masks (ties, g in {1,2,4}) valid and monotone; 50 partner trials match brute force and survive scaling".into())
}

// ---------------------------------------------------------------- FGA

fn block(c: usize, kind: AttentionKind, groups: usize, seed: u64) -> (ParamStore<f64>, TransformerBlock) {
    let cfg = BlockConfig { kind, heads: 2, groups, cross_group: true, pooling: Pooling::Mean, spatial_cap: 4096 };
    let mut store = ParamStore::new();
    let b = TransformerBlock::new(&mut ParamBuilder::new(&mut store, seed), c, cfg).unwrap();
    (store, b)
}

fn fga_degeneracy() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let (store, b) = block(8, AttentionKind::Spatial, 1, seed);
        let x = rand_tensor(&[8, 8, 8], 10 + seed, -1.0, 1.0);
        let part = partition(rand_tensor(&[64], 20 + seed, 0.0, 1.0).data(), 1).unwrap();
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let fga = b.fga(&mut g, &p, xv, &part).map_err(|e| e.to_string())?;
        let flat = g.reshape(xv, &[64, 8]);
        let qkv = b.qkv.forward(&mut g, &p, flat);
        let (q, k, v) = (g.narrow_cols(qkv, 0, 8), g.narrow_cols(qkv, 16, 8), g.narrow_cols(qkv, 32, 8));
        let a = spatial_attention(&mut g, q, k, v, 2, p.var(b.temperature), usize::MAX).map_err(|e| e.to_string())?;
        let a = g.mul_cols(a, p.var(b.alpha_in));
        let dense = b.out.forward(&mut g, &p, a);
        for (u, w) in g.value(fga.out).data().iter().zip(g.value(dense).data()) {
            worst = worst.max((u - w).abs());
        }
    }
    ensure!(worst <= 1e-6, "g=1 spatial grouped attention differs from dense attention by {worst:.2e}");
    for (seed, kind) in [(0u64, AttentionKind::Channel), (1, AttentionKind::Spatial)] {
        let (mut store, b) = block(4, kind, 4, 30 + seed);
        store.get_mut(b.alpha_cross).data_mut().fill(0.0);
        let x = rand_tensor(&[4, 4, 4], 40 + seed, -1.0, 1.0);
        let part = partition(rand_tensor(&[16], 50 + seed, 0.0, 1.0).data(), 4).unwrap();
        let run = |cross: bool| {
            let mut blk = b.clone();
            blk.cfg.cross_group = cross;
            let mut g = Graph::inference();
            let p = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let o = blk.fga(&mut g, &p, xv, &part).unwrap().out;
            g.value(o).clone()
        };
        let (with, without) = (run(true), run(false));
        ensure!(
            with.data().iter().zip(without.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{kind:?}: zero cross weight is not bit-identical to the in-group wiring"
        );
    }
    Ok(format!("g=1 spatial vs dense max |diff| {worst:.1e}; zero cross weight bit-identical for both kinds"))
}

// ---------------------------------------------------------------- gradients

fn gradient_integrity() -> Outcome {
    let opts = GradCheckOptions::default();
    let mut rows = Vec::new();
    let mut record = |name: &str, err: f64| -> Result<(), String> {
        rows.push(format!("{name} {err:.1e}"));
        ensure!(err <= 1e-3, "{name}: relative error {err:.2e}");
        Ok(())
    };

    let qkv = [rand_tensor(&[4, 4], 1, -1.0, 1.0), rand_tensor(&[4, 4], 2, -1.0, 1.0), rand_tensor(&[4, 4], 3, -1.0, 1.0)];
    let rep = check(&qkv, |g, v| {
        let o = linear_attention(g, v[0], v[1], v[2], 2).unwrap();
        project(g, o, 1)
    }, &opts);
    record("linear_attention", rep.max_rel_error)?;
    let mut with_t = qkv.to_vec();
    with_t.push(Tensor::new(&[2], vec![0.8, 1.3]).unwrap());
    let rep = check(&with_t, |g, v| {
        let o = channel_attention(g, v[0], v[1], v[2], 2, v[3]).unwrap();
        project(g, o, 2)
    }, &opts);
    record("channel_attention", rep.max_rel_error)?;
    let rep = check(&with_t, |g, v| {
        let o = spatial_attention(g, v[0], v[1], v[2], 2, v[3], 64).unwrap();
        project(g, o, 3)
    }, &opts);
    record("spatial_attention", rep.max_rel_error)?;

    let mut store = ParamStore::<f64>::new();
    let sp = SpectralPrompt::new(&mut ParamBuilder::new(&mut store, 4), 4, 1, PromptConfig::default()).unwrap();
    let mut r = rng(8);
    store.get_mut(sp.offset_conv().weight).data_mut().iter_mut().for_each(|e| *e = r.random_range(-0.3..0.3));
    let spectra = StageSpectra::compute(&rand_tensor(&[8, 8, 3], 7, 0.0, 1.0), 8, 8, &sp.cfg).unwrap();
    let rep = check(store.tensors(), |g, v| {
        let p = Bound::from_vars(v.to_vec());
        let o = sp.build_prompt(g, &p, &spectra).unwrap();
        project(g, o.fs, 3)
    }, &GradCheckOptions { max_coords: Some(6), ..opts.clone() });
    record("build_prompt", rep.max_rel_error)?;

    for kind in [AttentionKind::Channel, AttentionKind::Spatial] {
        let (store, b) = block(8, kind, 2, 7);
        let mask = rand_tensor(&[4, 4, 1], 17, -1.0, 1.0);
        let part = partition(mask.data(), 2).unwrap();
        let mut inputs = vec![rand_tensor(&[4, 4, 8], 15, -1.0, 1.0), rand_tensor(&[4, 4, 8], 16, -1.0, 1.0), mask];
        inputs.extend(store.tensors().iter().cloned());
        let rep = check(&inputs, |g, v| {
            let p = Bound::from_vars(v[3..].to_vec());
            let o = b.forward(g, &p, v[0], v[1], v[2], &part).unwrap().out;
            project(g, o, 5)
        }, &GradCheckOptions { max_coords: Some(8), ..opts.clone() });
        record(&format!("block/{kind:?}"), rep.max_rel_error)?;
    }

    let cfg = LossConfig { patch_size: 4, ..LossConfig::default() };
    let pair = [rand_tensor(&[6, 7, 3], 21, 0.0, 1.0), rand_tensor(&[6, 7, 3], 22, 0.0, 1.0)];
    let rep = check(&pair, |g, v| correlation_loss(g, v[0], v[1], &cfg).unwrap(), &opts);
    record("correlation_loss", rep.max_rel_error)?;

    let tiny = ModelConfig { base_channels: 8, blocks: [2, 2, 2, 2], refinement_blocks: 1, ..ModelConfig::default() };
    let (net, mut params) = Network::new::<f64>(tiny).unwrap();
    let mut r = rng(9);
    for sp in net.prompts() {
        params.get_mut(sp.offset_conv().weight).data_mut().iter_mut().for_each(|e| *e = r.random_range(-0.3..0.3));
    }
    let img = rand_tensor(&[16, 16, 3], 5, 0.25, 0.75);
    let spectra = net.stage_spectra(&img).unwrap();
    let (_, stages) = net.restore(&params, &img).unwrap();
    let routing: Vec<_> = stages.into_iter().map(|s| s.partition).collect();
    let rep = check(params.tensors(), |g, v| {
        let p = Bound::from_vars(v.to_vec());
        let o = net.forward_padded(g, &p, &img, &spectra, (16, 16), Some(&routing)).unwrap();
        project(g, o.output, 6)
    }, &GradCheckOptions { step: 1e-4, max_coords: Some(2), directions: 1, abs_floor: 1e-7, ..opts.clone() });
    record("network 16x16", rep.max_rel_error)?;
    Ok(rows.join(", "))
}

// ---------------------------------------------------------------- loss

fn scalar(g: &Graph<f64>, v: wxrestore::Var) -> f64 {
    g.value(v).data()[0]
}

fn cor(g: &mut Graph<f64>, pred: wxrestore::Var, target: wxrestore::Var, cfg: &LossConfig) -> f64 {
    let v = correlation_loss(g, pred, target, cfg).unwrap();
    scalar(g, v)
}

fn loss_contract() -> Outcome {
    let cfg = LossConfig::default();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let (a, b) = (rand_tensor(&[12, 10, 3], seed, 0.0, 1.0), rand_tensor(&[12, 10, 3], 100 + seed, 0.0, 1.0));
        let mut g = Graph::inference();
        let (av, bv) = (g.constant(a.clone()), g.constant(b));
        let c = cor(&mut g, av, bv, &cfg);
        lo = lo.min(c);
        hi = hi.max(c);
        ensure!((0.0..=2.0).contains(&c), "seed {seed}: correlation loss {c} outside [0, 2]");

        let same = cor(&mut g, av, av, &cfg);
        ensure!(same.abs() <= 1e-9, "seed {seed}: identical images give {same}");
        let inv = g.constant(a.map(|x| 1.0 - x));
        let anti = cor(&mut g, inv, av, &cfg);
        ensure!((anti - 2.0).abs() <= 1e-9, "seed {seed}: anticorrelated images give {anti}");
        let aff = g.constant(a.map(|x| 0.3 * x + 0.2));
        let affine = cor(&mut g, aff, av, &cfg);
        ensure!(affine.abs() <= 1e-9, "seed {seed}: positive affine map gives {affine}");

        let zero = LossConfig { beta: 0.0, ..cfg.clone() };
        let parts = total_loss(&mut g, bv, av, &zero).unwrap();
        let l1 = l1_loss(&mut g, bv, av).unwrap();
        ensure!(
            scalar(&g, parts.total).to_bits() == scalar(&g, l1).to_bits(),
            "seed {seed}: beta=0 total {} vs l1 {}",
            scalar(&g, parts.total),
            scalar(&g, l1)
        );
    }
    Ok(format!("random pairs in [{lo:.3}, {hi:.3}]; identical 0, anticorrelated 2, affine 0, beta=0 total == l1 bitwise"))
}

// ---------------------------------------------------------------- training

const OVERFIT_STEPS: u64 = 1500;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);

fn full_image_l1(t: &Trainer, data: &Dataset) -> Result<f64, String> {
    let mut sum = 0.0;
    for s in &data.samples {
        let (out, _) = t.net.restore(&t.params, &s.sample.degraded).map_err(|e| e.to_string())?;
        let e: f64 = out.data().iter().zip(s.sample.clean.data()).map(|(a, b)| (*a as f64 - b).abs()).sum();
        sum += e / out.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

fn overfit() -> Outcome {
    let synth = SynthConfig { scenes: 8, size: [64, 64], pairing: Pairing::Cycle, ..SynthConfig::default() };
    let (train, _) = synth.build(&synth.procedural()).map_err(|e| e.to_string())?;
    ensure!(train.len() == 8, "expected 8 pairs, got {}", train.len());
    let mut cfg = Config::default();
    cfg.train.steps = OVERFIT_STEPS;
    cfg.train.checkpoint_every = 0;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    while t.step < OVERFIT_STEPS {
        t.train_step(&train).map_err(|e| e.to_string())?;
    }
    let elapsed = start.elapsed();
    let l1 = full_image_l1(&t, &train)?;
    let report = t.evaluate(&train).map_err(|e| e.to_string())?;
    let gains: Vec<f64> = report.samples.iter().map(|s| s.restored.psnr - s.degraded.psnr).collect();
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "{OVERFIT_STEPS} steps in {:.0}s, training L1 {l1:.4}, per-pair gain {} dB",
        elapsed.as_secs_f64(),
        gains.iter().map(|g| format!("{g:.1}")).collect::<Vec<_>>().join("/")
    );
    ensure!(elapsed <= OVERFIT_BUDGET, "over the 30 min budget: {detail}");
    ensure!(l1 < 0.03, "training L1 not below 0.03: {detail}");
    ensure!(min_gain >= 3.0, "a pair gains less than 3 dB: {detail}");
    Ok(detail)
}

const GENERAL_STEPS: u64 = 1000;
/// Run-to-run noise allowed when an ablation "matches" the full model.
const MATCH_TOLERANCE_DB: f64 = 0.1;

fn held_out_psnr(mode: SpectralMode, train: &Dataset, val: &Dataset) -> Result<(f64, f64), String> {
    let mut cfg = Config::default();
    cfg.model.sdp.mode = mode;
    cfg.train.steps = GENERAL_STEPS;
    cfg.train.checkpoint_every = 0;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    while t.step < GENERAL_STEPS {
        t.train_step(train).map_err(|e| format!("{mode:?}: {e}"))?;
    }
    let r = t.evaluate(val).map_err(|e| e.to_string())?;
    let restored = r.samples.iter().map(|s| s.restored.psnr).sum::<f64>() / r.samples.len() as f64;
    let degraded = r.samples.iter().map(|s| s.degraded.psnr).sum::<f64>() / r.samples.len() as f64;
    Ok((restored, degraded))
}

fn generalization() -> Outcome {
    let synth = SynthConfig { scenes: 80, size: [64, 64], pairing: Pairing::Cycle, val_fraction: 0.2, seed: 11, ..SynthConfig::default() };
    let (train, val) = synth.build(&synth.procedural()).map_err(|e| e.to_string())?;
    ensure!(train.len() == 64 && val.len() == 16, "split is {}/{}", train.len(), val.len());
    ensure!(train.tag_counts().len() == 3, "training set lacks a degradation kind");
    let (both, degraded) = held_out_psnr(SpectralMode::Both, &train, &val)?;
    let (sobel, _) = held_out_psnr(SpectralMode::SobelOnly, &train, &val)?;
    let (svd, _) = held_out_psnr(SpectralMode::SvdOnly, &train, &val)?;
    let detail = format!(
        "held-out PSNR input {degraded:.2}, combined {both:.2} ({:+.2} dB), sobel-only {sobel:.2}, svd-only {svd:.2}",
        both - degraded
    );
    ensure!(both - degraded >= 1.5, "gain below 1.5 dB: {detail}");
    ensure!(sobel <= both + MATCH_TOLERANCE_DB, "sobel-only beats the combined model: {detail}");
    ensure!(svd <= both + MATCH_TOLERANCE_DB, "svd-only beats the combined model: {detail}");
    Ok(detail)
}

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.model = ModelConfig { base_channels: 8, blocks: [2, 2, 2, 2], refinement_blocks: 1, ..ModelConfig::default() };
    cfg.train.crop = 32;
    cfg.train.batch_size = 2;
    cfg.train.steps = 10;
    cfg.train.checkpoint_every = 0;
    cfg.train.seed = 5;
    cfg
}

fn trace(t: &mut Trainer, data: &Dataset, steps: u64) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    while t.step < steps {
        let s = t.train_step(data).map_err(|e| e.to_string())?;
        out.extend([s.l1.to_bits(), s.cor.to_bits(), s.total.to_bits()]);
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let synth = SynthConfig { scenes: 4, size: [48, 48], ..SynthConfig::default() };
    let (train, _) = synth.build(&synth.procedural()).map_err(|e| e.to_string())?;
    let cfg = small_config();
    let a = trace(&mut Trainer::new(cfg.clone()).map_err(|e| e.to_string())?, &train, 10)?;
    let b = trace(&mut Trainer::new(cfg.clone()).map_err(|e| e.to_string())?, &train, 10)?;
    ensure!(a == b, "two fixed-seed runs diverge");

    let mut first = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let head = trace(&mut first, &train, 5)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut restored = Trainer::resume(cfg, &loaded).map_err(|e| e.to_string())?;
    for ((_, x), (_, y)) in first.params.iter().zip(restored.params.iter()) {
        ensure!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "parameters change across save/load");
    }
    ensure!(restored.step == 5, "resumed at step {}", restored.step);
    let tail = trace(&mut restored, &train, 10)?;
    ensure!([head, tail].concat() == a, "resumed trace differs from the uninterrupted run");
    Ok("10-step traces bit-identical; checkpoint round trip exact; resume at step 5 reproduces steps 6-10".into())
}

// ---------------------------------------------------------------- harness

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle_equivalence", oracle_equivalence),
        ("svd_filter", svd_filter),
        ("grouping", grouping),
        ("fga_degeneracy", fga_degeneracy),
        ("gradient_integrity", gradient_integrity),
        ("loss_contract", loss_contract),
        ("determinism_persistence", determinism),
        ("overfit", overfit),
        ("generalization", generalization),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
