//! Central finite-difference verification of graph gradients in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Random directional derivatives probed per input.
    pub directions: usize,
    pub seed: u64,
    /// Probe magnitude below which differences are measured against this
    /// floor instead of the gradient itself; set near the round-off level
    /// of the central difference.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, max_coords: None, directions: 2, seed: 7, abs_floor: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-relative error per input over every probe of that input.
    pub per_input: Vec<f64>,
    /// Largest probe magnitude per input, analytic or numeric.
    pub per_input_scale: Vec<f64>,
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compares backpropagated gradients of the scalar built by `f` with central
/// differences. Inputs whose gradients are identically zero on both routes
/// report an error of zero.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    assert_eq!(g.value(out).len(), 1, "gradient check needs a scalar function");
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut per_input_scale = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut a_vals = Vec::new();
        let mut n_vals = Vec::new();
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let fp = eval(&work);
            work[i].data_mut()[c] = orig - opts.step;
            let fm = eval(&work);
            work[i].data_mut()[c] = orig;
            a_vals.push(analytic[i].data()[c]);
            n_vals.push((fp - fm) / (2.0 * opts.step));
        }
        for _ in 0..opts.directions {
            let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
            let dir: Vec<f64> = dir.iter().map(|d| d / norm).collect();
            let shifted = |sign: f64| {
                let mut t = input.clone();
                for (e, d) in t.data_mut().iter_mut().zip(&dir) {
                    *e += sign * opts.step * d;
                }
                t
            };
            work[i] = shifted(1.0);
            let fp = eval(&work);
            work[i] = shifted(-1.0);
            let fm = eval(&work);
            work[i] = input.clone();
            a_vals.push(analytic[i].data().iter().zip(&dir).map(|(a, d)| a * d).sum());
            n_vals.push((fp - fm) / (2.0 * opts.step));
        }
        probes += a_vals.len();
        per_input.push(relative_error_floor(&a_vals, &n_vals, opts.abs_floor));
        per_input_scale.push(a_vals.iter().chain(&n_vals).fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    GradCheckReport { per_input, per_input_scale, max_rel_error, probes }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both are negligible.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    relative_error_floor(a, b, 0.0)
}

/// Like [`relative_error`] with the denominator bounded below by `floor`.
pub fn relative_error_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt()).max(floor);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Reduces a tensor-valued node to a scalar by a fixed random projection so
/// that every output element contributes to the checked gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let r = g.constant(r);
    let prod = g.mul(out, r);
    g.sum_all(prod)
}
