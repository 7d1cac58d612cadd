//! Optimization loop: Adam with cosine decay and global-norm clipping over
//! random flipped crops, with seeded per-step sampling so a resumed run
//! continues bit for bit.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::Config;
use crate::data::{save_image, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graph::Graph;
use crate::loss::total_loss;
use crate::network::Network;
use crate::params::ParamStore;
use crate::synth::mix_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset root holding `train/` and optionally `val/`.
    pub data: PathBuf,
    /// Run directory for checkpoints, logs and diagnostic dumps.
    pub output: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    /// Side of the square training crops; smaller images are used whole.
    pub crop: usize,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    pub lr: f64,
    /// Learning rate reached at the last step of the cosine decay.
    pub min_lr: f64,
    /// Linear warm-up steps before the decay starts.
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub log_every: u64,
    /// Validation period in steps; 0 disables validation.
    pub val_every: u64,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            output: PathBuf::from("run"),
            steps: 2000,
            batch_size: 1,
            crop: 64,
            flips: true,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            log_every: 1,
            val_every: 0,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.crop < 16 {
            return bad(format!("train.crop {} must be at least 16", self.crop));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return bad(format!("train.lr {} / min_lr {} must be finite and non-negative", self.lr, self.min_lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("train.adam_eps must be positive; weight_decay and clip_norm non-negative".into());
        }
        Ok(())
    }

    /// Learning rate applied at zero-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let min = self.min_lr.min(self.lr);
        min + 0.5 * (self.lr - min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { state: OptimizerState { m: zeros(), v: zeros() } }
    }

    /// Applies one update; `t` is the 1-based step number.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64, t: u64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - cfg.beta1.powf(t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(t as f64);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (eps, wd) = (cfg.adam_eps as f32, (lr * cfg.weight_decay) as f32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.state.m).zip(&mut self.state.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() / bc2_sqrt + eps) + wd * *p;
            }
        }
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the completed step.
    pub step: u64,
    pub l1: f64,
    pub cor: f64,
    pub total: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogEvent {
    Step(StepLog),
    Validation { step: u64, psnr: f64, ssim: f64 },
    Checkpoint { step: u64, path: PathBuf },
}

impl fmt::Display for LogEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEvent::Step(s) => write!(f, "step={} l1={} cor={} total={} lr={}", s.step, s.l1, s.cor, s.total, s.lr),
            LogEvent::Validation { step, psnr, ssim } => write!(f, "val step={step} psnr={psnr:.4} ssim={ssim:.6}"),
            LogEvent::Checkpoint { step, path } => write!(f, "checkpoint step={step} path={}", path.display()),
        }
    }
}

/// One sampled training example.
struct Crop {
    index: usize,
    y: usize,
    x: usize,
    hflip: bool,
    vflip: bool,
}

fn crop_flip(img: &Tensor<f64>, c: &Crop, ch: usize, cw: usize) -> Tensor<f64> {
    let (_, w, _) = img.hwc();
    Tensor::from_fn(&[ch, cw, 3], |i| {
        let (p, k) = (i / 3, i % 3);
        let (mut y, mut x) = (p / cw, p % cw);
        if c.vflip {
            y = ch - 1 - y;
        }
        if c.hflip {
            x = cw - 1 - x;
        }
        img.data()[((c.y + y) * w + c.x + x) * 3 + k]
    })
}

pub struct Trainer {
    pub config: Config,
    pub net: Network,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Steps completed so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (net, params) = Network::new::<f32>(config.model.clone())?;
        let adam = Adam::new(&params);
        Ok(Self { config, net, params, adam, step: 0 })
    }

    /// Continues from `ck` with `config`, whose model section must match the
    /// checkpoint's.
    pub fn resume(config: Config, ck: &Checkpoint) -> Result<Self> {
        let stored = Config::from_toml(&ck.config)?;
        if stored.model != config.model {
            return Err(Error::Config("model section differs from the checkpoint's".into()));
        }
        let mut t = Self::new(config)?;
        ck.restore_params(&mut t.params)?;
        if let Some(o) = &ck.optimizer {
            t.adam.state = o.clone();
        }
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_toml(),
            step: self.step,
            params: Checkpoint::params_of(&self.params),
            optimizer: Some(self.adam.state.clone()),
        }
    }

    fn sample_batch(&self, data: &Dataset, rng: &mut ChaCha8Rng) -> Vec<Crop> {
        let cfg = &self.config.train;
        (0..cfg.batch_size)
            .map(|_| {
                let index = rng.random_range(0..data.len());
                let (h, w, _) = data.samples[index].sample.clean.hwc();
                let y = rng.random_range(0..=h - h.min(cfg.crop));
                let x = rng.random_range(0..=w - w.min(cfg.crop));
                let (hflip, vflip) = if cfg.flips { (rng.random(), rng.random()) } else { (false, false) };
                Crop { index, y, x, hflip, vflip }
            })
            .collect()
    }

    fn dump_batch(&self, data: &Dataset, batch: &[Crop]) -> Result<PathBuf> {
        let dir = self.config.train.output.join(format!("nonfinite_step{:06}", self.step + 1));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut listing = String::new();
        for (b, c) in batch.iter().enumerate() {
            let s = &data.samples[c.index];
            let (h, w, _) = s.sample.clean.hwc();
            let (ch, cw) = (h.min(self.config.train.crop), w.min(self.config.train.crop));
            save_image(&dir.join(format!("{b}_degraded.png")), &crop_flip(&s.sample.degraded, c, ch, cw))?;
            save_image(&dir.join(format!("{b}_clean.png")), &crop_flip(&s.sample.clean, c, ch, cw))?;
            listing.push_str(&format!("{b}\t{}\ty={} x={} hflip={} vflip={}\n", s.name, c.y, c.x, c.hflip, c.vflip));
        }
        let p = dir.join("batch.tsv");
        fs::write(&p, listing).map_err(|e| Error::io(&p, e))?;
        Ok(dir)
    }

    /// Runs one optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let cfg = self.config.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, self.step));
        let batch = self.sample_batch(data, &mut rng);
        let mut grads: Vec<Vec<f32>> = self.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let inv_b = 1.0 / batch.len() as f32;
        let (mut l1, mut cor, mut total) = (0.0, 0.0, 0.0);
        let mut finite = true;
        for c in &batch {
            let s = &data.samples[c.index].sample;
            let (h, w, _) = s.clean.hwc();
            let (ch, cw) = (h.min(cfg.crop), w.min(cfg.crop));
            let input = crop_flip(&s.degraded, c, ch, cw);
            let target = crop_flip(&s.clean, c, ch, cw);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            // Diverged parameters can fail inside the forward pass (non-finite
            // mask values) before any loss exists.
            let out = match self.net.forward(&mut g, &p, &input) {
                Err(Error::Numeric(_)) => {
                    finite = false;
                    break;
                }
                r => r?,
            };
            let t = g.constant(target.cast());
            let parts = total_loss(&mut g, out.output, t, &self.config.loss)?;
            let value = |v| g.value(v).data()[0] as f64;
            let (a, b, tot) = (value(parts.l1), value(parts.cor), value(parts.total));
            l1 += a;
            cor += b;
            total += tot;
            if !tot.is_finite() {
                finite = false;
                break;
            }
            let back = g.backward(parts.total);
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gt) = back.get(v) {
                    acc.iter_mut().zip(gt.data()).for_each(|(a, &d)| *a += d * inv_b);
                }
            }
        }
        let sq: f64 = grads.iter().flatten().map(|&d| (d as f64) * (d as f64)).sum();
        let grad_norm = sq.sqrt();
        if !finite || !grad_norm.is_finite() {
            let dump = self.dump_batch(data, &batch)?;
            return Err(Error::NonFiniteLoss { step: self.step + 1, dump });
        }
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            let k = (cfg.clip_norm / grad_norm) as f32;
            grads.iter_mut().flatten().for_each(|d| *d *= k);
        }
        let lr = cfg.lr_at(self.step);
        self.adam.step(&mut self.params, &grads, lr, self.step + 1, &cfg);
        self.step += 1;
        let n = batch.len() as f64;
        Ok(StepLog { step: self.step, l1: l1 / n, cor: cor / n, total: total / n, lr, grad_norm })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(&self.net, &self.params, data)
    }

    pub fn checkpoint_path(output: &Path, step: u64) -> PathBuf {
        output.join("checkpoints").join(format!("step{step:06}.ckpt"))
    }

    /// Trains until `config.train.steps`, reporting through `sink`. Writes
    /// periodic checkpoints, a final one and `latest.ckpt` under the run
    /// directory.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, mut sink: impl FnMut(&LogEvent)) -> Result<Vec<StepLog>> {
        let cfg = self.config.train.clone();
        let mut logs = Vec::new();
        while self.step < cfg.steps {
            let s = self.train_step(train)?;
            logs.push(s);
            if cfg.log_every > 0 && (s.step % cfg.log_every == 0 || s.step == cfg.steps) {
                sink(&LogEvent::Step(s));
            }
            if let Some(v) = val.filter(|v| !v.is_empty() && cfg.val_every > 0 && s.step % cfg.val_every == 0) {
                let r = self.evaluate(v)?;
                sink(&LogEvent::Validation { step: s.step, psnr: r.average.psnr, ssim: r.average.ssim });
            }
            if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) || s.step == cfg.steps {
                let path = Self::checkpoint_path(&cfg.output, s.step);
                let ck = self.checkpoint();
                ck.save(&path)?;
                ck.save(&cfg.output.join("latest.ckpt"))?;
                sink(&LogEvent::Checkpoint { step: s.step, path });
            }
        }
        Ok(logs)
    }
}
