//! Optimisation loop: Adam, seeded shuffling, loss history, checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::GraphOps;
use crate::model::Model;
use crate::nn::{ParamStore, Session};
use crate::preprocess::stack;
use crate::scoring::{alphas, recon_errors, score_map, total_score, LossTriple, LOSS_LOGITS};
use crate::spectral::DftBasis;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 120,
            batch_size: 8,
            seed: 42,
            grad_clip: None,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("grad_clip must be positive, got {}", c)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.params().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.m[i], &self.v[i])
    }

    /// `grads` follow the parameter order of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!("expected {} gradients, got {}", self.m.len(), grads.len())));
        }
        for ((name, _), g) in store.params().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_owned()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, ((_, p), g)) in store.params_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max`; returns the norm
/// before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max {
        let scale = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub alpha: [f64; 3],
}

pub fn write_history_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss", "l1", "l2", "l3", "alpha1", "alpha2", "alpha3"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.mean_loss.to_string(),
            h.l1.to_string(),
            h.l2.to_string(),
            h.l3.to_string(),
            h.alpha[0].to_string(),
            h.alpha[1].to_string(),
            h.alpha[2].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Splits shuffled indices into batches; a trailing single window joins the
/// previous batch because batch-norm needs two samples.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step + 1);
    r
}

/// Trains in place and returns the per-epoch history.
///
/// `windows` are `[N, W, M]` samples from the training split. With
/// `checkpoint_dir` set, the store is saved every `checkpoint_every` epochs
/// and after the last one.
pub fn train_loop(model: &Model, store: &mut ParamStore, graph: &GraphOps, windows: &[Tensor], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no training windows".into()));
    }
    if store.get(LOSS_LOGITS).is_err() {
        return Err(Error::InvalidArgument(format!("store lacks `{}`", LOSS_LOGITS)));
    }
    let basis = DftBasis::new(windows[0].shape()[1]);
    let mut adam = Adam::new(store);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut sums, mut seen) = (0.0, [0.0; 3], 0usize);
        for (step, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let samples: Vec<Tensor> = batch.iter().map(|&i| windows[i].clone()).collect();
            let x = stack(&samples)?;
            let tape = Tape::new();
            let s = Session::train(&tape, store, step_rng(cfg.seed, adam.step));
            let out = model.forward(&s, graph, &x)?;
            let errors = recon_errors(&s, &out, &x, &basis)?;
            let losses = errors.losses()?;
            let loss = total_score(&losses, s.p(LOSS_LOGITS)?)?;
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = s.vars().map(|(_, v)| grads.wrt(v)).collect();
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut g, max);
            }
            adam.update(store, &g, cfg.lr)?;
            for (name, value) in s.take_buffer_updates() {
                store.set_buffer(&name, value)?;
            }
            let t = errors.triple()?;
            let nb = batch.len();
            loss_sum += lv * nb as f64;
            for (acc, v) in sums.iter_mut().zip([t.l1, t.l2, t.l3]) {
                *acc += v * nb as f64;
            }
            seen += nb;
        }
        let k = seen as f64;
        let active = [model.ablation.time_branch, model.ablation.freq_branch, model.ablation.freq_branch];
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / k,
            l1: sums[0] / k,
            l2: sums[1] / k,
            l3: sums[2] / k,
            alpha: alphas(store.get(LOSS_LOGITS)?.data(), active),
        };
        log::info!("epoch {:>4} loss {:.6} (l1 {:.5} l2 {:.5} l3 {:.5})", epoch, log.mean_loss, log.l1, log.l2, log.l3);
        history.push(log);
        if let Some(dir) = checkpoint_dir {
            if epoch % cfg.checkpoint_every.max(1) == 0 || epoch == cfg.epochs {
                store.save(&dir.join(format!("checkpoint_{:04}.bin", epoch)))?;
            }
        }
    }
    Ok(history)
}

/// Eval-mode score maps `[N, W, M]` (one per window) and the mean losses.
pub fn score_windows(model: &Model, store: &ParamStore, graph: &GraphOps, windows: &[Tensor], batch_size: usize) -> Result<(Vec<Tensor>, LossTriple)> {
    if windows.is_empty() {
        return Ok((Vec::new(), LossTriple::default()));
    }
    let basis = DftBasis::new(windows[0].shape()[1]);
    let mut maps = Vec::with_capacity(windows.len());
    let mut sums = [0.0; 3];
    for chunk in windows.chunks(batch_size.max(1)) {
        let x = stack(chunk)?;
        let tape = Tape::new();
        let s = Session::eval(&tape, store);
        let out = model.forward(&s, graph, &x)?;
        let errors = recon_errors(&s, &out, &x, &basis)?;
        let alpha = alphas(store.get(LOSS_LOGITS)?.data(), errors.active());
        let map = score_map(&errors, alpha)?;
        let t = errors.triple()?;
        for (acc, v) in sums.iter_mut().zip([t.l1, t.l2, t.l3]) {
            *acc += v * chunk.len() as f64;
        }
        let per = map.numel() / chunk.len();
        let inner = &map.shape()[1..];
        for i in 0..chunk.len() {
            maps.push(Tensor::new(inner.to_vec(), map.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    let k = windows.len() as f64;
    Ok((
        maps,
        LossTriple {
            l1: sums[0] / k,
            l2: sums[1] / k,
            l3: sums[2] / k,
        },
    ))
}
