//! Teacher-forced training: Adam with decoupled weight decay, linear warmup
//! then linear decay to zero, and global-norm gradient clipping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedExample;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ExampleGrads};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            peak_lr: 1e-4,
            warmup_frac: 0.05,
            weight_decay: 1e-5,
            clip_norm: 0.1,
            batch_size: 16,
            total_steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("train.warmup_frac must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        for (name, v) in [("eps", self.eps), ("peak_lr", self.peak_lr), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("train.weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("train.batch_size and train.total_steps must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_frac * self.total_steps as f64
    }
}

/// Linear warmup from 0 to `peak_lr` over the first `warmup_frac·T` steps,
/// then linear decay to 0 at step `T`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let t = cfg.total_steps as f64;
    if step > cfg.total_steps {
        return Err(Error::Domain(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    let s = step as f64;
    let w = cfg.warmup_steps();
    Ok(if s <= w { cfg.peak_lr * (s / w) } else { cfg.peak_lr * ((t - s) / (t - w)) })
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients by `c/‖g‖` when the global norm exceeds `c`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip_norm: f64) -> Result<f64> {
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Domain("non-finite gradient".into()));
    }
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam step, `θ ← θ − lr·m̂/(√v̂ + ε)`, followed by the
/// decoupled decay `θ ← θ − lr·wd·θ`.
pub fn adam_update(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Domain(format!("{} parameters, {} gradients, {} moment slots", params.len(), grads.len(), state.m.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Domain(format!("parameter {i}: {} values, {} gradient entries", p.len(), g.len())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = lr * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *theta -= lr * mhat / (vhat.sqrt() + cfg.eps);
            if decay != 0.0 {
                *theta -= decay * *theta;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens: usize,
}

/// Summed gradients over a batch, reduced in example order.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Vec<Vec<f64>>,
}

impl BatchGrads {
    /// Per-token mean loss and gradients.
    pub fn mean(mut self) -> (f64, Vec<Vec<f64>>) {
        let n = self.tokens.max(1) as f64;
        for g in self.grads.iter_mut().flatten() {
            *g /= n;
        }
        (self.loss_sum / n, self.grads)
    }
}

fn reduce(model: &CaptionModel, per_example: Vec<Result<ExampleGrads>>) -> Result<BatchGrads> {
    let mut total = BatchGrads {
        loss_sum: 0.0,
        tokens: 0,
        grads: model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
    };
    for eg in per_example {
        let eg = eg?;
        total.loss_sum += eg.loss_sum;
        total.tokens += eg.tokens;
        for (acc, g) in total.grads.iter_mut().zip(&eg.grads) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(total)
}

/// Per-example gradients computed concurrently (with the `parallel`
/// feature) and summed in index order, so the result is bit-identical to
/// [`batch_gradients_seq`].
pub fn batch_gradients(model: &CaptionModel, batch: &[&PreparedExample]) -> Result<BatchGrads> {
    reduce(model, par::map_indexed(batch, |_, ex| model.example_grads(&ex.bundle, &ex.caption_ids)))
}

pub fn batch_gradients_seq(model: &CaptionModel, batch: &[&PreparedExample]) -> Result<BatchGrads> {
    reduce(model, par::map_indexed_seq(batch, |_, ex| model.example_grads(&ex.bundle, &ex.caption_ids)))
}

/// Per-token mean NLL over a dataset.
pub fn dataset_loss(model: &CaptionModel, data: &[PreparedExample]) -> Result<f64> {
    let per = par::map_indexed(data, |_, ex| -> Result<(f64, usize)> {
        let tf = model.teacher_forced(&ex.bundle, &ex.caption_ids)?;
        Ok((-tf.total_log_prob(), tf.targets.len()))
    });
    let (mut loss, mut tokens) = (0.0, 0);
    for r in per {
        let (l, n) = r?;
        loss += l;
        tokens += n;
    }
    Ok(loss / tokens as f64)
}

/// Teacher-forced next-token accuracy over a dataset (targets include EOS).
pub fn dataset_accuracy(model: &CaptionModel, data: &[PreparedExample]) -> Result<f64> {
    let per = par::map_indexed(data, |_, ex| model.teacher_forced(&ex.bundle, &ex.caption_ids).map(|tf| (tf.correct(), tf.targets.len())));
    let (mut hit, mut total) = (0, 0);
    for r in per {
        let (c, n) = r?;
        hit += c;
        total += n;
    }
    Ok(hit as f64 / total as f64)
}

/// Deterministic batch order: reshuffle the dataset every epoch.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batches { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub state: AdamState,
}

/// Optimizer state plus the batch schedule; one call to [`Trainer::step`]
/// is one optimizer update.
pub struct Trainer<'d> {
    data: &'d [PreparedExample],
    cfg: TrainConfig,
    state: AdamState,
    batches: Batches,
}

impl<'d> Trainer<'d> {
    pub fn new(model: &CaptionModel, data: &'d [PreparedExample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Domain("training set is empty".into()));
        }
        Ok(Trainer { data, cfg: cfg.clone(), state: AdamState::new(model.params().tensors()), batches: Batches::new(data.len(), cfg.seed) })
    }

    pub fn steps_done(&self) -> usize {
        self.state.step as usize
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step(&mut self, model: &mut CaptionModel) -> Result<StepLog> {
        let step = self.steps_done() + 1;
        let lr = lr_at(step, &self.cfg)?;
        let batch: Vec<&PreparedExample> = self.batches.next(self.cfg.batch_size).into_iter().map(|i| &self.data[i]).collect();
        let bg = batch_gradients(model, &batch)?;
        let tokens = bg.tokens;
        let (loss, mut grads) = bg.mean();
        clip_global_norm(&mut grads, self.cfg.clip_norm)?;
        adam_update(model.params_mut().tensors_mut(), &grads, &mut self.state, lr, &self.cfg)?;
        Ok(StepLog { step, lr, loss, tokens })
    }
}

/// Runs `cfg.total_steps` optimizer steps, calling `on_step` after each.
pub fn train(
    model: &mut CaptionModel,
    data: &[PreparedExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &CaptionModel) -> Result<()>,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, data, cfg)?;
    let mut log = Vec::with_capacity(cfg.total_steps);
    for _ in 0..cfg.total_steps {
        let entry = trainer.step(model)?;
        on_step(&entry, model)?;
        log.push(entry);
    }
    Ok(TrainReport { log, state: trainer.state })
}

pub fn write_log(w: &mut impl Write, entry: &StepLog) -> Result<()> {
    serde_json::to_writer(&mut *w, entry)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batches::new(10, 3);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| b.next(5)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next(50).len(), 10);
    }
}
