//! Losses, AdamW, the learning-rate schedule, datasets and the training loop.

mod data;
mod landscape;

pub use data::{decode_ppm, load_image_dir, Dataset, SynthDataset};
pub use landscape::{landscape_slice, landscape_to_csv, Landscape};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, SretModel};
use crate::scalar::Scalar;
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor, Var};

/// Floor the cosine schedule decays to.
pub const LR_FLOOR: f64 = 1e-5;

fn check_labels(labels: &[usize], shape: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("loss", shape, &[labels.len(), 0]));
    }
    match labels.iter().find(|&&l| l >= shape[1]) {
        Some(l) => Err(Error::Contract(format!("label {l} out of range for {} classes", shape[1]))),
        None => Ok(()),
    }
}

/// Cross-entropy of `[b, c]` logits against `(1 − eps)·onehot + eps/c`,
/// averaged over the batch.
pub fn smoothed_ce_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize], eps: f64) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let shape = logits.shape();
    check_labels(labels, &shape)?;
    let (b, c) = (shape[0], shape[1]);
    let off = eps / c as f64;
    let target = Tensor::from_fn(&[b, c], |i| {
        let hit = labels[i / c] == i % c;
        T::from_f64_lossy(if hit { 1.0 - eps + off } else { off })
    });
    let tape = logits.tape();
    let ll = logits.log_softmax()?.mul(tape.constant(target))?.sum();
    Ok(ll.scale(T::from_f64_lossy(-1.0 / b as f64)))
}

/// `−(1/b)·Σ softmax(teacher)·log softmax(student)`. The teacher enters
/// as probabilities (no logarithm) and carries no gradient.
pub fn soft_distill_loss<'t, T: Scalar>(student: Var<'t, T>, teacher: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = student.shape();
    if shape.len() != 2 || shape != teacher.shape() {
        return Err(Error::dim("soft_distill_loss", &shape, teacher.shape()));
    }
    let tape = student.tape();
    let probs = tape.constant(teacher.clone()).softmax()?.to_tensor();
    let ll = student.log_softmax()?.mul(tape.constant(probs))?.sum();
    Ok(ll.scale(T::from_f64_lossy(-1.0 / shape[0] as f64)))
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to [`LR_FLOOR`]
/// (or to `base_lr` itself when that is lower). `epoch` may be fractional.
pub fn lr_schedule(epoch: f64, total_epochs: f64, warmup_epochs: f64, base_lr: f64) -> Result<f64> {
    if !(warmup_epochs >= 0.0 && warmup_epochs < total_epochs) {
        return Err(Error::config(format!(
            "warmup ({warmup_epochs}) must be shorter than training ({total_epochs})"
        )));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * epoch / warmup_epochs);
    }
    let progress = ((epoch - warmup_epochs) / (total_epochs - warmup_epochs)).min(1.0);
    let floor = LR_FLOOR.min(base_lr);
    Ok(floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with bias correction and decoupled weight decay. Decay applies only
/// to tensors registered as [`ParamKind::Weight`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<Option<Tensor<T>>>,
    pub second_moment: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One update of every trainable tensor. `grads[i]` belongs to the
    /// tensor with index `i`; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        let n = store.len();
        self.first_moment.resize(n, None);
        self.second_moment.resize(n, None);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            let i = id.index();
            let kind = store.entry(id).kind;
            let shape = store.get(id).shape().to_vec();
            let m = self.first_moment[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second_moment[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let zero;
            let g = match grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) if g.shape() == shape.as_slice() => g,
                Some(g) => return Err(Error::dim("adamw", g.shape(), &shape)),
                None => {
                    zero = Tensor::zeros(&shape);
                    &zero
                }
            };
            let decay = match kind {
                ParamKind::Weight => T::one() - T::from_f64_lossy(lr * self.weight_decay),
                _ => T::one(),
            };
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p = *p * decay - step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Onehot,
    Distill,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    2e-3
}
fn default_warmup() -> f64 {
    2.0
}
fn default_wd() -> f64 {
    0.05
}
fn default_samples() -> usize {
    128
}
fn default_eval_samples() -> usize {
    64
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub mixed_depth: bool,
    /// Synthetic training-set size.
    #[serde(default = "default_samples")]
    pub train_samples: usize,
    /// Synthetic held-out set size.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            base_lr: default_lr(),
            warmup_epochs: default_warmup(),
            weight_decay: default_wd(),
            label_smoothing: 0.0,
            loss_mode: LossMode::Onehot,
            mixed_depth: false,
            train_samples: default_samples(),
            eval_samples: default_eval_samples(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("base_lr and weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        lr_schedule(0.0, self.epochs as f64, self.warmup_epochs, self.base_lr).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub lr: f64,
}

/// Header plus one `epoch,loss,train_acc,eval_acc,lr` row per epoch.
pub fn metrics_to_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,train_acc,eval_acc,lr\n");
    for m in history {
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.loss, m.train_acc, m.eval_acc, m.lr);
    }
    out
}

/// Optimizer and position within a run; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub optimizer: AdamW<T>,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(cfg.weight_decay),
            epoch: 0,
            step: 0,
        }
    }
}

/// Seed for the `index`-th draw of stream `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed ^ tag.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ index.wrapping_mul(0x94d0_49bb_1331_11eb);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const ORDER_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// The batch partition of a run. It depends on the seed only, so every epoch
/// replays the same batches and stochastic choices.
pub fn batch_plan(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, ORDER_STREAM, 0)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            best == l
        })
        .count()
}

/// Eval-mode accuracy and mean unsmoothed cross-entropy over `data`.
pub fn evaluate<T: Scalar>(model: &SretModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut hits, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let tape = Tape::new();
        let logits = model.forward(&tape, &x, ForwardOptions::eval())?.logits;
        hits += correct(&logits.value(), &y);
        loss += smoothed_ce_loss(logits, &y, 0.0)?.value().item()?.to_f64_lossy() * chunk.len() as f64;
    }
    Ok((hits as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Frozen teacher logits for `x`.
fn teacher_logits<T: Scalar>(teacher: &SretModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(teacher.forward(&tape, x, ForwardOptions::eval())?.logits.to_tensor())
}

/// Loss of one batch and the number of correct main-branch predictions.
fn batch_loss<'t, T: Scalar>(
    model: &SretModel<T>,
    tape: &'t Tape<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &TrainConfig,
    teacher: Option<&Tensor<T>>,
    seed: u64,
) -> Result<(Var<'t, T>, usize, Vec<(crate::tensor::ParamId, Tensor<T>)>)> {
    let mut opts = ForwardOptions::train(seed);
    if cfg.mixed_depth {
        opts = opts.with_mixed_depth();
    }
    let out = model.forward(tape, x, opts)?;
    let hits = correct(&out.logits.value(), y);
    let loss_of = |logits: Var<'t, T>| match (cfg.loss_mode, teacher) {
        (LossMode::Distill, Some(t)) => soft_distill_loss(logits, t),
        (LossMode::Distill, None) => Err(Error::config("distillation needs a teacher")),
        (LossMode::Onehot, _) => smoothed_ce_loss(logits, y, cfg.label_smoothing),
    };
    let mut loss = loss_of(out.logits)?;
    if let Some(u) = out.unrolled_logits {
        loss = loss.add(loss_of(u)?)?.scale(T::from_f64_lossy(0.5));
    }
    Ok((loss, hits, out.running_stats))
}

/// Mean training loss over the whole training set at the current weights,
/// without updating anything; the reference point for convergence.
pub fn initial_loss<T: Scalar>(
    model: &SretModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    seed: u64,
    teacher: Option<&SretModel<T>>,
) -> Result<f64> {
    let plan = batch_plan(data.len(), cfg.batch_size, seed);
    let mut total = 0.0;
    for (b, idx) in plan.iter().enumerate() {
        let (x, y) = data.batch(idx);
        let t = teacher.map(|t| teacher_logits(t, &x)).transpose()?;
        let tape = Tape::new();
        let (loss, _, _) = batch_loss(model, &tape, &x, &y, cfg, t.as_ref(), derive_seed(seed, STEP_STREAM, b as u64))?;
        total += loss.value().item()?.to_f64_lossy() * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains from `state` until `until_epoch` epochs are complete (at most
/// `cfg.epochs`), returning one record per epoch run.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Scalar>(
    model: &mut SretModel<T>,
    train: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &TrainConfig,
    seed: u64,
    teacher: Option<&SretModel<T>>,
    state: &mut TrainState<T>,
    until_epoch: usize,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if train.num_classes != model.net.config.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            train.num_classes, model.net.config.num_classes
        )));
    }
    match (cfg.loss_mode, teacher) {
        (LossMode::Distill, None) => return Err(Error::config("distillation needs a teacher model")),
        (LossMode::Distill, Some(t)) if t.net.config.num_classes != model.net.config.num_classes => {
            return Err(Error::config(format!(
                "teacher predicts {} classes, student {}",
                t.net.config.num_classes, model.net.config.num_classes
            )));
        }
        _ => {}
    }
    if cfg.mixed_depth && model.net.unrolled_head.is_none() {
        model.build_mixed_depth()?;
    }
    let plan = batch_plan(train.len(), cfg.batch_size, seed);
    let steps = plan.len();
    let mut history = Vec::new();
    while state.epoch < until_epoch.min(cfg.epochs) {
        let (mut loss_sum, mut hits, mut lr) = (0.0, 0usize, 0.0);
        for (b, idx) in plan.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let t = match cfg.loss_mode {
                LossMode::Distill => teacher.map(|t| teacher_logits(t, &x)).transpose()?,
                LossMode::Onehot => None,
            };
            let tape = Tape::new();
            let (loss, h, stats) = batch_loss(model, &tape, &x, &y, cfg, t.as_ref(), derive_seed(seed, STEP_STREAM, b as u64))?;
            let value = loss.value().item()?.to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} at epoch {} step {b}", state.epoch)));
            }
            let grads = tape.backward(loss)?.into_param_grads(model.store.len());
            drop(tape);
            lr = lr_schedule(
                state.epoch as f64 + b as f64 / steps as f64,
                cfg.epochs as f64,
                cfg.warmup_epochs,
                cfg.base_lr,
            )?;
            state.optimizer.step(&mut model.store, &grads, lr)?;
            model.apply_running_stats(stats)?;
            state.step += 1;
            loss_sum += value * idx.len() as f64;
            hits += h;
        }
        let (eval_acc, _) = evaluate(model, eval, cfg.batch_size)?;
        history.push(EpochMetrics {
            epoch: state.epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            eval_acc,
            lr,
        });
        state.epoch += 1;
    }
    Ok(history)
}
