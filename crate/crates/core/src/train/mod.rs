//! Loss, optimizers, the training loop and classification metrics.

mod metrics;
mod optim;

pub use metrics::{compute_metrics, confusion_matrix, ConfusionMatrix, MetricsReport};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::nn::{ForwardCtx, Mode};
use crate::tensor::Tensor;

/// Probabilities below this are raised to it before taking the log.
pub const PROB_CLAMP: f32 = 1e-12;

/// `-(1/N) * sum_i ln(max(probs[i, labels[i]], 1e-12))` for `probs: [N, K]`.
pub fn cross_entropy_loss<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let p = probs.value();
    let &[n, k] = p.shape() else {
        return Err(Error::DimMismatch(format!("cross entropy expects [N, K] probabilities, got {:?}", p.shape())));
    };
    if labels.len() != n {
        return Err(Error::LengthMismatch(labels.len(), n));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -(p.data()[i * k + l].max(PROB_CLAMP) as f64).ln()).sum();
    let value = Tensor::scalar((total / n as f64) as f32);
    Ok(probs.tape().push(value, Op::Nll { probs: probs.id(), labels: labels.to_vec(), clamp: PROB_CLAMP }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub val_fraction: f64,
    /// After each epoch's updates, reset batch-norm running statistics to the
    /// statistics of one training batch, so inference sees weights and
    /// statistics that belong together.
    pub recalibrate_bn: bool,
    /// Size of that batch, spread evenly over the training split. The whole
    /// split is used when it is smaller.
    pub bn_calibration_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, epochs: 100, batch_size: 128, optimizer: OptimizerKind::Adam, seed: 0, val_fraction: 0.2, recalibrate_bn: true, bn_calibration_samples: 256 }
    }
}

impl TrainConfig {
    /// A learning rate of exactly 0 is accepted and freezes the model.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.recalibrate_bn && self.bn_calibration_samples < 2 {
            return Err(Error::Config("bn_calibration_samples must be >= 2".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::model::parse;
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" | "batch" => self.batch_size = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "recalibrate_bn" => self.recalibrate_bn = parse(key, value)?,
            "bn_calibration_samples" => self.bn_calibration_samples = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("seed", self.seed.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("recalibrate_bn", self.recalibrate_bn.to_string()),
            ("bn_calibration_samples", self.bn_calibration_samples.to_string()),
        ]
    }
}

/// Square single-channel images with integer labels.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub size: usize,
    pub class_count: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(size: usize, class_count: usize) -> Self {
        Self { size, class_count, images: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, image: Vec<f32>, label: usize) -> Result<()> {
        if image.len() != self.size * self.size {
            return Err(Error::ShapeMismatch(format!("image of {} values for size {}", image.len(), self.size)));
        }
        if label >= self.class_count {
            return Err(Error::LabelOutOfRange { label, classes: self.class_count });
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[indices.len(), 1, size, size]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.size * self.size);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        Tensor::new(&[indices.len(), 1, self.size, self.size], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Seeded per-class split. Each class contributes `round(n * val_fraction)`
/// samples to validation, kept within `[1, n - 1]`. Both lists are sorted.
pub fn stratified_split(labels: &[usize], class_count: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..class_count {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::EmptyClass(format!(
                "class {class} has {} samples; training and validation each need one",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Inference-mode pass over a subset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &ModelGraph, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<Evaluation> {
    let k = model.config().class_count;
    let labels = data.labels_of(indices);
    let mut predictions = Vec::with_capacity(indices.len());
    let mut total = 0.0f64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let probs = model.predict(&data.batch(chunk)?)?;
        for (row, &i) in probs.data().chunks(k).zip(chunk) {
            total -= (row[data.labels[i]].max(PROB_CLAMP) as f64).ln();
            predictions.push(argmax(row));
        }
    }
    let confusion = confusion_matrix(&predictions, &labels, k)?;
    let metrics = compute_metrics(&confusion)?;
    Ok(Evaluation { loss: total / indices.len().max(1) as f64, predictions, confusion, metrics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EpochRecord {
    fn new(epoch: usize, phase: Phase, e: &Evaluation) -> Self {
        let m = &e.metrics;
        Self { epoch, phase, loss: e.loss, accuracy: m.accuracy, precision: m.macro_precision, recall: m.macro_recall, f1: m.macro_f1 }
    }
}

pub const HISTORY_HEADER: &str = "epoch,phase,loss,accuracy,precision,recall,f1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch,
            r.phase.name(),
            r.loss,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Infer-mode results after the last epoch.
    pub train: Evaluation,
    pub val: Evaluation,
}

/// Train `model` in place. After every epoch both splits are evaluated in
/// inference mode and `on_epoch` sees the epoch's two history rows.
pub fn train_with(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.size != model.config().input_size {
        return Err(Error::ShapeMismatch(format!("dataset images are {0}x{0}, model expects {1}", data.size, model.config().input_size)));
    }
    if data.class_count != model.config().class_count {
        return Err(Error::ShapeMismatch(format!("dataset has {} classes, model has {}", data.class_count, model.config().class_count)));
    }
    let (train_idx, val_idx) = stratified_split(&data.labels, data.class_count, cfg.val_fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ee_d0fb_a7c4);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let frozen = cfg.learning_rate == 0.0;
    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut order = train_idx.clone();
    let mut last = None;
    let calibration = spread(&train_idx, cfg.bn_calibration_samples);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let dropout_seed = rng.next_u64();
            if frozen {
                continue;
            }
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let mut ctx = ForwardCtx::new(Mode::Train, dropout_seed);
            let input = tape.constant(data.batch(chunk)?);
            let probs = model.forward_var(&bound, input, &mut ctx)?;
            let loss = cross_entropy_loss(probs, &data.labels_of(chunk))?;
            let mut grads = tape.backward(loss)?;
            let per_param: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| grads.take(v)).collect();
            opt.step(model.store_mut(), &per_param);
            model.apply_stat_updates(&bound, &ctx.stat_updates);
        }
        if cfg.recalibrate_bn && !frozen {
            model.recalibrate_batchnorm([&data.batch(&calibration)?])?;
        }
        let tr = evaluate(model, data, &train_idx, cfg.batch_size)?;
        let va = evaluate(model, data, &val_idx, cfg.batch_size)?;
        let (rt, rv) = (EpochRecord::new(epoch, Phase::Train, &tr), EpochRecord::new(epoch, Phase::Val, &va));
        on_epoch(&rt, &rv);
        history.push(rt);
        history.push(rv);
        last = Some((tr, va));
    }

    let (train, val) = match last {
        Some(pair) => pair,
        None => (evaluate(model, data, &train_idx, cfg.batch_size)?, evaluate(model, data, &val_idx, cfg.batch_size)?),
    };
    Ok(TrainReport { history, train_indices: train_idx, val_indices: val_idx, train, val })
}

/// Up to `k` entries of `items`, evenly spaced.
fn spread(items: &[usize], k: usize) -> Vec<usize> {
    let n = items.len();
    if k >= n {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * n / k]).collect()
}

pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_, _| {})
}
