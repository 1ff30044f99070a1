//! Single linear layer trained with softmax cross-entropy.
//!
//! Parameters are `f64` in memory and `f32` in checkpoints. Training is
//! deterministic for a fixed seed: per-sample work may run on several
//! threads, but every reduction happens in a fixed order.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{FusedFeature, FusionStrategy};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPRB";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// Below this many multiply-adds per pass, threading costs more than it saves.
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}: {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain (minibatch) gradient descent.
    GradientDescent,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.001,
            optimizer: Optimizer::Adam,
            batch_size: 256,
            seed: 0,
            shuffle: true,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.epochs == 0 {
            return Err(ProbeError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ProbeError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ProbeError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ProbeError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Dense feature rows with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<String>,
}

impl LabeledFeatures {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f64], label: usize) -> Result<(), ProbeError> {
        if row.len() != self.dim {
            return Err(ProbeError::DimMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite("features"));
        }
        self.rows.extend_from_slice(row);
        self.labels.push(label);
        self.ids.push(id.into());
        Ok(())
    }

    pub fn from_fused(features: &[FusedFeature], labels: &[usize]) -> Result<Self, ProbeError> {
        if features.len() != labels.len() {
            return Err(ProbeError::DimMismatch {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        let first = features.first().ok_or(ProbeError::Empty("feature list"))?;
        let mut out = Self::new(first.values.dim());
        for (f, &l) in features.iter().zip(labels) {
            out.push(f.sample_id.clone(), f.values.values(), l)?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, ProbeError> {
    if logits.is_empty() {
        return Err(ProbeError::Empty("logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("logits"));
    }
    Ok(softmax_unchecked(logits))
}

fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[class]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64, ProbeError> {
    if class >= logits.len() {
        return Err(ProbeError::ClassOutOfRange {
            index: class,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("logits"));
    }
    Ok((log_sum_exp(logits) - logits[class]).max(0.0))
}

pub fn cross_entropy_from_probs(probs: &[f64], class: usize) -> Result<f64, ProbeError> {
    let p = probs.get(class).ok_or(ProbeError::ClassOutOfRange {
        index: class,
        classes: probs.len(),
    })?;
    Ok(-p.ln())
}

/// Mean cross-entropy over a batch of logit rows.
pub fn mean_cross_entropy(batch: &[Vec<f64>], classes: &[usize]) -> Result<f64, ProbeError> {
    if batch.is_empty() {
        return Err(ProbeError::Empty("batch"));
    }
    if batch.len() != classes.len() {
        return Err(ProbeError::DimMismatch {
            expected: batch.len(),
            actual: classes.len(),
        });
    }
    let mut total = 0.0;
    for (z, &c) in batch.iter().zip(classes) {
        total += cross_entropy(z, c)?;
    }
    Ok(total / batch.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Correct/total counts. Kept as integers so percentages round exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Percentage with three decimals, ties rounded to even.
    pub fn percent_string(&self) -> String {
        let num = self.correct as u128 * 100_000;
        let den = self.total as u128;
        let (q, r) = (num / den, num % den);
        let q = match (2 * r).cmp(&den) {
            std::cmp::Ordering::Greater => q + 1,
            std::cmp::Ordering::Equal if q % 2 == 1 => q + 1,
            _ => q,
        };
        format!("{}.{:03}", q / 1000, q % 1000)
    }
}

/// Formats an accuracy in `[0, 1]` as a percentage with three decimals,
/// ties rounded to even: `0.91753` becomes `"91.753"`.
pub fn format_percent(fraction: f64) -> String {
    let milli = (fraction * 100_000.0).round_ties_even() as i64;
    let sign = if milli < 0 { "-" } else { "" };
    let m = milli.unsigned_abs();
    format!("{sign}{}.{:03}", m / 1000, m % 1000)
}

/// Weight matrix (row-major, `classes x feature_dim`) and bias of the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub strategy: FusionStrategy,
    pub config: TrainConfig,
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    /// Weights then bias, the same order as [`ProbeModel::param`].
    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }
}

impl ProbeModel {
    pub fn zeros(
        class_names: Vec<String>,
        feature_dim: usize,
        strategy: FusionStrategy,
        config: TrainConfig,
    ) -> Result<Self, ProbeError> {
        if class_names.is_empty() {
            return Err(ProbeError::Empty("class list"));
        }
        if feature_dim == 0 {
            return Err(ProbeError::Empty("feature vector"));
        }
        Ok(Self {
            weights: vec![0.0; class_names.len() * feature_dim],
            bias: vec![0.0; class_names.len()],
            class_names,
            feature_dim,
            strategy,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        if i < self.weights.len() {
            self.weights[i] = v;
        } else {
            let j = i - self.weights.len();
            self.bias[j] = v;
        }
    }

    fn check_dim(&self, dim: usize) -> Result<(), ProbeError> {
        if dim != self.feature_dim {
            return Err(ProbeError::DimMismatch {
                expected: self.feature_dim,
                actual: dim,
            });
        }
        Ok(())
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, z) in out.iter_mut().enumerate() {
            let w = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            *z = self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ProbeError> {
        self.check_dim(x.len())?;
        let mut out = vec![0.0; self.num_classes()];
        self.logits_into(x, &mut out);
        Ok(out)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ProbeError> {
        Ok(argmax(&self.logits(x)?))
    }

    fn per_sample<T: Send>(&self, data: &LabeledFeatures, f: impl Fn(&[f64], usize) -> T + Sync) -> Vec<T> {
        let work = data.len() * self.feature_dim * self.num_classes();
        if work >= PARALLEL_THRESHOLD {
            (0..data.len())
                .into_par_iter()
                .map(|i| f(data.row(i), data.label(i)))
                .collect()
        } else {
            (0..data.len()).map(|i| f(data.row(i), data.label(i))).collect()
        }
    }

    fn check_data(&self, data: &LabeledFeatures) -> Result<(), ProbeError> {
        if data.is_empty() {
            return Err(ProbeError::Empty("evaluation set"));
        }
        self.check_dim(data.dim())?;
        if let Some(&bad) = data.labels().iter().find(|&&l| l >= self.num_classes()) {
            return Err(ProbeError::ClassOutOfRange {
                index: bad,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn accuracy(&self, data: &LabeledFeatures) -> Result<Accuracy, ProbeError> {
        self.check_data(data)?;
        let hits = self.per_sample(data, |x, y| {
            let mut z = vec![0.0; self.num_classes()];
            self.logits_into(x, &mut z);
            argmax(&z) == y
        });
        Ok(Accuracy {
            correct: hits.into_iter().filter(|&h| h).count(),
            total: data.len(),
        })
    }

    /// Mean cross-entropy over `data` (no weight-decay term).
    pub fn mean_loss(&self, data: &LabeledFeatures) -> Result<f64, ProbeError> {
        self.check_data(data)?;
        let losses = self.per_sample(data, |x, y| {
            let mut z = vec![0.0; self.num_classes()];
            self.logits_into(x, &mut z);
            log_sum_exp(&z) - z[y]
        });
        Ok(losses.iter().sum::<f64>() / data.len() as f64)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            feature_dim: self.feature_dim,
            class_names: self.class_names.clone(),
            strategy: self.strategy,
            train_config: self.config.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let bad = |m: &str| ProbeError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ProbeError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| ProbeError::Checkpoint(e.to_string()))?;
        let classes = header.class_names.len();
        let n = classes * header.feature_dim + classes;
        let params = &bytes[12 + header_len..];
        if params.len() != 4 * n {
            return Err(ProbeError::Checkpoint(format!(
                "expected {n} parameters, found {} bytes",
                params.len()
            )));
        }
        let values: Vec<f64> = params
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite("checkpoint parameters"));
        }
        let split = classes * header.feature_dim;
        Ok(Self {
            weights: values[..split].to_vec(),
            bias: values[split..].to_vec(),
            class_names: header.class_names,
            feature_dim: header.feature_dim,
            strategy: header.strategy,
            config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    feature_dim: usize,
    class_names: Vec<String>,
    strategy: FusionStrategy,
    train_config: TrainConfig,
}

/// Mean loss and its gradient over the rows `idx` of `data`.
fn loss_and_gradient(model: &ProbeModel, data: &LabeledFeatures, idx: &[usize]) -> (f64, Gradient) {
    let classes = model.num_classes();
    let dim = model.feature_dim;
    let parallel = idx.len() * dim * classes >= PARALLEL_THRESHOLD;

    // Per-sample (loss, p - onehot).
    let residual = |&i: &usize| {
        let mut z = vec![0.0; classes];
        model.logits_into(data.row(i), &mut z);
        let y = data.label(i);
        let loss = log_sum_exp(&z) - z[y];
        let mut r = softmax_unchecked(&z);
        r[y] -= 1.0;
        (loss, r)
    };
    let per_sample: Vec<(f64, Vec<f64>)> = if parallel {
        idx.par_iter().map(residual).collect()
    } else {
        idx.iter().map(residual).collect()
    };

    let scale = 1.0 / idx.len() as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() * scale;
    let mut grad = Gradient::zeros(classes, dim);
    let row_grad = |(c, g_row): (usize, &mut [f64])| {
        for (&i, (_, r)) in idx.iter().zip(&per_sample) {
            let coef = r[c];
            if coef != 0.0 {
                for (g, x) in g_row.iter_mut().zip(data.row(i)) {
                    *g += coef * x;
                }
            }
        }
        for g in g_row.iter_mut() {
            *g *= scale;
        }
    };
    if parallel {
        grad.weights.par_chunks_mut(dim).enumerate().for_each(row_grad);
    } else {
        grad.weights.chunks_mut(dim).enumerate().for_each(row_grad);
    }
    for (c, b) in grad.bias.iter_mut().enumerate() {
        *b = per_sample.iter().map(|(_, r)| r[c]).sum::<f64>() * scale;
    }
    (loss, grad)
}

/// Analytic gradient of the mean cross-entropy over the whole batch:
/// `(p - onehot) x^T` for the weights and `p - onehot` for the bias,
/// averaged over samples.
pub fn loss_gradient(model: &ProbeModel, batch: &LabeledFeatures) -> Result<Gradient, ProbeError> {
    model.check_data(batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(loss_and_gradient(model, batch, &idx).1)
}

/// Central finite-difference gradient of [`ProbeModel::mean_loss`], for
/// verifying [`loss_gradient`].
pub fn finite_difference_gradient(model: &ProbeModel, batch: &LabeledFeatures, h: f64) -> Result<Gradient, ProbeError> {
    model.check_data(batch)?;
    let mut probe = model.clone();
    let mut flat = Vec::with_capacity(model.num_params());
    for i in 0..model.num_params() {
        let orig = model.param(i);
        probe.set_param(i, orig + h);
        let up = probe.mean_loss(batch)?;
        probe.set_param(i, orig - h);
        let down = probe.mean_loss(batch)?;
        probe.set_param(i, orig);
        flat.push((up - down) / (2.0 * h));
    }
    let split = model.weights.len();
    Ok(Gradient {
        weights: flat[..split].to_vec(),
        bias: flat[split..].to_vec(),
    })
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,test_accuracy`, floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_accuracy\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.test_accuracy));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ProbeError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

/// Trains a probe from zero-initialized parameters.
///
/// After every epoch the full-train-set loss and the accuracy on `eval`
/// are recorded. The model after the last epoch is returned.
pub fn train(
    train_set: &LabeledFeatures,
    eval: &LabeledFeatures,
    class_names: Vec<String>,
    strategy: FusionStrategy,
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainTrace), ProbeError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ProbeError::Empty("training set"));
    }
    let mut model = ProbeModel::zeros(class_names, train_set.dim(), strategy, config.clone())?;
    model.check_data(train_set)?;
    model.check_data(eval)?;

    let n_params = model.num_params();
    let mut adam = AdamState {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = TrainTrace::default();

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = loss_and_gradient(&model, train_set, batch);
            apply_update(&mut model, &grad, config, &mut adam);
        }
        let train_loss = model.mean_loss(train_set)?;
        if !train_loss.is_finite() {
            return Err(ProbeError::NonFiniteLoss {
                epoch,
                loss: train_loss,
            });
        }
        let acc = model.accuracy(eval)?;
        trace.records.push(EpochRecord {
            epoch,
            train_loss,
            test_accuracy: acc.fraction(),
        });
    }
    Ok((model, trace))
}

fn apply_update(model: &mut ProbeModel, grad: &Gradient, config: &TrainConfig, adam: &mut AdamState) {
    let lr = config.learning_rate;
    let wd = config.weight_decay;
    let n_weights = model.weights.len();
    let params = model.weights.iter_mut().chain(model.bias.iter_mut());
    let grads = grad.weights.iter().chain(&grad.bias);
    match config.optimizer {
        Optimizer::GradientDescent => {
            for (i, (p, g)) in params.zip(grads).enumerate() {
                let g = if i < n_weights { g + wd * *p } else { *g };
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            adam.step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(adam.step);
            let c2 = 1.0 - ADAM_BETA2.powi(adam.step);
            for (i, (p, g)) in params.zip(grads).enumerate() {
                let g = if i < n_weights { g + wd * *p } else { *g };
                let m = &mut adam.m[i];
                let v = &mut adam.v[i];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}
