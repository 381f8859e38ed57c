//! Frame-level probing classifier.
//!
//! A one-hidden-layer ReLU network with a softmax output, trained with
//! mini-batch Adam on mean cross-entropy. Inputs are standardized with
//! statistics from the training split; the returned model has the
//! standardization folded into its first layer, so it consumes raw features.
//! The model kept is the snapshot from the epoch with the lowest validation
//! loss (earliest on ties).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array, Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{decode_block, encode_block};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const STD_FLOOR: f64 = 1e-8;

/// Rows evaluated at once when scoring a whole split.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden_size: usize,
    pub epochs: usize,
    pub window_radius: usize,
    pub shift_k: i32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_size: 500,
            epochs: 30,
            window_radius: 0,
            shift_k: 0,
            learning_rate: 1e-3,
            batch_size: 256,
            dropout_rate: 0.0,
            seed: 0,
            input_dim: 0,
            n_classes: 0,
        }
    }
}

impl ProbeConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        ProbeConfig {
            input_dim,
            n_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("input_dim", self.input_dim),
            ("n_classes", self.n_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be >= 1"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameters of `softmax(W2 relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `hidden x input`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `classes x hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients with the same shapes as the [`ProbeModel`] fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ProbeModel {
    pub fn zeros(input_dim: usize, hidden_size: usize, n_classes: usize) -> Self {
        ProbeModel {
            w1: Array2::zeros((hidden_size, input_dim)),
            b1: Array1::zeros(hidden_size),
            w2: Array2::zeros((n_classes, hidden_size)),
            b2: Array1::zeros(n_classes),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden_size: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut m = Self::zeros(input_dim, hidden_size, n_classes);
        let a1 = (6.0 / (input_dim + hidden_size) as f64).sqrt();
        m.w1.mapv_inplace(|_| rng.random_range(-a1..a1));
        let a2 = (6.0 / (hidden_size + n_classes) as f64).sqrt();
        m.w2.mapv_inplace(|_| rng.random_range(-a2..a2));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: cols,
            });
        }
        Ok(())
    }

    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut hidden = x.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        hidden.dot(&self.w2.t()) + &self.b2
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Class probabilities for one input vector.
pub fn forward(model: &ProbeModel, x: &[f64]) -> Result<Vec<f64>> {
    model.check_input(x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("x", "non-finite input"));
    }
    let view = ArrayView2::from_shape((1, x.len()), x).expect("shape matches length");
    let mut logits = model.logits(view);
    softmax_rows(&mut logits);
    Ok(logits.into_raw_vec_and_offset().0)
}

fn check_labels(labels: &[u32], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::Index {
            index: bad as usize,
            len: n_classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy and its gradients. `keep_mask`, when given, is the
/// already-scaled dropout mask applied to the hidden activations.
fn forward_backward(
    model: &ProbeModel,
    x: ArrayView2<f64>,
    labels: &[u32],
    keep_mask: Option<&Array2<f64>>,
) -> (f64, Gradients) {
    let batch = x.nrows() as f64;
    let pre = x.dot(&model.w1.t()) + &model.b1;
    let mut hidden = pre.mapv(|v| v.max(0.0));
    if let Some(mask) = keep_mask {
        hidden *= mask;
    }
    let logits = hidden.dot(&model.w2.t()) + &model.b2;

    let mut loss = 0.0;
    let mut d_logits = logits.clone();
    for ((row, mut d_row), &y) in logits
        .rows()
        .into_iter()
        .zip(d_logits.rows_mut())
        .zip(labels)
    {
        let lse = log_sum_exp(row);
        loss += lse - row[y as usize];
        d_row.mapv_inplace(|v| (v - lse).exp());
        d_row[y as usize] -= 1.0;
    }
    loss /= batch;
    d_logits /= batch;

    let gw2 = d_logits.t().dot(&hidden);
    let gb2 = d_logits.sum_axis(Axis(0));
    let mut d_hidden = d_logits.dot(&model.w2);
    if let Some(mask) = keep_mask {
        d_hidden *= mask;
    }
    Zip::from(&mut d_hidden).and(&pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let gw1 = d_hidden.t().dot(&x);
    let gb1 = d_hidden.sum_axis(Axis(0));
    (
        loss,
        Gradients {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    )
}

/// Mean cross-entropy over `(x, labels)` and the gradient for every parameter.
pub fn loss_and_gradients(
    model: &ProbeModel,
    x: ArrayView2<f64>,
    labels: &[u32],
) -> Result<(f64, Gradients)> {
    if labels.is_empty() || x.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: labels.len(),
        });
    }
    model.check_input(x.ncols())?;
    check_labels(labels, model.n_classes())?;
    Ok(forward_backward(model, x, labels, None))
}

/// Argmax of the class probabilities per row; ties go to the lowest index.
pub fn predict_batch(model: &ProbeModel, x: ArrayView2<f64>) -> Result<Vec<u32>> {
    model.check_input(x.ncols())?;
    let mut out = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let mut probs = model.logits(x.slice(s![start..end, ..]));
        softmax_rows(&mut probs);
        out.extend(
            probs
                .rows()
                .into_iter()
                .map(|row| argmax(row.iter().copied())),
        );
    }
    Ok(out)
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> u32 {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best.0
}

/// Mean cross-entropy and accuracy over a whole split.
pub fn evaluate(model: &ProbeModel, x: ArrayView2<f64>, labels: &[u32]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.check_input(x.ncols())?;
    check_labels(labels, model.n_classes())?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let logits = model.logits(x.slice(s![start..end, ..]));
        for (row, &y) in logits.rows().into_iter().zip(&labels[start..end]) {
            loss += log_sum_exp(row) - row[y as usize];
            let mut probs = row.to_owned();
            let max = probs.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            probs.mapv_inplace(|v| (v - max).exp());
            if argmax(probs.iter().copied()) == y {
                correct += 1;
            }
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Feature rows and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension {
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("features", "non-finite value"));
        }
        Ok(Dataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Fraction of rows carrying the most frequent label.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = std::collections::HashMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        counts.values().copied().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(x.ncols());
        for row in x.rows() {
            Zip::from(&mut var)
                .and(&row)
                .and(&mean)
                .for_each(|v, &xi, &m| {
                    let d = xi - m;
                    *v += d * d;
                });
        }
        let std = var.mapv(|v| (v / n).sqrt().max(STD_FLOOR));
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            Zip::from(&mut row)
                .and(&self.mean)
                .and(&self.std)
                .for_each(|v, &m, &s| *v = (*v - m) / s);
        }
    }

    /// Rewrites `model` (trained on standardized inputs) to accept raw inputs.
    pub fn fold_into(&self, model: &mut ProbeModel) {
        for (mut row, b) in model.w1.rows_mut().into_iter().zip(model.b1.iter_mut()) {
            let mut shift = 0.0;
            Zip::from(&mut row)
                .and(&self.mean)
                .and(&self.std)
                .for_each(|w, &m, &s| {
                    *w /= s;
                    shift += *w * m;
                });
            *b -= shift;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Training-set loss of the freshly initialized model.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainingTrace {
    pub fn best(&self) -> &EpochStats {
        &self.epochs[self.best_epoch]
    }
}

struct Adam {
    step: i32,
    lr: f64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    fn new(model: &ProbeModel, lr: f64) -> Self {
        let zero = Gradients {
            w1: Array2::zeros(model.w1.raw_dim()),
            b1: Array1::zeros(model.b1.raw_dim()),
            w2: Array2::zeros(model.w2.raw_dim()),
            b2: Array1::zeros(model.b2.raw_dim()),
        };
        Adam {
            step: 0,
            lr,
            m: zero.clone(),
            v: zero,
        }
    }

    fn update(&mut self, model: &mut ProbeModel, g: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        adam_apply(
            &mut model.w1,
            &mut self.m.w1,
            &mut self.v.w1,
            &g.w1,
            self.lr,
            c1,
            c2,
        );
        adam_apply(
            &mut model.b1,
            &mut self.m.b1,
            &mut self.v.b1,
            &g.b1,
            self.lr,
            c1,
            c2,
        );
        adam_apply(
            &mut model.w2,
            &mut self.m.w2,
            &mut self.v.w2,
            &g.w2,
            self.lr,
            c1,
            c2,
        );
        adam_apply(
            &mut model.b2,
            &mut self.m.b2,
            &mut self.v.b2,
            &g.b2,
            self.lr,
            c1,
            c2,
        );
    }
}

fn adam_apply<D: Dimension>(
    param: &mut Array<f64, D>,
    m: &mut Array<f64, D>,
    v: &mut Array<f64, D>,
    grad: &Array<f64, D>,
    lr: f64,
    bias1: f64,
    bias2: f64,
) {
    Zip::from(param)
        .and(m)
        .and(v)
        .and(grad)
        .for_each(|p, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPSILON);
        });
}

/// Trains for exactly `config.epochs` epochs and returns the best-validation snapshot.
pub fn train_probe(
    train: &Dataset,
    val: &Dataset,
    config: &ProbeConfig,
) -> Result<(ProbeModel, TrainingTrace)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (name, ds) in [("train", train), ("val", val)] {
        if ds.dim() != config.input_dim {
            return Err(Error::validation(
                name,
                format!("feature dim {} != input_dim {}", ds.dim(), config.input_dim),
            ));
        }
        check_labels(&ds.labels, config.n_classes)?;
    }

    let standardizer = Standardizer::fit(train.features.view());
    let mut train_x = train.features.clone();
    standardizer.apply(&mut train_x);
    let mut val_x = val.features.clone();
    standardizer.apply(&mut val_x);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ProbeModel::init(
        config.input_dim,
        config.hidden_size,
        config.n_classes,
        &mut rng,
    );
    let mut adam = Adam::new(&model, config.learning_rate);

    let (initial_train_loss, _) = evaluate(&model, train_x.view(), &train.labels)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ProbeModel)> = None;
    let keep = 1.0 - config.dropout_rate;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = train_x.select(Axis(0), idx);
            let y: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            let mask = (config.dropout_rate > 0.0).then(|| {
                Array2::from_shape_fn((idx.len(), config.hidden_size), |_| {
                    if rng.random::<f64>() < config.dropout_rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
            });
            let (loss, grads) = forward_backward(&model, x.view(), &y, mask.as_ref());
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            adam.update(&mut model, &grads);
            if !model.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            loss_sum += loss * idx.len() as f64;
        }
        let (val_loss, val_accuracy) = evaluate(&model, val_x.view(), &val.labels)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
            });
        }
        epochs.push(EpochStats {
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch, val_loss, model.clone()));
        }
    }

    let (best_epoch, _, mut best_model) = best.expect("epochs >= 1");
    standardizer.fold_into(&mut best_model);
    Ok((
        best_model,
        TrainingTrace {
            initial_train_loss,
            epochs,
            best_epoch,
        },
    ))
}

pub const SNAPSHOT_TENSORS: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub tensors: Vec<String>,
    pub config: ProbeConfig,
    pub input_standardization: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes the four parameter tensors as consecutive `.act` blocks plus a JSON sidecar.
///
/// Tensors are stored as 32-bit floats; biases are `1 x n` blocks.
pub fn save_snapshot(path: &Path, model: &ProbeModel, config: &ProbeConfig) -> Result<()> {
    let mut buf = Vec::new();
    let to_f32 = |it: &mut dyn Iterator<Item = &f64>| it.map(|&v| v as f32).collect::<Vec<_>>();
    encode_block(
        &mut buf,
        model.w1.nrows(),
        model.w1.ncols(),
        1,
        &to_f32(&mut model.w1.iter()),
    );
    encode_block(
        &mut buf,
        1,
        model.b1.len(),
        1,
        &to_f32(&mut model.b1.iter()),
    );
    encode_block(
        &mut buf,
        model.w2.nrows(),
        model.w2.ncols(),
        1,
        &to_f32(&mut model.w2.iter()),
    );
    encode_block(
        &mut buf,
        1,
        model.b2.len(),
        1,
        &to_f32(&mut model.b2.iter()),
    );
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let sidecar = SnapshotSidecar {
        tensors: SNAPSHOT_TENSORS.iter().map(|s| s.to_string()).collect(),
        config: config.clone(),
        input_standardization: "folded into w1 and b1".to_string(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Json {
        path: side.clone(),
        source: e,
    })?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_snapshot(path: &Path) -> Result<(ProbeModel, ProbeConfig)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: SnapshotSidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: side.clone(),
        source: e,
    })?;
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut blocks = Vec::new();
    for _ in SNAPSHOT_TENSORS {
        let (h, data, used) = decode_block(&buf[offset..], path)?;
        offset += used;
        let data: Vec<f64> = data.into_iter().map(f64::from).collect();
        blocks.push((h.frames as usize, h.dim as usize, data));
    }
    if offset != buf.len() {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            message: format!("{} trailing bytes", buf.len() - offset),
        });
    }
    let corrupt = |e: ndarray::ShapeError| Error::Corruption {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut it = blocks.into_iter();
    let (r, c, d) = it.next().unwrap();
    let w1 = Array2::from_shape_vec((r, c), d).map_err(corrupt)?;
    let b1 = Array1::from(it.next().unwrap().2);
    let (r, c, d) = it.next().unwrap();
    let w2 = Array2::from_shape_vec((r, c), d).map_err(corrupt)?;
    let b2 = Array1::from(it.next().unwrap().2);
    if b1.len() != w1.nrows() || w2.ncols() != w1.nrows() || b2.len() != w2.nrows() {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            message: "inconsistent tensor shapes".into(),
        });
    }
    Ok((ProbeModel { w1, b1, w2, b2 }, sidecar.config))
}
