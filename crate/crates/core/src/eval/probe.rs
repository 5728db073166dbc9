//! Linear evaluation and fine-tuning.
//!
//! Both protocols train on random-resized-crop + flip views of the training
//! split and report top-1 accuracy on central crops of the test split. The
//! linear probe freezes the encoder (eval-mode batch norm) and standardises
//! pooled features with statistics of the training set's central crops.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, center_view, AugmentPolicy};
use crate::checkpoint::Checkpoint;
use crate::data::{load_split, open_dataset, stratified_subset, to_batch, DatasetManifest, LoadedSplit, Split, SubsetSpec};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{global_avg_pool, global_avg_pool_backward, Encoder, Linear, Mat, Module, Param, Sgd};
use crate::seed::{mix, stream};
use crate::trainer::lr_at;

/// Fraction of the shorter side kept by the inference-time central crop.
pub const CENTER_CROP: f64 = 0.875;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Linear,
    Finetune,
}

/// Optimisation settings shared by both protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Network input size.
    pub resolution: usize,
    /// Batch size for feature extraction and prediction only.
    pub eval_batch_size: usize,
}

impl ProbeOptions {
    pub fn linear(resolution: usize, seed: u64) -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
            resolution,
            eval_batch_size: 128,
        }
    }

    pub fn finetune(resolution: usize, seed: u64) -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            weight_decay: 1e-4,
            ..Self::linear(resolution, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::validation("batch sizes must be positive"));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::validation("lr, momentum and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// A complete evaluation job, as read from the command line or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub protocol: Protocol,
    pub dataset: PathBuf,
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            protocol: Protocol::Linear,
            dataset: PathBuf::new(),
            fraction: 1.0,
            epochs: 30,
            lr: 0.1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint.as_os_str().is_empty() {
            return Err(Error::Config("evaluation needs a checkpoint".into()));
        }
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::Config("evaluation needs a dataset".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("eval config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn options(&self, resolution: usize) -> ProbeOptions {
        let base = match self.protocol {
            Protocol::Linear => ProbeOptions::linear(resolution, self.seed),
            Protocol::Finetune => ProbeOptions::finetune(resolution, self.seed),
        };
        ProbeOptions {
            epochs: self.epochs,
            lr: self.lr,
            ..base
        }
    }
}

/// Per-dimension standardisation fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(x: &Mat<f32>) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0f64; x.cols];
        let mut sq = vec![0f64; x.cols];
        for r in 0..x.rows {
            for (j, &v) in x.row(r).iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut std = vec![0f32; x.cols];
        for j in 0..x.cols {
            mean[j] /= n;
            let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
            std[j] = (var.sqrt() as f32).max(1e-6);
        }
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, x: &mut Mat<f32>) {
        for r in 0..x.rows {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Pooled eval-mode features of `images`, computed `batch` at a time.
pub fn encode(encoder: &Encoder<f32>, images: &[Image], batch: usize) -> Mat<f32> {
    let c = encoder.out_channels();
    let mut out = Mat::zeros(images.len(), c);
    for (k, chunk) in images.chunks(batch.max(1)).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let pooled = global_avg_pool(&encoder.forward_eval(&to_batch(&refs)));
        let start = k * batch.max(1) * c;
        out.data[start..start + pooled.data.len()].copy_from_slice(&pooled.data);
    }
    out
}

fn center_views(images: &[Image], resolution: usize) -> Vec<Image> {
    images.iter().map(|x| center_view(x, resolution, CENTER_CROP)).collect()
}

fn train_views(images: &[Image], idx: &[usize], opts: &ProbeOptions, epoch: usize) -> Vec<Image> {
    let policy = AugmentPolicy::crop_and_flip(opts.resolution);
    idx.iter()
        .map(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, stream::PROBE, epoch as u64, i as u64]));
            augment(&images[i], &policy, &mut rng).0
        })
        .collect()
}

/// Mean cross-entropy of `logits` and its gradient.
pub fn softmax_cross_entropy(logits: &Mat<f32>, labels: &[usize]) -> (f64, Mat<f32>) {
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    let n = logits.rows as f32;
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        loss += (sum.ln() - (row[labels[r]] - max)) as f64;
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (exps[j] / sum - if j == labels[r] { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / logits.rows.max(1) as f64, grad)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_labels(split: &LoadedSplit, n_classes: usize) -> Result<()> {
    match split.labels.iter().find(|&&l| l >= n_classes) {
        Some(l) => Err(Error::validation(format!("label {l} out of range for {n_classes} classes"))),
        None => Ok(()),
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn check_classifier(encoder: &Encoder<f32>, classifier: &Linear<f32>) -> Result<()> {
    if classifier.in_features != encoder.out_channels() {
        return Err(Error::validation(format!(
            "classifier expects {} features but the backbone produces {}",
            classifier.in_features,
            encoder.out_channels()
        )));
    }
    Ok(())
}

/// A frozen-feature linear classifier.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub standardizer: Standardizer,
    pub classifier: Linear<f32>,
}

impl LinearModel {
    /// Central-crop predictions; independent of `batch`.
    pub fn predict(&self, encoder: &Encoder<f32>, images: &[Image], resolution: usize, batch: usize) -> Result<Vec<usize>> {
        check_classifier(encoder, &self.classifier)?;
        let mut feats = encode(encoder, &center_views(images, resolution), batch);
        self.standardizer.apply(&mut feats);
        let logits = self.classifier.apply(&feats);
        Ok((0..logits.rows).map(|r| argmax(logits.row(r))).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub model: LinearModel,
}

/// Trains a linear classifier on frozen features of `encoder`.
pub fn linear_probe_encoder(
    encoder: &Encoder<f32>,
    train: &LoadedSplit,
    test: &LoadedSplit,
    n_classes: usize,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    opts.validate()?;
    check_labels(train, n_classes)?;
    check_labels(test, n_classes)?;
    if train.is_empty() {
        return Err(Error::validation("linear probe needs training images"));
    }
    let standardizer = Standardizer::fit(&encode(encoder, &center_views(&train.images, opts.resolution), opts.eval_batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, stream::PROBE]));
    let mut classifier = Linear::<f32>::new(encoder.out_channels(), n_classes, &mut rng);
    let sgd = Sgd {
        momentum: opts.momentum,
        weight_decay: opts.weight_decay,
    };
    let batch = opts.batch_size.min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let total = per_epoch * opts.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let views = train_views(&train.images, idx, opts, epoch);
            let mut feats = encode(encoder, &views, opts.eval_batch_size);
            standardizer.apply(&mut feats);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = classifier.forward(&feats);
            let (_, grad) = softmax_cross_entropy(&logits, &labels);
            classifier.zero_grad();
            classifier.backward(&grad, &cache);
            let lr = lr_at(step, total, 0, opts.lr)?;
            let mut params: Vec<&mut Param<f32>> = Vec::new();
            classifier.params_mut(&mut params);
            sgd.step(&mut params, lr);
            step += 1;
        }
    }
    let model = LinearModel {
        standardizer,
        classifier,
    };
    let predictions = model.predict(encoder, &test.images, opts.resolution, opts.eval_batch_size)?;
    Ok(ProbeResult {
        accuracy: accuracy(&predictions, &test.labels),
        predictions,
        model,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub encoder: Encoder<f32>,
    pub head: Linear<f32>,
}

/// Trains encoder and a linear head end to end, starting from `encoder`.
/// With `epochs = 0` this reports the randomly initialised head.
pub fn finetune_encoder(
    encoder: &Encoder<f32>,
    train: &LoadedSplit,
    test: &LoadedSplit,
    n_classes: usize,
    opts: &ProbeOptions,
) -> Result<FinetuneResult> {
    opts.validate()?;
    check_labels(train, n_classes)?;
    check_labels(test, n_classes)?;
    if train.is_empty() {
        return Err(Error::validation("fine-tuning needs training images"));
    }
    let mut encoder = encoder.clone();
    let initial: Vec<Vec<f32>> = {
        let mut ps = Vec::new();
        encoder.params(&mut ps);
        ps.iter().map(|p| p.value.clone()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, stream::PROBE]));
    let mut head = Linear::<f32>::new(encoder.out_channels(), n_classes, &mut rng);
    let sgd = Sgd {
        momentum: opts.momentum,
        weight_decay: opts.weight_decay,
    };
    // batch norm needs at least two samples per batch
    let batch = opts.batch_size.min(train.len()).max(2.min(train.len()));
    let per_epoch = train.len() / batch;
    let total = per_epoch * opts.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(batch) {
            let views = train_views(&train.images, idx, opts, epoch);
            let refs: Vec<&Image> = views.iter().collect();
            let (f, enc_cache) = encoder.forward_train(&to_batch(&refs));
            let pooled = global_avg_pool(&f);
            let (logits, head_cache) = head.forward(&pooled);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    diagnostics: format!("fine-tuning cross-entropy {loss}"),
                });
            }
            encoder.zero_grad();
            head.zero_grad();
            let g_pooled = head.backward(&grad, &head_cache);
            encoder.backward(&global_avg_pool_backward(&g_pooled, f.h, f.w), &enc_cache);
            let lr = lr_at(step, total, 0, opts.lr)?;
            let mut params: Vec<&mut Param<f32>> = Vec::new();
            encoder.params_mut(&mut params);
            head.params_mut(&mut params);
            sgd.step(&mut params, lr);
            step += 1;
        }
    }
    if step > 0 {
        let mut ps = Vec::new();
        encoder.params(&mut ps);
        let changed = ps.iter().zip(&initial).any(|(p, v)| p.value != *v);
        if !changed {
            return Err(Error::validation("fine-tuning left the backbone unchanged"));
        }
    }
    check_classifier(&encoder, &head)?;
    let views = center_views(&test.images, opts.resolution);
    let mut predictions = Vec::with_capacity(views.len());
    for chunk in views.chunks(opts.eval_batch_size) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let logits = head.apply(&global_avg_pool(&encoder.forward_eval(&to_batch(&refs))));
        predictions.extend((0..logits.rows).map(|r| argmax(logits.row(r))));
    }
    Ok(FinetuneResult {
        accuracy: accuracy(&predictions, &test.labels),
        predictions,
        encoder,
        head,
    })
}

/// Train/test splits of a manifest after taking the fractional subset of the
/// training split.
pub fn load_eval_splits(dataset: &std::path::Path, fraction: f64, seed: u64) -> Result<(DatasetManifest, LoadedSplit, LoadedSplit)> {
    let m = open_dataset(dataset)?;
    let m = stratified_subset(&m, SubsetSpec { fraction, seed })?;
    let train = load_split(&m, Split::Train)?;
    let test = load_split(&m, Split::Test)?;
    Ok((m, train, test))
}

/// Linear evaluation of a checkpoint's online encoder.
pub fn linear_probe(cfg: &EvalConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let net = ck.build_network()?;
    let (m, train, test) = load_eval_splits(&cfg.dataset, cfg.fraction, cfg.seed)?;
    let opts = cfg.options(ck.config.augment.resolution);
    linear_probe_encoder(&net.encoder, &train, &test, m.num_classes(), &opts)
}

/// Fine-tuning evaluation of a checkpoint's online encoder.
pub fn finetune(cfg: &EvalConfig) -> Result<FinetuneResult> {
    cfg.validate()?;
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let net = ck.build_network()?;
    let (m, train, test) = load_eval_splits(&cfg.dataset, cfg.fraction, cfg.seed)?;
    let opts = cfg.options(ck.config.augment.resolution);
    finetune_encoder(&net.encoder, &train, &test, m.num_classes(), &opts)
}
