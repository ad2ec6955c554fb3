//! Linear classification protocol and small-label fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::fingerprint;
use crate::error::{Error, Result};
use crate::nn::{backward, backward_backbone, forward_traced, EncoderParams, ImageSample};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Standardize frozen features with train-split statistics.
    pub standardize: bool,
    pub layer: FeatureLayer,
}

/// Which activations the probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// The normalized contrastive feature `f_θ(x)`.
    Output,
    /// The last hidden layer, below the contrastive head.
    Backbone,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 0.1, batch_size: 32, standardize: true, layer: FeatureLayer::Backbone }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe needs positive epochs, batch size and lr".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Where the classification head attaches. With `Backbone` the
    /// contrastive head is dropped and receives no updates.
    pub layer: FeatureLayer,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { fraction: 0.03, epochs: 100, lr: 0.01, momentum: 0.9, batch_size: 4, layer: FeatureLayer::Backbone }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("fine-tune needs positive epochs, batch size and lr".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("fine-tune momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Outcome of one evaluation. `best_accuracy` is the highest test accuracy
/// seen at any epoch end; `accuracy` is the final-epoch value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub classes: Vec<u32>,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` at the final epoch.
    pub confusion: Vec<Vec<usize>>,
    /// Classes present in the test split but absent from training.
    pub test_only_classes: Vec<u32>,
    pub train_size: usize,
}

/// Multinomial logistic regression head.
#[derive(Debug, Clone)]
struct SoftmaxHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SoftmaxHead {
    fn new(classes: usize, dim: usize) -> Self {
        Self { classes, dim, weights: vec![0.0; classes * dim], bias: vec![0.0; classes] }
    }

    fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| self.bias[c] + crate::nn::dot(&self.weights[c * self.dim..(c + 1) * self.dim], x))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    /// Adds the cross-entropy gradient for one sample to `(gw, gb)` and
    /// returns `∂L/∂x`.
    fn accumulate(&self, x: &[f64], target: usize, gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut p = self.probabilities(x);
        p[target] -= 1.0;
        let mut dx = vec![0.0; self.dim];
        for c in 0..self.classes {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            for i in 0..self.dim {
                gw[c * self.dim + i] += p[c] * x[i];
                dx[i] += p[c] * row[i];
            }
            gb[c] += p[c];
        }
        dx
    }
}

/// Sorted class ids over both splits; classes seen only at test time are
/// reported separately.
fn class_index(train: &[ImageSample], test: &[ImageSample]) -> Result<(Vec<u32>, Vec<u32>)> {
    let label = |img: &ImageSample| img.label.ok_or_else(|| Error::Argument("evaluation image without label".into()));
    let mut classes = Vec::new();
    let mut train_classes = Vec::new();
    for img in train {
        let l = label(img)?;
        train_classes.push(l);
        classes.push(l);
    }
    for img in test {
        classes.push(label(img)?);
    }
    classes.sort_unstable();
    classes.dedup();
    train_classes.sort_unstable();
    train_classes.dedup();
    let test_only = classes.iter().copied().filter(|c| train_classes.binary_search(c).is_err()).collect();
    Ok((classes, test_only))
}

/// Training order that does not depend on how the caller ordered `train`.
fn canonical_order(train: &[ImageSample]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.sort_by_key(|&i| (fingerprint(&train[i]), train[i].label));
    idx
}

fn score(head: &SoftmaxHead, features: &[Vec<f64>], targets: &[usize], classes: usize) -> (f64, Vec<Vec<usize>>) {
    let mut confusion = vec![vec![0; classes]; classes];
    let mut correct = 0;
    for (x, &t) in features.iter().zip(targets) {
        let p = head.predict(x);
        confusion[t][p] += 1;
        if p == t {
            correct += 1;
        }
    }
    (correct as f64 / features.len().max(1) as f64, confusion)
}

fn per_class(confusion: &[Vec<usize>]) -> Vec<f64> {
    confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect()
}

fn targets_of(images: &[ImageSample], classes: &[u32]) -> Vec<usize> {
    images.iter().map(|i| classes.binary_search(&i.label.expect("checked")).expect("indexed")).collect()
}

/// Frozen representation of `image` at `layer`.
pub fn embed(encoder: &EncoderParams, image: &ImageSample, layer: FeatureLayer) -> Result<Vec<f64>> {
    let trace = forward_traced(encoder, &image.pixels)?;
    Ok(match layer {
        FeatureLayer::Output => trace.into_output().into_inner(),
        FeatureLayer::Backbone => trace.backbone().to_vec(),
    })
}

/// Trains a linear softmax classifier on frozen encoder features and
/// returns test accuracy. The encoder is only read.
pub fn linear_probe(
    encoder: &EncoderParams,
    train: &[ImageSample],
    test: &[ImageSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Argument("linear probe needs non-empty train and test splits".into()));
    }
    let (classes, test_only) = class_index(train, test)?;
    let order = canonical_order(train);
    let train: Vec<&ImageSample> = order.iter().map(|&i| &train[i]).collect();

    let embed = |img: &ImageSample| embed(encoder, img, cfg.layer);
    let mut xtr = train.iter().map(|i| embed(i)).collect::<Result<Vec<_>>>()?;
    let mut xte = test.iter().map(embed).collect::<Result<Vec<_>>>()?;
    let dim = xtr[0].len();
    if cfg.standardize {
        let n = xtr.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in &xtr {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for x in &xtr {
            for i in 0..dim {
                std[i] += (x[i] - mean[i]).powi(2) / n;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| if v > 1e-16 { v.sqrt() } else { 1.0 }).collect();
        for x in xtr.iter_mut().chain(xte.iter_mut()) {
            for i in 0..dim {
                x[i] = (x[i] - mean[i]) / std[i];
            }
        }
    }
    let ytr: Vec<usize> =
        train.iter().map(|i| classes.binary_search(&i.label.expect("checked")).expect("indexed")).collect();
    let yte = targets_of(test, &classes);

    let mut rng: ChaCha8Rng = stream_rng(seed, Stream::Probe, 0, 0);
    let mut head = SoftmaxHead::new(classes.len(), dim);
    let mut idx: Vec<usize> = (0..xtr.len()).collect();
    let (mut best, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut last = (0.0, Vec::new());
    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; head.weights.len()];
            let mut gb = vec![0.0; head.classes];
            for &i in batch {
                head.accumulate(&xtr[i], ytr[i], &mut gw, &mut gb);
            }
            let step = cfg.lr / batch.len() as f64;
            for (w, g) in head.weights.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            for (b, g) in head.bias.iter_mut().zip(&gb) {
                *b -= step * g;
            }
        }
        last = score(&head, &xte, &yte, classes.len());
        if last.0 > best {
            best = last.0;
            best_epoch = epoch;
        }
    }
    Ok(EvalOutcome {
        accuracy: last.0,
        best_accuracy: best,
        best_epoch,
        per_class_accuracy: per_class(&last.1),
        confusion: last.1,
        classes,
        test_only_classes: test_only,
        train_size: xtr.len(),
    })
}

/// Per class, `⌊fraction · n_c⌋` images chosen by a seeded shuffle.
pub fn stratified_subsample(train: &[ImageSample], fraction: f64, seed: u64) -> Result<Vec<ImageSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("train fraction {fraction} outside (0, 1]")));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in canonical_order(train) {
        let l = train[i].label.ok_or_else(|| Error::Argument("evaluation image without label".into()))?;
        groups.entry(l).or_default().push(i);
    }
    let mut rng = stream_rng(seed, Stream::FineTune, 1, 0);
    let mut out = Vec::new();
    for (class, mut members) in groups {
        let take = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if take == 0 {
            return Err(Error::Argument(format!(
                "fraction {fraction} leaves no sample of class {class} ({} available)",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        out.extend(members[..take].iter().map(|&i| train[i].clone()));
    }
    Ok(out)
}

/// Appends a linear head to a copy of `encoder` and trains both end to end
/// on a stratified `fraction` of `train`.
pub fn fine_tune(
    encoder: &EncoderParams,
    fraction: f64,
    train: &[ImageSample],
    test: &[ImageSample],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Argument("fine-tune needs a non-empty test split".into()));
    }
    let subset = stratified_subsample(train, fraction, seed)?;
    let (classes, test_only) = class_index(&subset, test)?;
    let ytr = targets_of(&subset, &classes);
    let yte = targets_of(test, &classes);

    let mut params = encoder.clone();
    let dim = match cfg.layer {
        FeatureLayer::Output => params.feature_dim(),
        FeatureLayer::Backbone => params.shapes().last().expect("validated shapes").cols,
    };
    let mut head = SoftmaxHead::new(classes.len(), dim);
    let mut v_enc = vec![0.0; params.len()];
    let mut v_w = vec![0.0; head.weights.len()];
    let mut v_b = vec![0.0; head.classes];
    let mut rng = stream_rng(seed, Stream::FineTune, 2, 0);
    let mut idx: Vec<usize> = (0..subset.len()).collect();

    let evaluate = |params: &EncoderParams, head: &SoftmaxHead| -> Result<(f64, Vec<Vec<usize>>)> {
        let xte = test.iter().map(|i| embed(params, i, cfg.layer)).collect::<Result<Vec<_>>>()?;
        Ok(score(head, &xte, &yte, classes.len()))
    };

    let (mut best, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut last = (0.0, Vec::new());
    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(cfg.batch_size) {
            let mut g_enc = vec![0.0; params.len()];
            let mut gw = vec![0.0; head.weights.len()];
            let mut gb = vec![0.0; head.classes];
            for &i in batch {
                let trace = forward_traced(&params, &subset[i].pixels)?;
                match cfg.layer {
                    FeatureLayer::Output => {
                        let dz = head.accumulate(trace.output().as_slice(), ytr[i], &mut gw, &mut gb);
                        backward(&params, &trace, &dz, &mut g_enc);
                    }
                    FeatureLayer::Backbone => {
                        let db = head.accumulate(trace.backbone(), ytr[i], &mut gw, &mut gb);
                        backward_backbone(&params, &trace, &db, &mut g_enc);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let sgd = |values: &mut [f64], velocity: &mut [f64], grads: &[f64]| {
                for ((p, v), g) in values.iter_mut().zip(velocity.iter_mut()).zip(grads) {
                    *v = cfg.momentum * *v + g * scale;
                    *p -= cfg.lr * *v;
                }
            };
            sgd(params.values_mut(), &mut v_enc, &g_enc);
            sgd(&mut head.weights, &mut v_w, &gw);
            sgd(&mut head.bias, &mut v_b, &gb);
        }
        last = evaluate(&params, &head)?;
        if last.0 > best {
            best = last.0;
            best_epoch = epoch;
        }
    }
    Ok(EvalOutcome {
        accuracy: last.0,
        best_accuracy: best,
        best_epoch,
        per_class_accuracy: per_class(&last.1),
        confusion: last.1,
        classes,
        test_only_classes: test_only,
        train_size: subset.len(),
    })
}
