//! Intra-node MoCo: two-view augmentation, the FIFO negative dictionary,
//! the momentum key encoder and the per-epoch local update.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::GaussianSampler;
use crate::nn::{forward, loss_and_grad, EncoderParams, FeatureVector, ImageSample};

/// Ranges of the stochastic view transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub min_crop_area: f64,
    pub gamma_range: (f64, f64),
    /// Multiplier range applied around the view mean.
    pub contrast_range: (f64, f64),
    /// Largest additive intensity shift.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            min_crop_area: 0.7,
            gamma_range: (0.7, 1.4),
            contrast_range: (1.0, 1.0),
            brightness: 0.0,
        }
    }
}

/// Draws one random view: horizontal flip, rotation (nearest neighbour,
/// zero fill), square crop resized back bilinearly, and a gamma contrast
/// remap. Output pixels are clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(image: &ImageSample, rng: &mut R) -> ImageSample {
    augment_with(image, &AugmentConfig::default(), rng)
}

pub fn augment_with<R: Rng + ?Sized>(image: &ImageSample, cfg: &AugmentConfig, rng: &mut R) -> ImageSample {
    let (h, w) = (image.height, image.width);
    let flip = rng.random_bool(cfg.flip_prob);
    let angle = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
    let area = rng.random_range(cfg.min_crop_area..=1.0);
    let side_y = area.sqrt() * h as f64;
    let side_x = area.sqrt() * w as f64;
    let oy = rng.random_range(0.0..=(h as f64 - side_y));
    let ox = rng.random_range(0.0..=(w as f64 - side_x));
    let gamma = rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1);
    let contrast = rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1);
    let shift = rng.random_range(-cfg.brightness..=cfg.brightness);

    let mut px = image.pixels.clone();
    if flip {
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut rotated = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).round();
            let sx = (sin * dy + cos * dx + cx).round();
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                rotated[r * w + c] = px[sy as usize * w + sx as usize];
            }
        }
    }
    px = rotated;

    let mut cropped = vec![0.0; h * w];
    for r in 0..h {
        let sy = (oy + (r as f64 + 0.5) * side_y / h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..w {
            let sx = (ox + (c as f64 + 0.5) * side_x / w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(w - 1);
            let top = px[y0 * w + x0] * (1.0 - fx) + px[y0 * w + x1] * fx;
            let bottom = px[y1 * w + x0] * (1.0 - fx) + px[y1 * w + x1] * fx;
            cropped[r * w + c] = top * (1.0 - fy) + bottom * fy;
        }
    }

    for p in &mut cropped {
        *p = p.clamp(0.0, 1.0).powf(gamma);
    }
    let mean = cropped.iter().sum::<f64>() / cropped.len() as f64;
    for p in &mut cropped {
        *p = ((*p - mean) * contrast + mean + shift).clamp(0.0, 1.0);
    }
    ImageSample { height: h, width: w, pixels: cropped, label: image.label }
}

/// Bounded FIFO of key features.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    entries: VecDeque<FeatureVector>,
    capacity: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Self {
        Self { entries: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends keys, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, keys: impl IntoIterator<Item = FeatureVector>) {
        for k in keys {
            if self.capacity == 0 {
                return;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(k);
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Oldest first.
    pub fn as_slice(&mut self) -> &[FeatureVector] {
        self.entries.make_contiguous()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureVector> {
        self.entries.iter()
    }
}

/// `θ_d ← m·θ_d + (1 − m)·θ_q`.
pub fn momentum_update(theta_d: &EncoderParams, theta_q: &EncoderParams, m: f64) -> Result<EncoderParams> {
    let mut out = theta_d.clone();
    momentum_update_in_place(&mut out, theta_q, m)?;
    Ok(out)
}

pub fn momentum_update_in_place(theta_d: &mut EncoderParams, theta_q: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Argument(format!("momentum coefficient {m} outside [0, 1)")));
    }
    theta_d.check_same_shape(theta_q)?;
    for (d, q) in theta_d.values_mut().iter_mut().zip(theta_q.values()) {
        *d = m * *d + (1.0 - m) * q;
    }
    Ok(())
}

/// Per-step optimisation constants for one local epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalHyperparams {
    pub batch_size: usize,
    pub temperature: f64,
    pub key_momentum: f64,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
}

/// Negatives beyond the dictionary.
#[derive(Debug, Clone, Default)]
pub enum SyntheticNegatives {
    #[default]
    None,
    /// The same vectors for every minibatch.
    Fixed(Vec<FeatureVector>),
    /// Fresh draws for every minibatch: `per_source` from each Gaussian.
    Resampled { sources: Vec<GaussianSampler>, per_source: usize },
}

impl SyntheticNegatives {
    pub fn count(&self) -> usize {
        match self {
            Self::None => 0,
            Self::Fixed(v) => v.len(),
            Self::Resampled { sources, per_source } => sources.len() * per_source,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<FeatureVector> {
        match self {
            Self::None => Vec::new(),
            Self::Fixed(v) => v.clone(),
            Self::Resampled { sources, per_source } => sources
                .iter()
                .flat_map(|s| (0..*per_source).map(|_| s.sample_feature(rng)).collect::<Vec<_>>())
                .collect(),
        }
    }
}

/// A node's MoCo state: query and key encoders, dictionary, SGD velocity and
/// its two random streams (views/shuffling and synthetic draws).
#[derive(Debug, Clone)]
pub struct NodeTrainState {
    pub theta_q: EncoderParams,
    pub theta_d: EncoderParams,
    pub queue: NegativeQueue,
    pub velocity: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub synthetic_rng: ChaCha8Rng,
}

impl NodeTrainState {
    pub fn new(theta: EncoderParams, queue_size: usize, rng: ChaCha8Rng, synthetic_rng: ChaCha8Rng) -> Self {
        Self {
            velocity: vec![0.0; theta.len()],
            theta_d: theta.clone(),
            theta_q: theta,
            queue: NegativeQueue::new(queue_size),
            rng,
            synthetic_rng,
        }
    }

    /// Replaces both encoders with the server model and starts a fresh
    /// dictionary and optimizer.
    pub fn synchronize(&mut self, theta: &EncoderParams, rng: ChaCha8Rng, synthetic_rng: ChaCha8Rng) {
        self.theta_q = theta.clone();
        self.theta_d = theta.clone();
        self.queue.clear();
        self.velocity = vec![0.0; theta.len()];
        self.rng = rng;
        self.synthetic_rng = synthetic_rng;
    }
}

/// Losses seen during a local epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalUpdateStats {
    pub losses: Vec<f64>,
}

impl LocalUpdateStats {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// One epoch of MoCo over `shard`.
///
/// For each minibatch: two views per image, queries from `θ_q` on the first
/// view and keys from `θ_d` on the second, InfoNCE against the dictionary
/// plus synthetic negatives, an SGD-with-momentum step on `θ_q`, the momentum
/// update of `θ_d`, then the keys are enqueued.
pub fn local_update(
    state: &mut NodeTrainState,
    shard: &[ImageSample],
    synthetic: &SyntheticNegatives,
    hp: &LocalHyperparams,
) -> Result<LocalUpdateStats> {
    local_update_with(state, shard, synthetic, hp, &AugmentConfig::default())
}

pub fn local_update_with(
    state: &mut NodeTrainState,
    shard: &[ImageSample],
    synthetic: &SyntheticNegatives,
    hp: &LocalHyperparams,
    augment_cfg: &AugmentConfig,
) -> Result<LocalUpdateStats> {
    if shard.is_empty() {
        return Err(Error::Argument("empty dataset shard".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..shard.len()).collect();
    order.shuffle(&mut state.rng);

    let mut stats = LocalUpdateStats::default();
    for batch in order.chunks(hp.batch_size) {
        let mut queries = Vec::with_capacity(batch.len());
        let mut key_views = Vec::with_capacity(batch.len());
        for &i in batch {
            queries.push(augment_with(&shard[i], augment_cfg, &mut state.rng));
            key_views.push(augment_with(&shard[i], augment_cfg, &mut state.rng));
        }
        let keys = key_views.iter().map(|v| forward(&state.theta_d, v)).collect::<Result<Vec<_>>>()?;
        let extra = synthetic.draw(&mut state.synthetic_rng);

        let out = loss_and_grad(&state.theta_q, &queries, &keys, state.queue.as_slice(), &extra, hp.temperature)?;
        stats.losses.push(out.loss);

        for ((theta, v), g) in state.theta_q.values_mut().iter_mut().zip(&mut state.velocity).zip(&out.grad) {
            let g = g + hp.weight_decay * *theta;
            *v = hp.sgd_momentum * *v + g;
            *theta -= hp.lr * *v;
        }
        momentum_update_in_place(&mut state.theta_d, &state.theta_q, hp.key_momentum)?;
        state.queue.enqueue(keys);
    }
    Ok(stats)
}
