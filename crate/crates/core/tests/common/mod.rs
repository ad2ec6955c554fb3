//! Reference implementations written directly from the definitions, kept
//! separate from the library code they check.

#![allow(dead_code)]

use fedmoco_core::nn::LayerShape;

/// Plain-loop encoder: affine + ReLU per layer, then L2 normalization.
pub fn encoder(shapes: &[LayerShape], values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut at = 0;
    for s in shapes {
        let w = &values[at..at + s.rows * s.cols];
        at += s.rows * s.cols;
        let b = if s.has_bias {
            let b = &values[at..at + s.rows];
            at += s.rows;
            Some(b)
        } else {
            None
        };
        let mut next = vec![0.0; s.rows];
        for r in 0..s.rows {
            let mut acc = b.map_or(0.0, |b| b[r]);
            for c in 0..s.cols {
                acc += w[r * s.cols + c] * h[c];
            }
            next[r] = acc.max(0.0);
        }
        h = next;
    }
    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// `−log(e^{q·k₀/τ} / Σ_all e^{q·k/τ})` evaluated naively.
pub fn info_nce(q: &[f64], positive: &[f64], others: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = (dot(q, positive) / tau).exp();
    let den = pos + others.iter().map(|k| (dot(q, k) / tau).exp()).sum::<f64>();
    -(pos / den).ln()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Average ranks by counting: rank = #smaller + (#equal + 1) / 2.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Spearman from the definition: the rank-difference formula when there are
/// no ties, Pearson of average ranks otherwise.
pub fn spearman(u: &[f64], v: &[f64]) -> f64 {
    let (ru, rv) = (average_ranks(u), average_ranks(v));
    let tied = |r: &[f64]| {
        r.iter().any(|x| x.fract() != 0.0) || {
            let mut s = r.to_vec();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| w[0] == w[1])
        }
    };
    if tied(&ru) || tied(&rv) {
        return pearson(&ru, &rv);
    }
    let n = u.len() as f64;
    let d2: f64 = ru.iter().zip(&rv).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Dissimilarity `1 − ρ` between every pair, lower triangle row by row.
pub fn rdm_lower(features: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 1..features.len() {
        for j in 0..i {
            out.push(1.0 - pearson(&features[i], &features[j]));
        }
    }
    out
}

use fedmoco_core::nn::{init_params, loss_and_grad, mlp_shapes, FeatureVector, ImageSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_unit(rng: &mut impl Rng, d: usize) -> FeatureVector {
    FeatureVector::from_activations((0..d).map(|_| rng.random_range(-0.2..1.0)).collect())
}

pub fn random_image(rng: &mut impl Rng, side: usize) -> ImageSample {
    ImageSample::new(side, side, (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Floor on the denominator of the relative error, so coordinates whose
/// gradient is near zero are judged on absolute error.
pub const GRAD_REL_FLOOR: f64 = 1e-5;

/// Largest relative error between the analytic gradient of the batch loss
/// with queue and synthetic negatives and a central difference of the
/// reference loss, over `coords` random coordinates of one random encoder.
pub fn gradient_check(seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = mlp_shapes(256, &[64], 32);
    let params = init_params(&shapes, seed).unwrap();
    let tau = 0.2;
    let queries: Vec<ImageSample> = (0..3).map(|_| random_image(&mut rng, 16)).collect();
    let positives: Vec<FeatureVector> = (0..3).map(|_| random_unit(&mut rng, 32)).collect();
    let negatives: Vec<FeatureVector> = (0..10).map(|_| random_unit(&mut rng, 32)).collect();
    let synthetic: Vec<FeatureVector> = (0..4).map(|_| random_unit(&mut rng, 32)).collect();
    let analytic = loss_and_grad(&params, &queries, &positives, &negatives, &synthetic, tau).unwrap().grad;

    let others: Vec<Vec<f64>> = negatives.iter().chain(&synthetic).map(|k| k.as_slice().to_vec()).collect();
    let reference_loss = |values: &[f64]| -> f64 {
        queries
            .iter()
            .zip(&positives)
            .map(|(x, k)| info_nce(&encoder(&shapes, values, &x.pixels), k.as_slice(), &others, tau))
            .sum::<f64>()
            / queries.len() as f64
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut values = params.values().to_vec();
    for _ in 0..coords {
        let i = rng.random_range(0..values.len());
        let v = values[i];
        values[i] = v + h;
        let up = reference_loss(&values);
        values[i] = v - h;
        let down = reference_loss(&values);
        values[i] = v;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// A run small enough for debug-mode tests: 3 nodes of 40 8×8 images,
/// 5 rounds with 2 of warm-up.
#[allow(dead_code)]
pub fn tiny_config() -> fedmoco_core::ExperimentConfig {
    let mut cfg = fedmoco_core::ExperimentConfig::desk();
    cfg.federation.rounds = 5;
    cfg.federation.warmup_rounds = 2;
    cfg.federation.probe_size = 12;
    cfg.contrastive.queue_size = 16;
    cfg.contrastive.batch_size = 8;
    cfg.contrastive.lr_milestones.clear();
    cfg.encoder.hidden = vec![12];
    cfg.encoder.feature_dim = 6;
    cfg.data.samples_per_domain = 40;
    cfg.data.image_size = 8;
    cfg.data.eval_size = 60;
    cfg
}
