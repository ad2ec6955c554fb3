use super::{backward, forward_traced, EncoderParams, FeatureVector, ImageSample};
use crate::error::{Error, Result};

/// Loss value plus its gradient with respect to the query encoder.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Per-query InfoNCE with optional synthetic negatives in the denominator:
///
/// `L = −log( exp(q·k₀/τ) / (Σ_queue exp(q·kᵢ/τ) + Σ_synth exp(q·z̃ⱼ/τ) + exp(q·k₀/τ)) )`
///
/// Returns the loss and `∂L/∂q`.
pub fn info_nce_from_features(
    query: &FeatureVector,
    positive: &FeatureVector,
    negatives: &[FeatureVector],
    synthetic: &[FeatureVector],
    temperature: f64,
) -> (f64, Vec<f64>) {
    let q = query.as_slice();
    let mut keys: Vec<&[f64]> = Vec::with_capacity(1 + negatives.len() + synthetic.len());
    keys.push(positive.as_slice());
    keys.extend(negatives.iter().map(FeatureVector::as_slice));
    keys.extend(synthetic.iter().map(FeatureVector::as_slice));

    let logits: Vec<f64> = keys.iter().map(|k| super::dot(q, k) / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let loss = max + total.ln() - logits[0];

    let mut grad = vec![0.0; q.len()];
    for (k, w) in keys.iter().zip(&weights) {
        let p = w / total;
        for (g, kv) in grad.iter_mut().zip(k.iter()) {
            *g += p * kv;
        }
    }
    for (g, kv) in grad.iter_mut().zip(keys[0]) {
        *g = (*g - kv) / temperature;
    }
    (loss, grad)
}

/// Mean contrastive loss over a query batch and its exact gradient w.r.t.
/// `params_q`.
///
/// `positives[i]` is the key for `queries[i]`. Keys, queue negatives and
/// synthetic negatives are constants: no gradient flows into them.
pub fn loss_and_grad(
    params_q: &EncoderParams,
    queries: &[ImageSample],
    positives: &[FeatureVector],
    negatives: &[FeatureVector],
    synthetic: &[FeatureVector],
    temperature: f64,
) -> Result<ContrastiveLoss> {
    if queries.is_empty() {
        return Err(Error::Argument("empty query batch".into()));
    }
    if queries.len() != positives.len() {
        return Err(Error::Shape(format!("{} queries but {} positives", queries.len(), positives.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
    }
    let d = params_q.feature_dim();
    if let Some(bad) = positives.iter().chain(negatives).chain(synthetic).find(|k| k.dim() != d) {
        return Err(Error::Shape(format!("key of dim {} against feature dim {d}", bad.dim())));
    }

    let scale = 1.0 / queries.len() as f64;
    let mut grad = vec![0.0; params_q.len()];
    let mut loss = 0.0;
    for (image, positive) in queries.iter().zip(positives) {
        let trace = forward_traced(params_q, &image.pixels)?;
        let (l, mut dz) = info_nce_from_features(trace.output(), positive, negatives, synthetic, temperature);
        loss += l * scale;
        for g in &mut dz {
            *g *= scale;
        }
        backward(params_q, &trace, &dz, &mut grad);
    }
    Ok(ContrastiveLoss { loss, grad })
}
