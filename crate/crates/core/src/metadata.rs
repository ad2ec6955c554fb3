//! Metadata transfer: Box-Cox-space Gaussian models of node features and
//! the synthetic negatives drawn from them.
//!
//! Features are non-negative and unit-norm. Each node transforms them
//! element-wise with Box-Cox, summarizes them as `(μ, Σ)`, and other nodes
//! sample `ỹ ~ N(μ, Σ)`, map back with the inverse transform and re-apply the
//! head normalization to obtain extra negatives for the contrastive loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FeatureVector;

/// Jitter added to the covariance diagonal. Unit-norm features live on a
/// sphere, so the raw covariance is rank-deficient.
pub const DEFAULT_JITTER: f64 = 1e-8;

pub fn boxcox(x: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("log Box-Cox needs x > 0, got {x}")));
        }
        Ok(x.ln())
    } else {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!("Box-Cox needs x >= 0, got {x}")));
        }
        Ok((x.powf(lambda) - 1.0) / lambda)
    }
}

/// Inverse Box-Cox. Outside the image of the forward map (`λy + 1 < 0`)
/// the base is clamped to zero.
pub fn inv_boxcox(y: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        y.exp()
    } else {
        (lambda * y + 1.0).max(0.0).powf(1.0 / lambda)
    }
}

pub fn boxcox_features(z: &FeatureVector, lambda: f64) -> Result<Vec<f64>> {
    z.as_slice().iter().map(|&x| boxcox(x, lambda)).collect()
}

/// Per-node Gaussian summary `(μ_k, Σ_k)` in Box-Cox space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetadata {
    pub node_id: usize,
    pub round: usize,
    pub dim: usize,
    pub mu: Vec<f64>,
    /// Row-major `dim × dim`.
    pub sigma: Vec<f64>,
}

impl NodeMetadata {
    pub fn sigma_at(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.dim + j]
    }

    pub fn tagged(mut self, node_id: usize, round: usize) -> Self {
        self.node_id = node_id;
        self.round = round;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.dim || self.sigma.len() != self.dim * self.dim {
            return Err(Error::Shape(format!(
                "metadata dim {} with {} means and {} covariance entries",
                self.dim,
                self.mu.len(),
                self.sigma.len()
            )));
        }
        Ok(())
    }
}

/// Sample mean and unbiased covariance of the Box-Cox-transformed features,
/// with `jitter · I` added to the covariance.
pub fn compute_metadata(features: &[FeatureVector], lambda: f64, jitter: f64) -> Result<NodeMetadata> {
    if features.len() < 2 {
        return Err(Error::Argument(format!("metadata needs at least 2 feature vectors, got {}", features.len())));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::Shape("feature vectors of mixed dimension".into()));
    }
    let ys = features.iter().map(|f| boxcox_features(f, lambda)).collect::<Result<Vec<_>>>()?;
    let n = ys.len() as f64;
    let mut mu = vec![0.0; dim];
    for y in &ys {
        for (m, v) in mu.iter_mut().zip(y) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut sigma = vec![0.0; dim * dim];
    for y in &ys {
        let c: Vec<f64> = y.iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in i..dim {
                sigma[i * dim + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = sigma[i * dim + j] / (n - 1.0);
            sigma[i * dim + j] = v;
            sigma[j * dim + i] = v;
        }
        sigma[i * dim + i] += jitter;
    }
    Ok(NodeMetadata { node_id: 0, round: 0, dim, mu, sigma })
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
/// Pivots at or below `tol` produce a zero column instead of failing.
pub fn cholesky_psd(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    if a.len() != dim * dim {
        return Err(Error::Shape("cholesky input is not square".into()));
    }
    let scale = (0..dim).map(|i| a[i * dim + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-13;
    let mut l = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut s = a[j * dim + j];
        for k in 0..j {
            s -= l[j * dim + k] * l[j * dim + k];
        }
        if s < -1e-8 * scale.max(1.0) {
            return Err(Error::Domain(format!("matrix is not positive semi-definite (pivot {s})")));
        }
        if s <= tol {
            continue;
        }
        let d = s.sqrt();
        l[j * dim + j] = d;
        for i in j + 1..dim {
            let mut v = a[i * dim + j];
            for k in 0..j {
                v -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = v / d;
        }
    }
    Ok(l)
}

/// Gaussian over Box-Cox space with a precomputed Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    chol: Vec<f64>,
    lambda: f64,
    source: usize,
}

impl GaussianSampler {
    pub fn new(metadata: &NodeMetadata, lambda: f64) -> Result<Self> {
        metadata.validate()?;
        Ok(Self {
            mean: metadata.mu.clone(),
            chol: cholesky_psd(&metadata.sigma, metadata.dim)?,
            lambda,
            source: metadata.node_id,
        })
    }

    /// Node whose statistics this sampler models.
    pub fn source(&self) -> usize {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `ỹ = μ + L ε` with `ε ~ N(0, I)`.
    pub fn sample_boxcox<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut y = self.mean.clone();
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i + 1];
            y[i] += row.iter().zip(&eps).map(|(l, e)| l * e).sum::<f64>();
        }
        y
    }

    /// Synthetic negative: inverse Box-Cox of a draw, then ReLU + L2 head.
    pub fn sample_feature<R: Rng + ?Sized>(&self, rng: &mut R) -> FeatureVector {
        let y = self.sample_boxcox(rng);
        FeatureVector::from_activations(y.into_iter().map(|v| inv_boxcox(v, self.lambda)).collect())
    }
}

pub fn sample_synthetic<R: Rng + ?Sized>(
    metadata: &NodeMetadata,
    lambda: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<FeatureVector>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let sampler = GaussianSampler::new(metadata, lambda)?;
    Ok((0..count).map(|_| sampler.sample_feature(rng)).collect())
}

/// Number of synthetic negatives drawn from each other node, and in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuota {
    pub per_node: usize,
    pub total: usize,
}

/// `per_node = ⌊ηN/(K−1)⌋`, `total = (K−1)·per_node`; zero when `K = 1`.
pub fn synthetic_quota(queue_size: usize, eta: f64, nodes: usize) -> SyntheticQuota {
    if nodes < 2 || !(eta > 0.0) {
        return SyntheticQuota { per_node: 0, total: 0 };
    }
    let others = nodes - 1;
    // The small offset keeps products such as 0.29·100 from flooring to 28.
    let per_node = (eta * queue_size as f64 / others as f64 + 1e-9).floor() as usize;
    SyntheticQuota { per_node, total: per_node * others }
}
