//! Self-adaptive aggregation via representational similarity analysis.
//!
//! A node's score `r_k` is the Spearman correlation between the lower
//! triangles of two representation dissimilarity matrices over the same
//! probe images: one under the round's starting global encoder, one under
//! the node's locally updated encoder. Nodes whose geometry moved more
//! (smaller `r_k`) get more weight: `a_k ∝ 1 − r_k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, EncoderParams, FeatureVector, ImageSample};

/// Symmetric `n × n` dissimilarity matrix with entries `1 − ρ_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    n: usize,
    values: Vec<f64>,
}

impl Rdm {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Strict lower triangle, row by row: `(1,0), (2,0), (2,1), …`.
    pub fn lower_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 1..self.n {
            out.extend_from_slice(&self.values[i * self.n..i * self.n + i]);
        }
        out
    }
}

/// Pearson correlation. A constant argument yields 0.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ca, na) = center(a);
    let (cb, nb) = center(b);
    correlation_of_centered(&ca, na, &cb, nb)
}

/// Centered copy and its sum of squares; the latter is 0 for constant input.
fn center(v: &[f64]) -> (Vec<f64>, f64) {
    if v.iter().all(|x| *x == v[0]) {
        return (vec![0.0; v.len()], 0.0);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss = crate::nn::dot(&c, &c);
    (c, ss)
}

// sqrt(ss·ss) == ss exactly, so a vector correlates to exactly 1 with itself.
fn correlation_of_centered(a: &[f64], ssa: f64, b: &[f64], ssb: f64) -> f64 {
    if ssa == 0.0 || ssb == 0.0 {
        return 0.0;
    }
    (crate::nn::dot(a, b) / (ssa * ssb).sqrt()).clamp(-1.0, 1.0)
}

pub fn compute_rdm(features: &[FeatureVector]) -> Result<Rdm> {
    let n = features.len();
    if n < 3 {
        return Err(Error::Argument(format!("RDM needs at least 3 samples, got {n}")));
    }
    let d = features[0].dim();
    if d < 2 {
        return Err(Error::Argument("RDM needs feature dimension >= 2".into()));
    }
    if features.iter().any(|f| f.dim() != d) {
        return Err(Error::Shape("features of mixed dimension".into()));
    }
    let centered: Vec<(Vec<f64>, f64)> = features.iter().map(|f| center(f.as_slice())).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let rho = correlation_of_centered(&centered[i].0, centered[i].1, &centered[j].0, centered[j].1);
            let v = 1.0 - rho;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(Rdm { n, values })
}

/// Average (fractional) ranks starting at 1, plus whether any tie occurred.
pub fn average_ranks(v: &[f64]) -> (Vec<f64>, bool) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut tied = false;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            tied = true;
        }
        // Positions start..end hold ranks start+1..=end; their mean:
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    (ranks, tied)
}

/// Spearman rank correlation.
///
/// Without ties this is `1 − 6Σd²/(n(n²−1))` evaluated in exact integer
/// arithmetic up to the final division. With ties, ranks are averaged and
/// the result is the Pearson correlation of the rank vectors, which agrees
/// with the closed form whenever no ties exist.
pub fn spearman(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", u.len(), v.len())));
    }
    let n = u.len();
    if n < 2 {
        return Err(Error::Argument("spearman needs at least 2 pairs".into()));
    }
    let (ru, tied_u) = average_ranks(u);
    let (rv, tied_v) = average_ranks(v);
    if !tied_u && !tied_v {
        let sum_sq: u128 = ru
            .iter()
            .zip(&rv)
            .map(|(a, b)| {
                let d = (*a as i64 - *b as i64).unsigned_abs() as u128;
                d * d
            })
            .sum();
        let n = n as u128;
        let r = 1.0 - (6 * sum_sq) as f64 / (n * (n * n - 1)) as f64;
        return Ok(r.clamp(-1.0, 1.0));
    }
    Ok(pearson(&ru, &rv))
}

/// RSA score of a node: Spearman correlation of the lower-triangular RDM
/// entries under `theta_prev` and `theta_k` on the same probe images.
pub fn rsa_score(theta_prev: &EncoderParams, theta_k: &EncoderParams, probe: &[ImageSample]) -> Result<f64> {
    if probe.len() < 3 {
        return Err(Error::Argument(format!("RSA probe needs at least 3 images, got {}", probe.len())));
    }
    let before = probe.iter().map(|x| forward(theta_prev, x)).collect::<Result<Vec<_>>>()?;
    let after = probe.iter().map(|x| forward(theta_k, x)).collect::<Result<Vec<_>>>()?;
    let a = compute_rdm(&before)?.lower_triangle();
    let b = compute_rdm(&after)?.lower_triangle();
    spearman(&a, &b)
}

/// Indices of `min(size, len)` probe images drawn without replacement.
pub fn sample_probe<R: Rng + ?Sized>(len: usize, size: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, len, size.min(len)).into_vec()
}

/// Aggregation weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Argument("no aggregation weights".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Argument("aggregation weights must be non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("aggregation weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `a_k = (1 − r_k) / Σ_j (1 − r_j)`, uniform when every `r_j = 1`.
pub fn self_adaptive_weights(r: &[f64]) -> Result<AggregationWeights> {
    if r.is_empty() {
        return Err(Error::Argument("no RSA scores".into()));
    }
    if let Some(bad) = r.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("RSA score {bad} outside [-1, 1]")));
    }
    let total: f64 = r.iter().map(|v| 1.0 - v).sum();
    if total == 0.0 {
        return Ok(AggregationWeights::uniform(r.len()));
    }
    Ok(AggregationWeights(r.iter().map(|v| (1.0 - v) / total).collect()))
}

/// FedAvg weights `a_k = n_k / Σ_j n_j`.
pub fn fedavg_weights(counts: &[usize]) -> Result<AggregationWeights> {
    if counts.is_empty() {
        return Err(Error::Argument("no node sample counts".into()));
    }
    if counts.contains(&0) {
        return Err(Error::Argument("node sample counts must be positive".into()));
    }
    let total: usize = counts.iter().sum();
    Ok(AggregationWeights(counts.iter().map(|&n| n as f64 / total as f64).collect()))
}

/// `θ₀ = Σ_k a_k θ_k`, accumulated in node order.
pub fn aggregate(thetas: &[EncoderParams], weights: &AggregationWeights) -> Result<EncoderParams> {
    if thetas.is_empty() || thetas.len() != weights.len() {
        return Err(Error::Shape(format!("{} parameter sets for {} weights", thetas.len(), weights.len())));
    }
    let mut out = EncoderParams::zeros(thetas[0].shapes().to_vec())?;
    for (theta, &a) in thetas.iter().zip(weights.as_slice()) {
        out.axpy(a, theta)?;
    }
    Ok(out)
}
