//! Dense encoder math: flat parameter vectors, a ReLU MLP whose head is
//! ReLU followed by L2 normalization, and exact reverse-mode gradients.

mod encoder;
mod loss;
mod params;

pub use encoder::{backward, backward_backbone, forward, forward_pixels, forward_traced, ForwardTrace};
pub use loss::{info_nce_from_features, loss_and_grad, ContrastiveLoss};
pub use params::{init_params, mlp_shapes, EncoderParams, LayerShape, LayerView};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|‖z‖₂ − 1|` accepted by [`FeatureVector::new`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Non-negative embedding with unit L2 norm, or exactly the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Validates the head invariants.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Argument("feature entries must be non-negative".into()));
        }
        let norm = l2_norm(&entries);
        if norm != 0.0 && (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Argument(format!("feature norm {norm} is neither 0 nor 1")));
        }
        Ok(Self(entries))
    }

    /// Applies the head: ReLU then L2 normalization. The zero vector maps to
    /// itself.
    pub fn from_activations(mut h: Vec<f64>) -> Self {
        for v in &mut h {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let norm = l2_norm(&h);
        if norm > 0.0 {
            for v in &mut h {
                *v /= norm;
            }
        }
        Self(h)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Grayscale image with pixels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// Class id; only evaluation datasets keep it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Argument("pixels must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, pixels, label: None })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width], label: None }
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn without_label(mut self) -> Self {
        self.label = None;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_of_zero_is_zero() {
        let z = FeatureVector::from_activations(vec![0.0, -1.0, -0.5]);
        assert!(z.is_zero());
    }

    #[test]
    fn head_clamps_and_normalizes() {
        let z = FeatureVector::from_activations(vec![3.0, -2.0, 4.0]);
        assert_eq!(z.as_slice(), &[0.6, 0.0, 0.8]);
    }

    #[test]
    fn feature_vector_validation() {
        assert!(FeatureVector::new(vec![0.6, 0.8]).is_ok());
        assert!(FeatureVector::new(vec![0.0, 0.0]).is_ok());
        assert!(FeatureVector::new(vec![0.5, 0.5]).is_err());
        assert!(FeatureVector::new(vec![-0.6, 0.8]).is_err());
    }

    #[test]
    fn image_validation() {
        assert!(ImageSample::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageSample::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageSample::new(1, 2, vec![0.0, 1.0]).is_ok());
    }
}
