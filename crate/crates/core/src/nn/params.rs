use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// One dense layer: `rows` outputs, `cols` inputs, optional bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn new(rows: usize, cols: usize, has_bias: bool) -> Self {
        Self { rows, cols, has_bias }
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.cols + if self.has_bias { self.rows } else { 0 }
    }
}

/// Shapes of an MLP `input → hidden[0] → … → feature_dim`, all with bias.
pub fn mlp_shapes(input: usize, hidden: &[usize], feature_dim: usize) -> Vec<LayerShape> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(feature_dim);
    dims.windows(2).map(|w| LayerShape::new(w[1], w[0], true)).collect()
}

fn validate_shapes(shapes: &[LayerShape]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    for (i, s) in shapes.iter().enumerate() {
        if s.rows == 0 || s.cols == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension ({}x{})", s.rows, s.cols)));
        }
        if i > 0 && shapes[i - 1].rows != s.cols {
            return Err(Error::Config(format!(
                "layer {i} expects {} inputs but layer {} emits {}",
                s.cols,
                i - 1,
                shapes[i - 1].rows
            )));
        }
    }
    Ok(())
}

/// Flat parameter vector plus the layer manifest that gives it structure.
///
/// Layout per layer: weights row-major (`rows × cols`), then the bias if
/// present. Parameters with equal manifests combine element-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    shapes: Vec<LayerShape>,
    values: Vec<f64>,
}

/// Borrowed view of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub shape: LayerShape,
    pub weights: &'a [f64],
    pub bias: Option<&'a [f64]>,
}

impl EncoderParams {
    pub fn new(shapes: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        validate_shapes(&shapes)?;
        let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
        if values.len() != expected {
            return Err(Error::Shape(format!("manifest implies {expected} values, got {}", values.len())));
        }
        Ok(Self { shapes, values })
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Result<Self> {
        let n = shapes.iter().map(LayerShape::param_count).sum();
        Self::new(shapes, vec![0.0; n])
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].cols
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].rows
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerView<'_>> {
        let mut offset = 0;
        self.shapes.iter().map(move |&shape| {
            let w = shape.rows * shape.cols;
            let weights = &self.values[offset..offset + w];
            offset += w;
            let bias = if shape.has_bias {
                let b = &self.values[offset..offset + shape.rows];
                offset += shape.rows;
                Some(b)
            } else {
                None
            };
            LayerView { shape, weights, bias }
        })
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.shapes == other.shapes
    }

    pub fn check_same_shape(&self, other: &EncoderParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter manifests differ".into()))
        }
    }

    /// `self ← self + alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &EncoderParams) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// Little-endian bytes of the flat values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 of the little-endian value bytes, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_le_bytes()))
    }
}

/// Uniform `[-s, s]` with `s = 1/√fan_in` for weights and biases alike.
pub fn init_params(shapes: &[LayerShape], seed: u64) -> Result<EncoderParams> {
    validate_shapes(shapes)?;
    let mut rng = stream_rng(seed, Stream::Init, 0, 0);
    let mut values = Vec::with_capacity(shapes.iter().map(LayerShape::param_count).sum());
    for s in shapes {
        let bound = 1.0 / (s.cols as f64).sqrt();
        for _ in 0..s.param_count() {
            values.push(rng.random_range(-bound..=bound));
        }
    }
    EncoderParams::new(shapes.to_vec(), values)
}
