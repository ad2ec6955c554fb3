use super::{EncoderParams, FeatureVector, ImageSample};
use crate::error::{Error, Result};

/// Activations recorded by a forward pass, enough to run [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` is the post-ReLU
    /// output of layer `l`.
    activations: Vec<Vec<f64>>,
    norm: f64,
    output: FeatureVector,
}

impl ForwardTrace {
    pub fn output(&self) -> &FeatureVector {
        &self.output
    }

    pub fn into_output(self) -> FeatureVector {
        self.output
    }

    /// Post-ReLU output of the last hidden layer; the input itself for a
    /// single-layer encoder.
    pub fn backbone(&self) -> &[f64] {
        &self.activations[self.activations.len() - 2]
    }
}

pub fn forward(params: &EncoderParams, image: &ImageSample) -> Result<FeatureVector> {
    forward_pixels(params, &image.pixels)
}

pub fn forward_pixels(params: &EncoderParams, input: &[f64]) -> Result<FeatureVector> {
    forward_traced(params, input).map(ForwardTrace::into_output)
}

/// Every layer is affine followed by ReLU; the last one is then
/// L2-normalized.
pub fn forward_traced(params: &EncoderParams, input: &[f64]) -> Result<ForwardTrace> {
    if input.len() != params.input_dim() {
        return Err(Error::Shape(format!("input has {} values, encoder expects {}", input.len(), params.input_dim())));
    }
    let mut activations = Vec::with_capacity(params.shapes().len() + 1);
    activations.push(input.to_vec());
    for layer in params.layers() {
        let x = activations.last().expect("input pushed");
        let cols = layer.shape.cols;
        let mut out = Vec::with_capacity(layer.shape.rows);
        for r in 0..layer.shape.rows {
            let row = &layer.weights[r * cols..(r + 1) * cols];
            let mut acc = layer.bias.map_or(0.0, |b| b[r]);
            acc += super::dot(row, x);
            out.push(if acc > 0.0 { acc } else { 0.0 });
        }
        activations.push(out);
    }
    let h = activations.last().expect("at least one layer");
    let norm = super::l2_norm(h);
    let output = FeatureVector::from_activations(h.clone());
    Ok(ForwardTrace { activations, norm, output })
}

/// Accumulates `∂L/∂θ` into `grad` given `∂L/∂z` for the traced sample.
pub fn backward(params: &EncoderParams, trace: &ForwardTrace, grad_output: &[f64], grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), params.len());
    debug_assert_eq!(grad_output.len(), params.feature_dim());
    if trace.norm == 0.0 {
        return;
    }
    // Through z = h/‖h‖: dh = (dz − z (z·dz)) / ‖h‖.
    let z = trace.output.as_slice();
    let proj = super::dot(z, grad_output);
    let delta: Vec<f64> = z.iter().zip(grad_output).map(|(zi, gi)| (gi - zi * proj) / trace.norm).collect();

    backprop(params, trace, params.shapes().len(), delta, grad);
}

/// Accumulates `∂L/∂θ` for the layers below the contrastive head given
/// `∂L/∂b` for the backbone activations `b` (see [`ForwardTrace::backbone`]).
/// Head parameters receive no gradient.
pub fn backward_backbone(params: &EncoderParams, trace: &ForwardTrace, grad_backbone: &[f64], grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), params.len());
    let top = params.shapes().len() - 1;
    backprop(params, trace, top, grad_backbone.to_vec(), grad);
}

/// Propagates `delta = ∂L/∂activations[top]` down through layers
/// `top − 1, …, 0`.
fn backprop(params: &EncoderParams, trace: &ForwardTrace, top: usize, mut delta: Vec<f64>, grad: &mut [f64]) {
    let layers: Vec<_> = params.layers().collect();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for l in &layers {
        offsets.push(offset);
        offset += l.shape.param_count();
    }

    for (idx, layer) in layers.iter().enumerate().take(top).rev() {
        let out = &trace.activations[idx + 1];
        let input = &trace.activations[idx];
        for (d, a) in delta.iter_mut().zip(out) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let (rows, cols) = (layer.shape.rows, layer.shape.cols);
        let base = offsets[idx];
        for r in 0..rows {
            let d = delta[r];
            if d == 0.0 {
                continue;
            }
            let g = &mut grad[base + r * cols..base + (r + 1) * cols];
            for (gi, xi) in g.iter_mut().zip(input) {
                *gi += d * xi;
            }
        }
        if layer.shape.has_bias {
            let b = base + rows * cols;
            for r in 0..rows {
                grad[b + r] += delta[r];
            }
        }
        if idx > 0 {
            let mut prev = vec![0.0; cols];
            for r in 0..rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * cols..(r + 1) * cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
    }
}
