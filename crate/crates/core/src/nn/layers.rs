//! Convolution, activation, pooling and dense layers with their backward
//! passes.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matvec_acc, matvec_t_acc, outer_acc, Tensor};
use super::NnError;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Valid 1-D cross-correlation over the time axis.
///
/// `z[t, f] = b[f] + Σ_c Σ_j w[f, c, j] · x[t + j, c]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dLayer {
    /// `[filters, in_channels, kernel]`
    pub w: Tensor,
    /// `[filters]`
    pub b: Tensor,
}

impl Conv1dLayer {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self, NnError> {
        if w.shape().len() != 3 || w.shape()[0] == 0 || w.shape()[2] == 0 {
            return Err(NnError::InvalidConfig("conv weights must be [filters >= 1, channels, kernel >= 1]"));
        }
        b.expect_shape("conv bias", &[w.shape()[0]])?;
        Ok(Conv1dLayer { w, b })
    }

    pub fn init(filters: usize, in_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Conv1dLayer {
            w: glorot(&[filters, in_channels, kernel], in_channels * kernel, filters * kernel, rng),
            b: Tensor::zeros(&[filters]),
        }
    }

    pub fn filters(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Conv1dLayer {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }
}

/// Forward pass of [`Conv1dLayer`] on a `[time, channels]` input.
pub fn conv1d_forward(layer: &Conv1dLayer, x: &Tensor) -> Result<Tensor, NnError> {
    let (filters, channels, kernel) = (layer.filters(), layer.in_channels(), layer.kernel());
    if x.shape().len() != 2 || x.cols() != channels {
        return Err(NnError::ShapeMismatch {
            what: "conv input",
            expected: vec![x.shape().first().copied().unwrap_or(0), channels],
            got: x.shape().to_vec(),
        });
    }
    let time = x.rows();
    if time < kernel {
        return Err(NnError::ShapeMismatch {
            what: "conv input length",
            expected: vec![kernel],
            got: vec![time],
        });
    }
    let out_len = time - kernel + 1;
    let w = layer.w.data();
    let mut out = Tensor::zeros(&[out_len, filters]);
    for t in 0..out_len {
        let row = out.row_mut(t);
        for f in 0..filters {
            let mut acc = layer.b.data()[f];
            for c in 0..channels {
                let base = (f * channels + c) * kernel;
                for j in 0..kernel {
                    acc += w[base + j] * x.data()[(t + j) * channels + c];
                }
            }
            row[f] = acc;
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients of a convolution given `d_out`.
pub(crate) fn conv1d_backward(layer: &Conv1dLayer, x: &Tensor, d_out: &Tensor, grad: &mut Conv1dLayer) {
    let (filters, channels, kernel) = (layer.filters(), layer.in_channels(), layer.kernel());
    let gw = grad.w.data_mut();
    for t in 0..d_out.rows() {
        let d = d_out.row(t);
        for f in 0..filters {
            let df = d[f];
            if df == 0.0 {
                continue;
            }
            for c in 0..channels {
                let base = (f * channels + c) * kernel;
                for j in 0..kernel {
                    gw[base + j] += df * x.data()[(t + j) * channels + c];
                }
            }
        }
    }
    let gb = grad.b.data_mut();
    for t in 0..d_out.rows() {
        for (g, &d) in gb.iter_mut().zip(d_out.row(t)) {
            *g += d;
        }
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Derivative of ReLU, with the subgradient at 0 taken as 0.
pub fn relu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Non-overlapping max pooling over time. A trailing partial window is kept.
///
/// Returns the pooled tensor and, per output cell, the input row that won.
pub fn max_pool1d(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>), NnError> {
    if window == 0 {
        return Err(NnError::InvalidConfig("pooling window must be >= 1"));
    }
    let (time, channels) = (x.rows(), x.cols());
    let out_len = time.div_ceil(window);
    let mut out = Tensor::zeros(&[out_len, channels]);
    let mut arg = vec![0usize; out_len * channels];
    for o in 0..out_len {
        let start = o * window;
        let end = (start + window).min(time);
        for c in 0..channels {
            let mut best = start;
            for t in start + 1..end {
                if x.data()[t * channels + c] > x.data()[best * channels + c] {
                    best = t;
                }
            }
            out.data_mut()[o * channels + c] = x.data()[best * channels + c];
            arg[o * channels + c] = best;
        }
    }
    Ok((out, arg))
}

pub(crate) fn max_pool1d_backward(d_out: &Tensor, arg: &[usize], input_rows: usize) -> Tensor {
    let channels = d_out.cols();
    let mut d_in = Tensor::zeros(&[input_rows, channels]);
    for (i, (&d, &src)) in d_out.data().iter().zip(arg).enumerate() {
        let c = i % channels;
        d_in.data_mut()[src * channels + c] += d;
    }
    d_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

/// Fully connected layer `act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[outputs, inputs]`
    pub w: Tensor,
    /// `[outputs]`
    pub b: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(w: Tensor, b: Tensor, activation: Activation) -> Result<Self, NnError> {
        if w.shape().len() != 2 {
            return Err(NnError::InvalidConfig("dense weights must be 2-D"));
        }
        b.expect_shape("dense bias", &[w.rows()])?;
        Ok(DenseLayer { w, b, activation })
    }

    /// Linear layer with Glorot weights and zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        DenseLayer {
            w: glorot(&[outputs, inputs], inputs, outputs, rng),
            b: Tensor::zeros(&[outputs]),
            activation: Activation::Linear,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    pub(crate) fn zeros_like(&self) -> Self {
        DenseLayer {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
            activation: self.activation,
        }
    }
}

pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>, NnError> {
    if x.len() != layer.inputs() {
        return Err(NnError::ShapeMismatch {
            what: "dense input",
            expected: vec![layer.inputs()],
            got: vec![x.len()],
        });
    }
    let mut out = layer.b.data().to_vec();
    matvec_acc(layer.w.data(), layer.inputs(), x, &mut out);
    for v in out.iter_mut() {
        *v = layer.activation.apply(*v);
    }
    Ok(out)
}

/// Backward pass of a linear dense layer: accumulates gradients and returns
/// the gradient with respect to the input.
pub(crate) fn dense_backward_linear(layer: &DenseLayer, x: &[f64], d_out: &[f64], grad: &mut DenseLayer) -> Vec<f64> {
    debug_assert_eq!(layer.activation, Activation::Linear);
    outer_acc(grad.w.data_mut(), d_out, x);
    for (g, &d) in grad.b.data_mut().iter_mut().zip(d_out) {
        *g += d;
    }
    let mut d_in = vec![0.0; layer.inputs()];
    matvec_t_acc(layer.w.data(), layer.inputs(), d_out, &mut d_in);
    d_in
}
