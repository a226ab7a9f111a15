//! The capacity model: Conv1D → ReLU → max pool → LSTM → LSTM → linear head,
//! or, for the convolution-only variant, Conv1D → ReLU → max pool → flatten →
//! linear head.
//!
//! Dropout (inverted, train mode only) follows each LSTM, or the flattened
//! features in the convolution-only variant. The head reads the last hidden
//! state of the second LSTM.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv1d_backward, conv1d_forward, dense_backward_linear, dense_forward, max_pool1d, max_pool1d_backward, relu, relu_grad, Conv1dLayer,
    DenseLayer,
};
use super::lstm::{lstm_sequence, lstm_sequence_backward, GateCache, LstmLayer};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Convolution, pooling and a dense head without recurrent layers.
    EkfCnn,
    /// Convolution followed by two stacked LSTMs and a dense head.
    EkfCnnLstm,
}

impl ModelVariant {
    pub fn slug(self) -> &'static str {
        match self {
            ModelVariant::EkfCnn => "ekf-cnn",
            ModelVariant::EkfCnnLstm => "ekf-cnn-lstm",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        match s {
            "ekf-cnn" | "cnn" => Some(ModelVariant::EkfCnn),
            "ekf-cnn-lstm" | "cnn-lstm" => Some(ModelVariant::EkfCnnLstm),
            _ => None,
        }
    }
}

/// Layer sizes. The topology is fixed; only sizes vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub features: usize,
    pub window_len: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: [usize; 2],
}

impl Default for NetworkShape {
    /// 5 input features, one time step, 64 filters of width 1, 32 + 32 LSTM units.
    fn default() -> Self {
        NetworkShape {
            features: 5,
            window_len: 1,
            filters: 64,
            kernel: 1,
            pool: 1,
            hidden: [32, 32],
        }
    }
}

impl NetworkShape {
    pub fn pooled_len(&self) -> usize {
        (self.window_len + 1 - self.kernel).div_ceil(self.pool)
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.features == 0 || self.filters == 0 || self.kernel == 0 || self.pool == 0 {
            return Err(NnError::InvalidConfig("features, filters, kernel and pool must be >= 1"));
        }
        if self.window_len < self.kernel {
            return Err(NnError::InvalidConfig("window must be at least as long as the kernel"));
        }
        if self.hidden.contains(&0) {
            return Err(NnError::InvalidConfig("LSTM hidden sizes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmStack {
    pub first: LstmLayer,
    pub second: LstmLayer,
}

/// All trainable parameters. Gradients and optimizer moments use the same
/// type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub conv: Conv1dLayer,
    pub pool: usize,
    /// `None` for [`ModelVariant::EkfCnn`].
    pub lstm: Option<LstmStack>,
    pub head: DenseLayer,
    pub dropout_rate: f64,
    /// Bumped by every optimizer step; caches from older versions are stale.
    #[serde(skip)]
    pub(crate) version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl NetworkParams {
    pub fn init(variant: ModelVariant, shape: NetworkShape, dropout_rate: f64, rng: &mut impl Rng) -> Result<Self, NnError> {
        shape.validate()?;
        check_dropout(dropout_rate)?;
        let conv = Conv1dLayer::init(shape.filters, shape.features, shape.kernel, rng);
        let (lstm, head_inputs) = match variant {
            ModelVariant::EkfCnnLstm => {
                let first = LstmLayer::init(shape.filters, shape.hidden[0], rng);
                let second = LstmLayer::init(shape.hidden[0], shape.hidden[1], rng);
                (Some(LstmStack { first, second }), shape.hidden[1])
            }
            ModelVariant::EkfCnn => (None, shape.pooled_len() * shape.filters),
        };
        let head = DenseLayer::init(head_inputs, 1, rng);
        Ok(NetworkParams {
            conv,
            pool: shape.pool,
            lstm,
            head,
            dropout_rate,
            version: 0,
        })
    }

    /// Builds parameters from explicit layers, checking that they chain.
    pub fn from_layers(
        conv: Conv1dLayer,
        pool: usize,
        lstm: Option<LstmStack>,
        head: DenseLayer,
        dropout_rate: f64,
    ) -> Result<Self, NnError> {
        check_dropout(dropout_rate)?;
        if pool == 0 {
            return Err(NnError::InvalidConfig("pooling window must be >= 1"));
        }
        if head.outputs() != 1 {
            return Err(NnError::InvalidConfig("head must have exactly one output"));
        }
        if let Some(stack) = &lstm {
            if stack.first.input_size() != conv.filters() {
                return Err(NnError::InvalidConfig("first LSTM input must equal conv filters"));
            }
            if stack.second.input_size() != stack.first.hidden() {
                return Err(NnError::InvalidConfig("second LSTM input must equal first LSTM hidden size"));
            }
            if head.inputs() != stack.second.hidden() {
                return Err(NnError::InvalidConfig("head input must equal second LSTM hidden size"));
            }
        } else if !head.inputs().is_multiple_of(conv.filters()) {
            return Err(NnError::InvalidConfig("head input must be a multiple of conv filters"));
        }
        Ok(NetworkParams {
            conv,
            pool,
            lstm,
            head,
            dropout_rate,
            version: 0,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        if self.lstm.is_some() {
            ModelVariant::EkfCnnLstm
        } else {
            ModelVariant::EkfCnn
        }
    }

    pub fn features(&self) -> usize {
        self.conv.in_channels()
    }

    /// Same structure with every value set to zero.
    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            conv: self.conv.zeros_like(),
            pool: self.pool,
            lstm: self.lstm.as_ref().map(|s| LstmStack {
                first: s.first.zeros_like(),
                second: s.second.zeros_like(),
            }),
            head: self.head.zeros_like(),
            dropout_rate: self.dropout_rate,
            version: 0,
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.conv.w, &self.conv.b];
        if let Some(s) = &self.lstm {
            for layer in [&s.first, &s.second] {
                out.extend(layer.input_w.iter());
                out.extend(layer.recurrent_w.iter());
                out.extend(layer.bias.iter());
            }
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    /// Mutable view of [`NetworkParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.conv.w, &mut self.conv.b];
        if let Some(s) = &mut self.lstm {
            for layer in [&mut s.first, &mut s.second] {
                out.extend(layer.input_w.iter_mut());
                out.extend(layer.recurrent_w.iter_mut());
                out.extend(layer.bias.iter_mut());
            }
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Human-readable names matching [`NetworkParams::tensors`].
    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut out = vec!["conv.w", "conv.b"];
        if self.lstm.is_some() {
            out.extend([
                "lstm1.w_in.u",
                "lstm1.w_in.f",
                "lstm1.w_in.c",
                "lstm1.w_in.o",
                "lstm1.w_rec.u",
                "lstm1.w_rec.f",
                "lstm1.w_rec.c",
                "lstm1.w_rec.o",
                "lstm1.b.u",
                "lstm1.b.f",
                "lstm1.b.c",
                "lstm1.b.o",
                "lstm2.w_in.u",
                "lstm2.w_in.f",
                "lstm2.w_in.c",
                "lstm2.w_in.o",
                "lstm2.w_rec.u",
                "lstm2.w_rec.f",
                "lstm2.w_rec.c",
                "lstm2.w_rec.o",
                "lstm2.b.u",
                "lstm2.b.f",
                "lstm2.b.c",
                "lstm2.b.o",
            ]);
        }
        out.extend(["head.w", "head.b"]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`, elementwise over matching tensors.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) -> Result<(), NnError> {
        self.check_same_shape(other)?;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &NetworkParams) -> Result<(), NnError> {
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() {
            return Err(NnError::ShapeMismatch {
                what: "parameter set",
                expected: vec![a.len()],
                got: vec![b.len()],
            });
        }
        for (x, y) in a.iter().zip(&b) {
            if x.shape() != y.shape() {
                return Err(NnError::ShapeMismatch {
                    what: "parameter tensor",
                    expected: x.shape().to_vec(),
                    got: y.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version = self.version.wrapping_add(1);
    }
}

fn check_dropout(rate: f64) -> Result<(), NnError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(NnError::InvalidConfig("dropout rate must lie in [0, 1)"))
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Tensor,
    conv_pre: Tensor,
    pool_arg: Vec<usize>,
    pooled: Tensor,
    recurrent: Option<RecurrentCache>,
    /// Dropout mask applied right before the head (`1/(1-p)` or `0`).
    head_mask: Vec<f64>,
    head_input: Vec<f64>,
}

#[derive(Debug, Clone)]
struct RecurrentCache {
    first_h: Vec<Vec<f64>>,
    first_caches: Vec<GateCache>,
    first_masks: Vec<Vec<f64>>,
    second_caches: Vec<GateCache>,
}

impl ForwardCache {
    /// Distance of the closest ReLU input to the kink at 0.
    pub fn relu_margin(&self) -> f64 {
        self.conv_pre.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn dropout_mask(len: usize, rate: f64, mode: Mode, rng: &mut impl Rng) -> Vec<f64> {
    if mode == Mode::Infer || rate == 0.0 {
        return vec![1.0; len];
    }
    let scale = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect()
}

/// Predicts one value from a `[time, features]` window.
pub fn network_forward(params: &NetworkParams, window: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<(f64, ForwardCache), NnError> {
    let conv_pre = conv1d_forward(&params.conv, window)?;
    let activated = relu(&conv_pre);
    let (pooled, pool_arg) = max_pool1d(&activated, params.pool)?;

    let (recurrent, head_source) = match &params.lstm {
        Some(stack) => {
            let steps: Vec<Vec<f64>> = (0..pooled.rows()).map(|t| pooled.row(t).to_vec()).collect();
            let (first_h, first_caches) = lstm_sequence(&stack.first, &steps)?;
            let mut first_masks = Vec::with_capacity(first_h.len());
            let second_in: Vec<Vec<f64>> = first_h
                .iter()
                .map(|h| {
                    let mask = dropout_mask(h.len(), params.dropout_rate, mode, rng);
                    let v = h.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
                    first_masks.push(mask);
                    v
                })
                .collect();
            let (second_h, second_caches) = lstm_sequence(&stack.second, &second_in)?;
            let source = second_h.last().cloned().unwrap_or_default();
            (
                Some(RecurrentCache {
                    first_h,
                    first_caches,
                    first_masks,
                    second_caches,
                }),
                source,
            )
        }
        None => (None, pooled.data().to_vec()),
    };

    if head_source.len() != params.head.inputs() {
        return Err(NnError::ShapeMismatch {
            what: "head input",
            expected: vec![params.head.inputs()],
            got: vec![head_source.len()],
        });
    }
    let head_mask = dropout_mask(head_source.len(), params.dropout_rate, mode, rng);
    let head_input: Vec<f64> = head_source.iter().zip(&head_mask).map(|(x, m)| x * m).collect();
    let prediction = dense_forward(&params.head, &head_input)?[0];
    Ok((
        prediction,
        ForwardCache {
            version: params.version,
            input: window.clone(),
            conv_pre,
            pool_arg,
            pooled,
            recurrent,
            head_mask,
            head_input,
        },
    ))
}

/// Exact gradient of the prediction, scaled by `d_prediction`, with respect
/// to every parameter.
pub fn network_backward(params: &NetworkParams, cache: &ForwardCache, d_prediction: f64) -> Result<NetworkParams, NnError> {
    let mut grad = params.zeros_like();
    accumulate_backward(params, cache, d_prediction, &mut grad)?;
    Ok(grad)
}

/// Like [`network_backward`] but adds into an existing gradient buffer.
pub fn accumulate_backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    d_prediction: f64,
    grad: &mut NetworkParams,
) -> Result<(), NnError> {
    if cache.version != params.version {
        return Err(NnError::StaleCache);
    }
    let d_head_in = dense_backward_linear(&params.head, &cache.head_input, &[d_prediction], &mut grad.head);
    let d_source: Vec<f64> = d_head_in.iter().zip(&cache.head_mask).map(|(d, m)| d * m).collect();

    let d_pooled = match (&params.lstm, &cache.recurrent, &mut grad.lstm) {
        (Some(stack), Some(rc), Some(gstack)) => {
            let steps = rc.first_h.len();
            let mut d_second_h = vec![vec![0.0; stack.second.hidden()]; steps];
            if let Some(last) = d_second_h.last_mut() {
                for (k, d) in last.iter_mut().enumerate() {
                    *d = d_source[k];
                }
            }
            let d_second_in = lstm_sequence_backward(&stack.second, &rc.second_caches, &d_second_h, &mut gstack.second);
            let d_first_h: Vec<Vec<f64>> = d_second_in
                .iter()
                .zip(&rc.first_masks)
                .map(|(d, mask)| d.iter().zip(mask).map(|(d, m)| d * m).collect())
                .collect();
            let d_steps = lstm_sequence_backward(&stack.first, &rc.first_caches, &d_first_h, &mut gstack.first);
            let cols = cache.pooled.cols();
            let mut flat = Vec::with_capacity(steps * cols);
            for d in d_steps {
                flat.extend(d);
            }
            Tensor::new(vec![steps, cols], flat)?
        }
        (None, None, None) => Tensor::new(cache.pooled.shape().to_vec(), d_source)?,
        _ => return Err(NnError::StaleCache),
    };

    let d_activated = max_pool1d_backward(&d_pooled, &cache.pool_arg, cache.conv_pre.rows());
    let d_conv_pre = Tensor::new(
        d_activated.shape().to_vec(),
        d_activated
            .data()
            .iter()
            .zip(cache.conv_pre.data())
            .map(|(d, &z)| d * relu_grad(z))
            .collect(),
    )?;
    conv1d_backward(&params.conv, &cache.input, &d_conv_pre, &mut grad.conv);
    Ok(())
}
