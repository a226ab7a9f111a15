//! LSTM cell with backpropagation through time.
//!
//! ```text
//! u = σ(W_Ψu Ψ + W_hu h⁻ + b_u)      input gate
//! f = σ(W_Ψf Ψ + W_hf h⁻ + b_f)      forget gate
//! g = tanh(W_Ψc Ψ + W_hc h⁻ + b_c)   candidate
//! o = σ(W_Ψo Ψ + W_ho h⁻ + b_o)      output gate
//! c = f ∘ c⁻ + u ∘ g
//! h = o ∘ tanh(c)
//! ```

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{glorot, sigmoid};
use super::tensor::{matvec_acc, matvec_t_acc, outer_acc, Tensor};
use super::NnError;

/// Gate order used by every per-gate array in [`LstmLayer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

pub const GATES: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// Per gate, `[hidden, input]`.
    pub input_w: [Tensor; 4],
    /// Per gate, `[hidden, hidden]`.
    pub recurrent_w: [Tensor; 4],
    /// Per gate, `[hidden]`.
    pub bias: [Tensor; 4],
}

impl LstmLayer {
    pub fn new(input_w: [Tensor; 4], recurrent_w: [Tensor; 4], bias: [Tensor; 4]) -> Result<Self, NnError> {
        let hidden = bias[0].len();
        let input = input_w[0].shape().get(1).copied().unwrap_or(0);
        if hidden == 0 {
            return Err(NnError::InvalidConfig("LSTM hidden size must be >= 1"));
        }
        for g in 0..4 {
            input_w[g].expect_shape("LSTM input weights", &[hidden, input])?;
            recurrent_w[g].expect_shape("LSTM recurrent weights", &[hidden, hidden])?;
            bias[g].expect_shape("LSTM bias", &[hidden])?;
        }
        Ok(LstmLayer {
            input_w,
            recurrent_w,
            bias,
        })
    }

    /// Glorot weights, zero biases except a forget-gate bias of 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input_w = core::array::from_fn(|_| glorot(&[hidden, input], input, hidden, rng));
        let recurrent_w = core::array::from_fn(|_| glorot(&[hidden, hidden], hidden, hidden, rng));
        let bias = core::array::from_fn(|g| {
            if g == Gate::Forget as usize {
                Tensor::filled(&[hidden], 1.0)
            } else {
                Tensor::zeros(&[hidden])
            }
        });
        LstmLayer {
            input_w,
            recurrent_w,
            bias,
        }
    }

    /// All weights and biases set to zero.
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            input_w: core::array::from_fn(|_| Tensor::zeros(&[hidden, input])),
            recurrent_w: core::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            bias: core::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.bias[0].len()
    }

    pub fn input_size(&self) -> usize {
        self.input_w[0].cols()
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.hidden())
    }
}

/// Intermediates of one [`lstm_step`], kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCache {
    pub psi: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One time step. Returns `(h, c, cache)`.
pub fn lstm_step(layer: &LstmLayer, psi: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>, GateCache), NnError> {
    let (n_in, n_h) = (layer.input_size(), layer.hidden());
    for (what, len, expected) in [
        ("LSTM input", psi.len(), n_in),
        ("LSTM h_prev", h_prev.len(), n_h),
        ("LSTM c_prev", c_prev.len(), n_h),
    ] {
        if len != expected {
            return Err(NnError::ShapeMismatch {
                what,
                expected: vec![expected],
                got: vec![len],
            });
        }
    }
    let pre = |gate: Gate| {
        let i = gate as usize;
        let mut a = layer.bias[i].data().to_vec();
        matvec_acc(layer.input_w[i].data(), n_in, psi, &mut a);
        matvec_acc(layer.recurrent_w[i].data(), n_h, h_prev, &mut a);
        a
    };
    let u: Vec<f64> = pre(Gate::Input).into_iter().map(sigmoid).collect();
    let f: Vec<f64> = pre(Gate::Forget).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = pre(Gate::Cell).into_iter().map(libm::tanh).collect();
    let o: Vec<f64> = pre(Gate::Output).into_iter().map(sigmoid).collect();
    let c: Vec<f64> = (0..n_h).map(|k| f[k] * c_prev[k] + u[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|&v| libm::tanh(v)).collect();
    let h: Vec<f64> = (0..n_h).map(|k| o[k] * tanh_c[k]).collect();
    let cache = GateCache {
        psi: psi.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        u,
        f,
        g,
        o,
        c: c.clone(),
        tanh_c,
    };
    Ok((h.clone(), c, cache))
}

/// Runs the layer over a sequence from zero state. Returns the hidden state
/// of every step and the per-step caches.
pub fn lstm_sequence(layer: &LstmLayer, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<GateCache>), NnError> {
    let n_h = layer.hidden();
    let mut h = vec![0.0; n_h];
    let mut c = vec![0.0; n_h];
    let mut hs = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for psi in inputs {
        let (h_next, c_next, cache) = lstm_step(layer, psi, &h, &c)?;
        hs.push(h_next.clone());
        caches.push(cache);
        h = h_next;
        c = c_next;
    }
    Ok((hs, caches))
}

/// Backpropagation through time. `d_h[t]` is the loss gradient flowing into
/// `h_t` from the layer above. Accumulates parameter gradients into `grad`
/// and returns the gradient with respect to each step's input.
pub(crate) fn lstm_sequence_backward(layer: &LstmLayer, caches: &[GateCache], d_h: &[Vec<f64>], grad: &mut LstmLayer) -> Vec<Vec<f64>> {
    let (n_in, n_h) = (layer.input_size(), layer.hidden());
    let mut d_inputs = vec![vec![0.0; n_in]; caches.len()];
    let mut dh_next = vec![0.0; n_h];
    let mut dc_next = vec![0.0; n_h];
    let mut da = [vec![0.0; n_h], vec![0.0; n_h], vec![0.0; n_h], vec![0.0; n_h]];
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        for k in 0..n_h {
            let dh = d_h[t][k] + dh_next[k];
            let d_o = dh * cache.tanh_c[k];
            let dc = dc_next[k] + dh * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
            let d_f = dc * cache.c_prev[k];
            let d_u = dc * cache.g[k];
            let d_g = dc * cache.u[k];
            dc_next[k] = dc * cache.f[k];
            da[Gate::Input as usize][k] = d_u * cache.u[k] * (1.0 - cache.u[k]);
            da[Gate::Forget as usize][k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
            da[Gate::Cell as usize][k] = d_g * (1.0 - cache.g[k] * cache.g[k]);
            da[Gate::Output as usize][k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for g in 0..4 {
            outer_acc(grad.input_w[g].data_mut(), &da[g], &cache.psi);
            outer_acc(grad.recurrent_w[g].data_mut(), &da[g], &cache.h_prev);
            for (b, &d) in grad.bias[g].data_mut().iter_mut().zip(&da[g]) {
                *b += d;
            }
            matvec_t_acc(layer.input_w[g].data(), n_in, &da[g], &mut d_inputs[t]);
            matvec_t_acc(layer.recurrent_w[g].data(), n_h, &da[g], &mut dh_next);
        }
    }
    d_inputs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_layer(input: usize, hidden: usize, w: f64) -> LstmLayer {
        LstmLayer {
            input_w: core::array::from_fn(|_| Tensor::filled(&[hidden, input], w)),
            recurrent_w: core::array::from_fn(|_| Tensor::filled(&[hidden, hidden], w)),
            bias: core::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    #[test]
    fn zero_parameters() {
        let layer = LstmLayer::zeros(3, 2);
        let (h, c, cache) = lstm_step(&layer, &[1.0, -2.0, 3.0], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
        assert_eq!(cache.u, vec![0.5; 2]);
        assert_eq!(cache.f, vec![0.5; 2]);
        assert_eq!(cache.o, vec![0.5; 2]);
        assert_eq!(cache.g, vec![0.0; 2]);
    }

    #[test]
    fn saturated_forget_gate_carries_state() {
        let mut layer = LstmLayer::zeros(1, 1);
        layer.bias[Gate::Forget as usize] = Tensor::filled(&[1], 50.0);
        let (_, c, _) = lstm_step(&layer, &[0.7], &[0.0], &[1.0]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_unit_by_hand() {
        let layer = constant_layer(1, 1, 0.1);
        let (h, c, _) = lstm_step(&layer, &[1.0], &[0.0], &[0.0]).unwrap();
        let s = 1.0 / (1.0 + (-0.1f64).exp());
        let expect_c = s * 0.1f64.tanh();
        let expect_h = s * expect_c.tanh();
        assert!((c[0] - expect_c).abs() < 1e-15);
        assert!((h[0] - expect_h).abs() < 1e-15);
        assert!((c[0] - 0.052324).abs() < 1e-6);
        assert!((h[0] - 0.027442).abs() < 1e-5);
    }

    #[test]
    fn shape_checks() {
        let layer = LstmLayer::zeros(2, 3);
        assert!(lstm_step(&layer, &[1.0], &[0.0; 3], &[0.0; 3]).is_err());
        assert!(lstm_step(&layer, &[1.0, 2.0], &[0.0; 2], &[0.0; 3]).is_err());
        assert!(LstmLayer::new(
            core::array::from_fn(|_| Tensor::zeros(&[3, 2])),
            core::array::from_fn(|_| Tensor::zeros(&[3, 2])),
            core::array::from_fn(|_| Tensor::zeros(&[3])),
        )
        .is_err());
    }
}
