//! A small neural network stack implemented from scratch: tensors, layers,
//! an LSTM with backpropagation through time, the capacity model and Adam.

pub mod adam;
pub mod layers;
pub mod lstm;
pub mod network;
pub mod tensor;

use alloc::vec::Vec;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use layers::{conv1d_forward, dense_forward, max_pool1d, relu, relu_grad, Activation, Conv1dLayer, DenseLayer};
pub use lstm::{lstm_sequence, lstm_step, Gate, GateCache, LstmLayer};
pub use network::{
    accumulate_backward, network_backward, network_forward, ForwardCache, LstmStack, Mode, ModelVariant, NetworkParams, NetworkShape,
};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NnError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
}
