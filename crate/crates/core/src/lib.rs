//! Cell health prognosis algorithms.
//!
//! This crate is `no_std` and only needs an allocator. Everything that touches
//! files, clocks or the command line lives in the `cellhealth` companion crate.
//!
//! Pipeline overview:
//!
//! * [`segment`] groups raw cycler samples into charge/discharge half-cycles
//!   and resamples them onto a uniform voltage grid.
//! * [`ekf`] is a generic extended Kalman filter plus the scalar random-walk
//!   denoiser applied to the current and voltage channels.
//! * [`nn`] holds the hand-written Conv1D / LSTM / dense network with exact
//!   backpropagation through time and the Adam optimizer.
//! * [`train`] prepares features (normalization, chronological split,
//!   windowing) and runs the training loop and hyperparameter grid.
//! * [`dca`] computes differential capacity (dQ/dV) and smooths it.
//! * [`peaks`] finds, filters and measures dQ/dV peaks and tracks them across
//!   C-rates.
//! * [`synth`] is a seeded synthetic cycler whose dQ/dV is a known sum of
//!   Gaussians, used as ground truth.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dca;
pub mod ekf;
pub mod nn;
pub mod peaks;
pub mod seed;
pub mod segment;
pub mod synth;
pub mod train;
pub mod types;

pub use types::{CellId, CellSpec, Chemistry, CycleRecord, Dataset, HalfCycleCurve, StepKind};
