use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::NnError;

/// Row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch {
                what: "tensor data",
                expected: vec![expected],
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// A `[time, channels]` matrix from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::ShapeMismatch {
                    what: "matrix row",
                    expected: vec![cols],
                    got: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn expect_shape(&self, what: &'static str, expected: &[usize]) -> Result<(), NnError> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch {
                what,
                expected: expected.to_vec(),
                got: self.shape.clone(),
            })
        }
    }
}

/// `out += W x` for a row-major `[rows, cols]` matrix.
pub(crate) fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += Wᵀ d` for a row-major `[rows, cols]` matrix.
pub(crate) fn matvec_t_acc(w: &[f64], cols: usize, d: &[f64], out: &mut [f64]) {
    for (&di, row) in d.iter().zip(w.chunks_exact(cols)) {
        if di != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += di * wij;
            }
        }
    }
}

/// `G += d xᵀ`.
pub(crate) fn outer_acc(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&di, row) in d.iter().zip(g.chunks_exact_mut(cols)) {
        if di != 0.0 {
            for (gij, &xj) in row.iter_mut().zip(x) {
                *gij += di * xj;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
