//! Minimal dense reverse-mode differentiation engine over 64-bit floats.
//!
//! Values are row-major [`Tensor`]s. Operations are recorded on a [`Tape`];
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients, which [`Gradients::accumulate_into`] adds to the named
//! [`Parameter`]s of a [`ParamStore`]. Most operations treat their inputs
//! as matrices whose column count is the last dimension.

mod checkpoint;
mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST, CHECKPOINT_PAYLOAD};
pub use gradcheck::{finite_difference_check, GradCheckReport, FD_STEP};
pub use nn::{gru_cell, init_attention, linear, multi_head_attention, GruParams, LinearParams};
pub use optim::Adam;
pub use params::{ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Row vector `[1, n]`.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Stack equal-length rows into `[rows, cols]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
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

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn transpose2(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// `a[m,k] * b[k,n]` into `out[m,n]` (accumulating).
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m,k] * b[n,k]^T` into `out[m,n]` (accumulating).
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `a[k,m]^T * b[k,n]` into `out[m,n]` (accumulating).
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked_construction() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn(&a, &b, &mut nn, 2, 3, 4);
        let bt = Tensor::new(vec![3, 4], b.clone()).unwrap().transpose2();
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, bt.data(), &mut nt, 2, 3, 4);
        let at = Tensor::new(vec![2, 3], a.clone()).unwrap().transpose2();
        let mut tn = vec![0.0; 8];
        gemm_tn(at.data(), &b, &mut tn, 3, 2, 4);
        assert_eq!(nn, nt);
        assert_eq!(nn, tn);
        assert_eq!(nn[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }
}
