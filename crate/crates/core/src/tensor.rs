//! Dense row-major tensors.
//!
//! Values are stored as `f64`. Every op that produces a tensor checks the
//! result for non-finite entries and reports them instead of propagating.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must have positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
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

    /// Row count when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::Dimension(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(indices.len(), c, data)
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows() {
            return Err(Error::Dimension(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows()
            )));
        }
        let c = self.cols();
        Self::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("vstack of nothing".into()))?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::Dimension("vstack column mismatch".into()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `self` unchanged if every entry is finite.
    pub fn check_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{what} produced a non-finite value")))
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.cols()), &self.data)
            .expect("tensor data length matches its shape")
    }

    pub(crate) fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = (self.rows(), self.cols());
        ArrayViewMut2::from_shape((r, c), &mut self.data)
            .expect("tensor data length matches its shape")
    }

    /// Plain matrix product without graph attachment.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[self.rows(), other.cols()]);
        gemm(1.0, self.view2(), other.view2(), 0.0, out.view2_mut());
        out.check_finite("matmul")
    }
}

/// `c <- alpha * a . b + beta * c`, single-threaded and deterministic.
pub(crate) fn gemm(
    alpha: f64,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    beta: f64,
    mut c: ArrayViewMut2<'_, f64>,
) {
    ndarray::linalg::general_mat_mul(alpha, &a, &b, beta, &mut c);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn select_and_slice_rows() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(t.select_rows(&[2, 0]).unwrap().data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(t.slice_rows(1, 3).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(t.select_rows(&[3]).is_err());
    }

    #[test]
    fn plain_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(b.matmul(&b).is_err());
    }
}
