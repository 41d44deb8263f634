//! Dense row-major `f64` matrices.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{AtmError, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "{:?}", self.row(r))?;
            if r + 1 < self.rows {
                write!(f, ", ")?;
            }
        }
        if self.rows > 8 {
            write!(f, "...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AtmError::contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(AtmError::dim("matmul", self.shape(), other.shape()));
        }
        let (n, k, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let out_row = &mut out[i * p..(i + 1) * p];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * p..(kk + 1) * p];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: p,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// Elementwise sum. `other` may also be a `1×cols` row vector, in which
    /// case it is added to every row.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if other.shape() == self.shape() {
            let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
            return Ok(Matrix {
                rows: self.rows,
                cols: self.cols,
                data,
            });
        }
        if other.rows == 1 && other.cols == self.cols {
            let mut out = self.clone();
            for row in out.data.chunks_mut(self.cols.max(1)) {
                for (o, b) in row.iter_mut().zip(&other.data) {
                    *o += b;
                }
            }
            return Ok(out);
        }
        Err(AtmError::dim("add", self.shape(), other.shape()))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if other.shape() != self.shape() {
            return Err(AtmError::dim("sub", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if other.shape() != self.shape() {
            return Err(AtmError::dim("hadamard", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        if self.cols == 0 {
            return out;
        }
        for row in out.data.chunks_mut(self.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Arithmetic mean of the rows, as a `1×cols` matrix.
    pub fn mean_pool_rows(&self) -> Result<Matrix> {
        if self.rows == 0 {
            return Err(AtmError::contract("mean_pool_rows of an empty matrix"));
        }
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        })
    }

    /// Stacks matrices vertically in the given order.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| AtmError::contract("concat_rows of an empty list"))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(AtmError::dim("concat_rows", first.shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeedStreams;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&x).unwrap(), x);
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeedStreams::new(11).stream("test.matmul");
        let a = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let b = Matrix::random_normal(7, 3, 1.0, &mut rng);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(err, AtmError::dim("matmul", (2, 3), (2, 3)));
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
    }

    #[test]
    fn softmax_examples() {
        let s = Matrix::from_rows(&[[0.0, 0.0]]).softmax_rows();
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5]]));

        // exp(k) / (e + e^2 + e^3), evaluated independently
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let s = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).softmax_rows();
        for (k, want) in [0.09003057, 0.24472847, 0.66524096].iter().enumerate() {
            assert!((s.get(0, k) - want).abs() < 1e-8);
            assert!((s.get(0, k) - ((k + 1) as f64).exp() / denom).abs() < 1e-15);
        }

        let s = Matrix::from_rows(&[[1000.0, 1000.0]]).softmax_rows();
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5]]));
    }

    #[test]
    fn structural_ops() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(x.transpose(), Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]));
        let p = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).mean_pool_rows().unwrap();
        assert_eq!(p, Matrix::from_rows(&[[1.0, 1.0]]));
        assert_eq!(
            Matrix::from_rows(&[[-1.0, 2.0]]).relu(),
            Matrix::from_rows(&[[0.0, 2.0]])
        );
        let b = x.add(&Matrix::row_vector(&[10.0, 20.0])).unwrap();
        assert_eq!(b, Matrix::from_rows(&[[11.0, 22.0], [13.0, 24.0]]));
        assert!(matches!(
            x.add(&Matrix::zeros(3, 2)),
            Err(AtmError::Dimension { op: "add", .. })
        ));
        assert_eq!(x.scale(0.5).get(1, 1), 2.0);
    }

    #[test]
    fn concat_rows_checks_columns() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::filled(1, 3, 1.0);
        let c = Matrix::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (3, 3));
        assert_eq!(c.row(2), &[1.0, 1.0, 1.0]);
        assert!(Matrix::concat_rows(&[&a, &Matrix::zeros(1, 2)]).is_err());
    }

    fn small_matrix(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(x in small_matrix(12)) {
            let s = x.softmax_rows();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_rows_invariant_to_row_constant_shift(
            x in small_matrix(12),
            shifts in prop::collection::vec(-100.0f64..100.0, 12),
        ) {
            // a constant added across all columns of a row leaves that row's softmax unchanged
            let mut shifted = x.clone();
            for (r, shift) in shifts.iter().enumerate().take(x.rows()) {
                for c in 0..x.cols() {
                    shifted.set(r, c, x.get(r, c) + shift);
                }
            }
            prop_assert!(x.softmax_rows().max_abs_diff(&shifted.softmax_rows()) < 1e-12);
        }

        #[test]
        fn matmul_agrees_with_triple_loop(seed in any::<u64>(), n in 1usize..=32, k in 1usize..=32, p in 1usize..=32) {
            let mut rng = SeedStreams::new(seed).stream("prop.matmul");
            let a = Matrix::random_normal(n, k, 1.0, &mut rng);
            let b = Matrix::random_normal(k, p, 1.0, &mut rng);
            prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }
}
