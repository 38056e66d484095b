//! Dense row-major `f32` matrices and the handful of kernels the pipeline needs.
//!
//! Storage is 32-bit; dot products and row sums accumulate in `f64`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Sum of each row, accumulated in `f64`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter()
            .map(|r| r.iter().map(|&v| v as f64).sum())
            .collect()
    }

    /// Mean of each column, accumulated in `f64`.
    pub fn col_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.cols];
        for r in self.row_iter() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v as f64;
            }
        }
        let n = self.rows.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    // four independent accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let (ac, ar) = a.split_at(a.len() - a.len() % 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(&x, &y)| x as f64 * y as f64).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Scales every row to unit Euclidean norm. Zero rows stay zero.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
    Ok(out)
}

/// Row-wise `softmax(m / tau)` with per-row max subtraction.
pub fn row_softmax(m: &Matrix, tau: f32) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i), tau);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32], tau: f32) {
    let inv_tau = 1.0 / tau;
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        // exponent is <= 0, so f32 exp cannot overflow
        let e = ((*v - max) * inv_tau).exp();
        *v = e;
        sum += e as f64;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
}

/// `a · bᵀ`: entry `(i, j)` is the dot product of row `i` of `a` with row `j` of `b`.
pub fn matmul_transpose(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "matmul_transpose: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j)) as f32;
        }
    }
    Ok(out)
}

/// `a · aᵀ`. Every entry sums its products in the same order as its mirror,
/// so the result is exactly symmetric.
pub fn gram(a: &Matrix) -> Matrix {
    let (n, d) = (a.rows, a.cols);
    let at = a.transpose();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let ai = &a.data[i * d..(i + 1) * d];
        let row = &mut out.data[i * n..(i + 1) * n];
        for (k, &x) in ai.iter().enumerate() {
            for (s, &y) in row.iter_mut().zip(at.row(k)) {
                *s += x * y;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize_rows(&m(&[&[3.0, 4.0]])).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-7);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-7);
        assert_eq!(l2_normalize_rows(&Matrix::identity(2)).unwrap(), Matrix::identity(2));
        assert_eq!(
            l2_normalize_rows(&m(&[&[0.0, 0.0]])).unwrap().data(),
            &[0.0, 0.0]
        );
        assert!(matches!(
            l2_normalize_rows(&Matrix::zeros(0, 3)),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn softmax_examples() {
        let out = row_softmax(&m(&[&[0.0, 0.0]]), 7.0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        // 1 / (1 + e^-1)
        let out = row_softmax(&m(&[&[1.0, 0.0]]), 1.0).unwrap();
        assert!((out.get(0, 0) - 0.73106).abs() < 1e-4);
        assert!((out.get(0, 1) - 0.26894).abs() < 1e-4);
        let out = row_softmax(&m(&[&[3.0], &[-2.0]]), 0.5).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        for tau in [0.0, -1.0, f32::NAN] {
            assert!(matches!(
                row_softmax(&Matrix::identity(2), tau),
                Err(Error::InvalidTemperature(_))
            ));
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let out = row_softmax(&m(&[&[1e30, -1e30, 0.0]]), 0.03).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.get(0, 0), 1.0);
    }

    #[test]
    fn matmul_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(matmul_transpose(&i2, &i2).unwrap(), i2);
        let out = matmul_transpose(&m(&[&[1.0, 2.0]]), &m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(out.data(), &[11.0]);
        let a = m(&[&[1.0, -2.0, 3.0], &[0.5, 0.5, 0.5]]);
        let z = Matrix::zeros(4, 3);
        assert!(matmul_transpose(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matmul_transpose(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn gram_matches_matmul() {
        let a = m(&[&[1.0, -2.0, 3.0], &[0.5, 0.5, 0.5], &[2.0, 0.0, -1.0]]);
        assert_eq!(gram(&a), matmul_transpose(&a, &a).unwrap());
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f32..50.0, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(mat in matrix_strategy(), tau_idx in 0usize..4) {
            let tau = [0.03f32, 1.0, 60.0, 100.0][tau_idx];
            let out = row_softmax(&mat, tau).unwrap();
            prop_assert!(out.all_finite());
            for s in out.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            prop_assert!(out.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(mat in matrix_strategy(), shift in -20.0f32..20.0) {
            let mut shifted = mat.clone();
            for i in 0..shifted.rows() {
                shifted.row_mut(i).iter_mut().for_each(|v| *v += shift);
            }
            let a = row_softmax(&mat, 1.0).unwrap();
            let b = row_softmax(&shifted, 1.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn normalize_idempotent(mat in matrix_strategy()) {
            let once = l2_normalize_rows(&mat).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            for (x, y) in once.data().iter().zip(twice.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            for r in once.row_iter() {
                let n: f64 = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
            }
        }
    }
}
