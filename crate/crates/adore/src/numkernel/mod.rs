//! Dense numeric kernels everything else is built on.
//!
//! All math is 32-bit float with a deterministic accumulation order
//! (row-major, ascending inner index), so results are reproducible
//! bit-for-bit across runs on the same target.

mod adam;
mod gru;
pub mod rng;

pub use adam::{adam_update, AdamState};
pub use gru::{gru_cell, gru_cell_backward, gru_cell_cached, GruCellCache, GruCellParams};

use std::cell::Cell;

thread_local! {
    static MATMUL_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Drains the per-thread count of matrix-product element operations.
///
/// Used by tests asserting that per-step decode cost stays constant.
pub fn take_matmul_ops() -> u64 {
    MATMUL_OPS.with(|c| c.replace(0))
}

fn count_ops(n: u64) {
    MATMUL_OPS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Row-major dense f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        assert!(i < self.rows, "row {} out of range ({} rows)", i, self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        assert!(i < self.rows, "row {} out of range ({} rows)", i, self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Appends one row; the matrix must have matching width (or be empty).
    pub fn push_row(&mut self, row: &[f32]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Removes row `j` in place by shifting the tail up.
    pub fn remove_row_in_place(&mut self, j: usize) {
        assert!(j < self.rows, "remove_row: {} out of range", j);
        let w = self.cols;
        self.data.copy_within((j + 1) * w.., j * w);
        self.data.truncate((self.rows - 1) * w);
        self.rows -= 1;
    }

    /// Copy of the matrix with row `j` deleted (gather-style).
    pub fn without_row(&self, j: usize) -> Matrix {
        assert!(j < self.rows, "without_row: {} out of range", j);
        let mut out = Matrix::zeros(0, self.cols);
        out.cols = self.cols;
        for i in 0..self.rows {
            if i != j {
                out.push_row(self.row(i));
            }
        }
        out
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f32;
    fn index(&self, (i, j): (usize, usize)) -> &f32 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f32 {
        &mut self.data[i * self.cols + j]
    }
}

/// `a x b`. Accumulates along the shared dimension in ascending order, so
/// the result is deterministic. Panics on inner-dimension mismatch.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(
        a.cols, b.rows,
        "matmul dimension mismatch: {}x{} by {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    count_ops((a.rows * a.cols * b.cols) as u64);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    debug_assert!(out.is_finite(), "matmul produced non-finite values");
    out
}

/// `a x b^T`. Both operands are walked along contiguous rows.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(
        a.cols, b.cols,
        "matmul_transb dimension mismatch: {}x{} by ({}x{})^T",
        a.rows, a.cols, b.rows, b.cols
    );
    count_ops((a.rows * a.cols * b.rows) as u64);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    debug_assert!(out.is_finite(), "matmul_transb produced non-finite values");
    out
}

/// `a^T x b`, accumulated into `out` (shape a.cols x b.cols).
pub fn matmul_transa_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert_eq!(a.rows, b.rows, "matmul_transa row mismatch");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_transa out shape");
    count_ops((a.rows * a.cols * b.cols) as u64);
    for i in 0..a.rows {
        let arow = a.row(i);
        let brow = b.row(i);
        for (k, &aik) in arow.iter().enumerate() {
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bij) in orow.iter_mut().zip(brow) {
                *o += aik * bij;
            }
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax over one row: subtracts the max before
/// exponentiating. Panics on an empty row.
pub fn softmax_row(v: &[f32]) -> Vec<f32> {
    assert!(!v.is_empty(), "softmax of an empty row");
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    debug_assert!(out.iter().all(|x| x.is_finite()), "softmax non-finite");
    out
}

/// In-place variant used by the hot attention loops.
pub fn softmax_row_in_place(v: &mut [f32]) {
    assert!(!v.is_empty(), "softmax of an empty row");
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::SplitMix64;
    use proptest::prelude::*;

    /// Scalar triple-loop reference, coded separately from `matmul`.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f32;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal_f32()).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = matmul(&Matrix::identity(2), &m);
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_projector_zeroes_second_row() {
        let p = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let m = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let out = matmul(&p, &m);
        assert_eq!(out, Matrix::from_vec(2, 2, vec![5.0, 6.0, 0.0, 0.0]));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let a = random_matrix(&mut rng, 8, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let got = matmul(&a, &b);
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6, "{} vs {}", g, w);
        }
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn matmul_rejects_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        matmul(&a, &b);
    }

    #[test]
    fn matmul_handles_empty_result() {
        let a = Matrix::zeros(0, 3);
        let b = Matrix::zeros(3, 2);
        let out = matmul(&a, &b);
        assert_eq!((out.rows(), out.cols()), (0, 2));
    }

    #[test]
    fn softmax_single_element_is_one() {
        for c in [-1000.0, -1.0, 0.0, 3.5, 1000.0] {
            assert_eq!(softmax_row(&[c]), vec![1.0]);
        }
    }

    #[test]
    fn softmax_uniform_input_is_uniform() {
        assert_eq!(softmax_row(&[0.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let out = softmax_row(&[1000.0, 999.0]);
        let shifted = softmax_row(&[1.0, 0.0]);
        assert!(out.iter().all(|x| x.is_finite()));
        assert_eq!(out, shifted);
    }

    #[test]
    #[should_panic(expected = "empty row")]
    fn softmax_rejects_empty() {
        softmax_row(&[]);
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(v in proptest::collection::vec(-50.0f32..50.0, 1..32)) {
            let out = softmax_row(&v);
            prop_assert!(out.iter().all(|&x| x >= 0.0));
            let sum: f32 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-10.0f32..10.0, 1..16), c in -5.0f32..5.0) {
            let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
            let a = softmax_row(&v);
            let b = softmax_row(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn matmul_agrees_with_oracle_on_random_shapes(
            m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in 0u64..1000
        ) {
            let mut rng = SplitMix64::new(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let got = matmul(&a, &b);
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                prop_assert!((g - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn transb_and_transa_match_explicit_transpose() {
        let mut rng = SplitMix64::new(7);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let got = matmul_transb(&a, &b);
        // transpose b by hand
        let mut bt = Matrix::zeros(3, 4);
        for i in 0..4 {
            for j in 0..3 {
                bt[(j, i)] = b[(i, j)];
            }
        }
        let want = matmul(&a, &bt);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6);
        }

        let c = random_matrix(&mut rng, 5, 4);
        let mut acc = Matrix::zeros(3, 4);
        matmul_transa_acc(&a, &c, &mut acc);
        let mut at = Matrix::zeros(3, 5);
        for i in 0..5 {
            for j in 0..3 {
                at[(j, i)] = a[(i, j)];
            }
        }
        let want2 = matmul(&at, &c);
        for (g, w) in acc.data().iter().zip(want2.data()) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_op_counter_counts_element_ops() {
        take_matmul_ops();
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 4);
        let _ = matmul(&a, &b);
        assert_eq!(take_matmul_ops(), 24);
    }
}
