//! Dense row-major f64 matrices.
//!
//! All numerics in this crate run in 64-bit floats on purpose: the
//! gradient-verification and determinism contracts are stated at f64
//! resolution, and the models involved are small enough that clarity
//! beats throughput. Accumulation order is fixed (plain loops), which
//! is what makes repeated runs bit-identical.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
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

    /// Standard-normal entries scaled by `std`, deterministic in `seed`.
    pub fn randn(rows: usize, cols: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(rows, cols);
        fill_normal(&mut rng, &mut m.data, std);
        m
    }

    /// As `randn` but drawing from a caller-owned stream.
    pub fn randn_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        fill_normal(rng, &mut m.data, std);
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(r);
                for c in 0..other.cols {
                    out_row[c] += a * orow[c];
                }
            }
        }
        out
    }

    /// self (r x k) times other^T where other is (c x k).
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_transpose_b shape mismatch: {}x{} * ({}x{})^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let arow = self.row(r);
            for c in 0..other.rows {
                let brow = other.row(c);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o -= b;
        }
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o *= b;
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn row_l2_norm(&self, r: usize) -> f64 {
        self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks matrices vertically; all must share the column count.
    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        assert!(!parts.is_empty(), "vstack needs at least one part");
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
        }
        Matrix { rows, cols, data }
    }

    /// Mean of the given rows, as a 1 x cols matrix.
    pub fn mean_rows(&self, rows: &[usize]) -> Matrix {
        assert!(!rows.is_empty(), "mean_rows over empty set");
        let mut out = Matrix::zeros(1, self.cols);
        for &r in rows {
            for c in 0..self.cols {
                out.data[c] += self.get(r, c);
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut out.data {
            *v *= inv;
        }
        out
    }

    /// Rows rescaled to unit L2 norm. Panics on a zero row; callers
    /// validate first and surface a numeric error.
    pub fn normalize_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let n = self.row_l2_norm(r);
            assert!(n > 0.0, "normalize_rows: zero row {r}");
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        out
    }
}

/// Box-Muller standard normals; two draws per pair keeps the stream
/// layout independent of the buffer length parity.
fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64], std: f64) {
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = r * theta.cos() * std;
        i += 1;
        if i < out.len() {
            out[i] = r * theta.sin() * std;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.row(0), &[19.0, 22.0]);
        assert_eq!(c.row(1), &[43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_b_agrees_with_explicit_transpose() {
        let a = Matrix::randn(3, 5, 1.0, 1);
        let b = Matrix::randn(4, 5, 1.0, 2);
        let direct = a.matmul_transpose_b(&b);
        let via_t = a.matmul(&b.transpose());
        for r in 0..3 {
            for c in 0..4 {
                assert!((direct.get(r, c) - via_t.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Matrix::randn(4, 4, 0.02, 42);
        let b = Matrix::randn(4, 4, 0.02, 42);
        assert_eq!(a, b);
        let c = Matrix::randn(4, 4, 0.02, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn mean_rows_averages_selected_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0], vec![100.0, 100.0]]);
        let avg = m.mean_rows(&[0, 1]);
        assert_eq!(avg.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn normalize_rows_yields_unit_norms() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]);
        let n = m.normalize_rows();
        assert!((n.row_l2_norm(0) - 1.0).abs() < 1e-12);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-12);
    }
}
