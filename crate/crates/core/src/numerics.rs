//! Dense row-major kernels in double precision.
//!
//! Every kernel accumulates in a fixed order (row-major, left to right over the
//! contraction index), so repeated calls on identical inputs are bit-identical
//! and results do not depend on how trials are scheduled across threads.

use crate::error::{Result, TctError};

/// Row-major matrix of `f64`.
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data; rejects wrong lengths and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TctError::shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TctError::input(format!(
                "non-finite value at flat index {pos} of a {rows}x{cols} matrix"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TctError::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; a zero-width matrix still has `rows` empty rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Rows `start..start + count` as a new matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        assert!(start + count <= self.rows, "row block out of range");
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Horizontal concatenation.
    pub fn hconcat(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, Matrix::rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(TctError::shape("hconcat blocks disagree on row count"));
        }
        let cols = blocks.iter().map(Matrix::cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for b in blocks {
                out.row_mut(r)[offset..offset + b.cols].copy_from_slice(b.row(r));
                offset += b.cols;
            }
        }
        Ok(out)
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TctError::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(TctError::shape(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b`. Each output entry is accumulated over the contraction index in
/// ascending order starting from `0.0`, identical to a naive triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TctError::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    let nonzero = b.data.iter().filter(|&&v| v != 0.0).count();
    if nonzero * 4 < b.data.len() && a.is_finite() {
        // Skipping exact zeros of `b` leaves every sum unchanged when `a` is finite.
        let sparse: Vec<Vec<(usize, f64)>> = (0..b.rows)
            .map(|k| {
                b.row(k)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        for i in 0..a.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, entries) in sparse.iter().enumerate() {
                let aik = a.data[i * a.cols + k];
                for &(j, bv) in entries {
                    out_row[j] += aik * bv;
                }
            }
        }
        return Ok(out);
    }
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose. Bit-identical to
/// `matmul(a, &b.transpose())`.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(TctError::shape(format!(
            "matmul_transposed {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(a, &b.transpose())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise `softmax(scale · m)` with per-row max subtraction.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Matrix {
    assert!(scale > 0.0, "softmax scale must be positive, got {scale}");
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let src = m.row(r);
        let dst = out.row_mut(r);
        let max = src
            .iter()
            .map(|&v| v * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v * scale - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Index of the largest value; ties resolve to the lowest index.
/// Returns `None` for an empty slice.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Per-row top-1 binarization: a single 1 at the row argmax (lowest column on ties).
pub fn keeptop_rows(m: &Matrix) -> Matrix {
    assert!(m.rows > 0 && m.cols > 0, "keeptop of an empty matrix");
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let j = argmax_first(m.row(r)).expect("non-empty row");
        out.set(r, j, 1.0);
    }
    out
}

/// Row-wise layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`
/// with population variance.
pub fn layernorm_rows(m: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(TctError::shape(format!(
            "layernorm gain/bias lengths {}/{} for {} columns",
            gain.len(),
            bias.len(),
            m.cols
        )));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    if m.cols == 0 {
        return Ok(out);
    }
    let n = m.cols as f64;
    for r in 0..m.rows {
        let src = m.row(r);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (((d, &v), g), b) in out.row_mut(r).iter_mut().zip(src).zip(gain).zip(bias) {
            *d = (v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, amp: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-amp..amp)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 4, 1.0);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 4, 5, 1.0);
        let b = random_matrix(&mut rng, 5, 2, 1.0);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(TctError::Shape(_))));
        assert!(matches!(matmul_transposed(&a, &Matrix::zeros(2, 4)), Err(TctError::Shape(_))));
    }

    #[test]
    fn transposed_product_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 7, 9, 3.0);
        let b = random_matrix(&mut rng, 5, 9, 3.0);
        assert_eq!(
            matmul_transposed(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_vec(1, 3, vec![0.0; 3]).unwrap();
        let s = softmax_rows(&m, 1.0);
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&m, 1.0);
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // 50-digit evaluation of exp(x_i) / sum exp(x_j)
        let reference = [
            0.289_433_110_394_264_6,
            0.390_693_833_269_815_7,
            0.319_873_056_335_919_67,
        ];
        let m = Matrix::from_vec(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let s = softmax_rows(&m, 1.0);
        for (got, want) in s.data().iter().zip(reference) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn keeptop_examples() {
        let m = Matrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.4, 0.2]]).unwrap();
        let k = keeptop_rows(&m);
        assert_eq!(k.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(k.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn keeptop_rows_each_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(&mut rng, 8, 8, 1.0);
        let k = keeptop_rows(&m);
        for row in k.iter_rows() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let m = Matrix::from_vec(1, 4, vec![3.0; 4]).unwrap();
        let out = layernorm_rows(&m, &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_already_normalized_row() {
        let m = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let out = layernorm_rows(&m, &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((out.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_remeasured_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 1, 13, 10.0);
        let out = layernorm_rows(&m, &[1.0; 13], &[0.0; 13], 1e-12).unwrap();
        let n = 13.0;
        let mean = out.row(0).iter().sum::<f64>() / n;
        let var = out.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_rejects_bad_gain() {
        let m = Matrix::zeros(2, 3);
        assert!(layernorm_rows(&m, &[1.0; 2], &[0.0; 3], 1e-6).is_err());
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_length() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn gelu_shape() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 3.0).abs() < 0.01);
        assert!(gelu(-3.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..12,
            seed in any::<u64>(),
            amp in prop_oneof![Just(1.0), Just(1e3)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols, amp);
            let s = softmax_rows(&m, 1.0);
            for row in s.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn keeptop_is_idempotent(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols, 1.0);
            let once = keeptop_rows(&m);
            prop_assert_eq!(keeptop_rows(&once), once);
        }

        #[test]
        fn kernels_are_bit_deterministic(n in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, n + 1, 2.0);
            let b = random_matrix(&mut rng, n + 1, n, 2.0);
            prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
            prop_assert_eq!(softmax_rows(&a, 0.7), softmax_rows(&a, 0.7));
        }
    }
}
