//! Dense row-major matrix storage and the small vector kernels the models need.

use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major dense `f64` matrix. Rows are embedding vectors.
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

    /// Gaussian-initialized matrix, mean 0. Every entry is drawn from the
    /// given generator so runs are reproducible per seed.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in &rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: nrows,
            cols: ncols,
            data,
        }
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// Max L2 norm over rows; 0 for an empty matrix.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| l2_norm(self.row(i)))
            .fold(0.0, f64::max)
    }

    pub fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let cols = self.cols;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (head, tail) = self.data.split_at_mut(hi * cols);
        head[lo * cols..(lo + 1) * cols].swap_with_slice(&mut tail[..cols]);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Elementwise product of two equal-length vectors.
#[inline]
pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[inline]
pub fn l2_norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    l2_norm_sq(a).sqrt()
}

/// Squared Euclidean distance between two equal-length vectors.
#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// In-place softmax with max subtraction, so huge logits cannot overflow.
/// The output always sums to 1 for finite input.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in logits.iter_mut() {
        *x /= total;
    }
}

/// Numerically stable `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    // -ln(1 + e^{-x}) for x >= 0, x - ln(1 + e^{x}) otherwise
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut v = vec![3.5; 4];
        softmax_in_place(&mut v);
        for x in &v {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // logits (ln 2, 0) -> (2/3, 1/3)
        let mut v = vec![2.0_f64.ln(), 0.0];
        softmax_in_place(&mut v);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_no_overflow_on_huge_logits() {
        let mut v = vec![1000.0, 0.0];
        softmax_in_place(&mut v);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] < 1e-12);
    }

    #[test]
    fn log_sigmoid_matches_direct_form() {
        for &x in &[-30.0, -1.0, 0.0, 0.5, 1.0, 30.0] {
            let direct = (1.0 / (1.0 + (-x_as(x)).exp())).ln();
            assert!((log_sigmoid(x) - direct).abs() < 1e-12, "x={x}");
        }
        // extreme values stay finite
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
    }

    fn x_as(x: f64) -> f64 {
        x
    }

    #[test]
    fn matrix_row_access_and_swap() {
        let mut m = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(m.row(1), &[3.0, 4.0]);
        m.swap_rows(0, 2);
        assert_eq!(m.row(0), &[5.0, 6.0]);
        assert_eq!(m.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Matrix::randn(4, 3, 0.01, &mut StdRng::seed_from_u64(7));
        let b = Matrix::randn(4, 3, 0.01, &mut StdRng::seed_from_u64(7));
        assert_eq!(a, b);
    }
}
