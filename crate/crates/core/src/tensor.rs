//! Dense row-major 2D tensors with the handful of kernels the model needs.

use crate::scalar::Scalar;

/// Row-major matrix of scalars. Vectors are 1×n or n×1 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn scalar_value(x: S) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a 1×1 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    /// `self @ other`, shapes (m×k)·(k×n).
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = &other.data[p * n..(p + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self @ other.T`, shapes (m×k)·(n×k)ᵀ → m×n.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                out_row[j] = acc;
            }
        }
        out
    }

    /// `self.T @ other`, shapes (k×m)ᵀ·(k×n) → m×n.
    pub fn matmul_tn(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate().take(m) {
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    pub fn add_inplace(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_inplace(&mut self, c: S) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Softmax applied independently to every row, with max subtraction.
    pub fn softmax_rows(&self) -> Tensor<S> {
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_slice(out.row_mut(r));
        }
        out
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum()
    }

    /// Converts element type, rounding through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| T::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

/// In-place softmax over a slice.
pub fn softmax_slice<S: Scalar>(xs: &mut [S]) {
    if xs.is_empty() {
        return;
    }
    let mut max = xs[0];
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax over a slice, returned as a new vector.
pub fn log_softmax_slice<S: Scalar>(xs: &[S]) -> Vec<S> {
    let mut max = xs[0];
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in xs.iter() {
        sum += (x - max).exp();
    }
    let log_z = max + sum.ln();
    xs.iter().map(|&x| x - log_z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_basic() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(3, 4, |r, c| (r * 7 + c) as f64 * 0.35 - 1.0);
        let b = Tensor::from_fn(4, 2, |r, c| (r + c * 3) as f64 * 0.5 - 0.7);
        let plain = a.matmul(&b);
        let via_nt = a.matmul_nt(&b.transpose());
        let via_tn = a.transpose().matmul_tn(&b);
        for i in 0..plain.len() {
            assert!((plain.data()[i] - via_nt.data()[i]).abs() < 1e-12);
            assert!((plain.data()[i] - via_tn.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalizes() {
        let t = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let s = t.softmax_rows();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s.at(0, 2) > s.at(0, 1));
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let xs = vec![0.3f64, -1.2, 2.5, 0.0];
        let ls = log_softmax_slice(&xs);
        let mut sm = xs.clone();
        softmax_slice(&mut sm);
        for i in 0..4 {
            assert!((ls[i] - sm[i].ln()).abs() < 1e-12);
        }
    }
}
