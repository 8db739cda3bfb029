//! 2D matrix product and transpose.

use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tensor {
    /// Standard matrix product of `[m,k] x [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        let out = Tensor::from_op(data, vec![m, n], self.dtype());
        let (a, b) = (self.clone(), other.clone());
        record(&out, &[self, other], move |g| {
            // dA = g . B^T, dB = A^T . g
            let bt = transpose_raw(&b.data(), k, n);
            let ga = matmul_raw(g, &bt, m, n, k);
            let at = transpose_raw(&a.data(), m, k);
            let gb = matmul_raw(&at, g, k, m, n);
            vec![Some(ga), Some(gb)]
        });
        Ok(out)
    }

    pub fn transpose2d(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Dimension(format!(
                "transpose2d needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(&self.data(), r, c);
        let out = Tensor::from_op(data, vec![c, r], self.dtype());
        record(&out, &[self], move |g| vec![Some(transpose_raw(g, c, r))]);
        Ok(out)
    }
}
