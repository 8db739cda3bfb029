//! Elementwise primitives, all same-shape (no implicit broadcasting).

use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self, other], move |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        });
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self, other], move |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        });
        Ok(out)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let (a, b) = (self.clone(), other.clone());
        record(&out, &[self, other], move |g| {
            let ga = g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect();
            let gb = g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        });
        Ok(out)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a / b)
            .collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let (a, b) = (self.clone(), other.clone());
        record(&out, &[self, other], move |g| {
            let bd = b.data();
            let ad = a.data();
            let ga = g.iter().zip(bd.iter()).map(|(g, b)| g / b).collect();
            let gb = g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            vec![Some(ga), Some(gb)]
        });
        Ok(out)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self], move |g| vec![Some(g.to_vec())]);
        out
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        });
        out
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let x = self.clone();
        record(&out, &[self], move |g| {
            let gi = g
                .iter()
                .zip(x.data().iter())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(gi)]
        });
        out
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let y = out.clone();
        record(&out, &[self], move |g| {
            let gi = g
                .iter()
                .zip(y.data().iter())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            vec![Some(gi)]
        });
        out
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let y = out.clone();
        record(&out, &[self], move |g| {
            let gi = g.iter().zip(y.data().iter()).map(|(g, y)| g * y).collect();
            vec![Some(gi)]
        });
        out
    }

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ln()).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let x = self.clone();
        record(&out, &[self], move |g| {
            let gi = g.iter().zip(x.data().iter()).map(|(g, x)| g / x).collect();
            vec![Some(gi)]
        });
        out
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let x = self.clone();
        record(&out, &[self], move |g| {
            let gi = g
                .iter()
                .zip(x.data().iter())
                .map(|(g, x)| g * sign(*x))
                .collect();
            vec![Some(gi)]
        });
        out
    }

    /// `ln(1 + e^x)`, computed stably. Derivative is the sigmoid.
    pub fn softplus(&self) -> Tensor {
        let data = self.data().iter().map(|&v| stable_softplus(v)).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let x = self.clone();
        record(&out, &[self], move |g| {
            let gi = g
                .iter()
                .zip(x.data().iter())
                .map(|(g, &x)| g * stable_sigmoid(x))
                .collect();
            vec![Some(gi)]
        });
        out
    }

    /// Symmetric log compression `sign(x) * ln(1 + |x|/tau)`.
    ///
    /// Compresses large offsets so near-boundary geometry dominates; the
    /// derivative is `1 / (tau + |x|)`.
    pub fn log_compress(&self, tau: f64) -> Tensor {
        assert!(tau > 0.0);
        let data = self
            .data()
            .iter()
            .map(|&v| sign_nonzero(v) * (1.0 + v.abs() / tau).ln())
            .collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let x = self.clone();
        record(&out, &[self], move |g| {
            let gi = g
                .iter()
                .zip(x.data().iter())
                .map(|(g, x)| g / (tau + x.abs()))
                .collect();
            vec![Some(gi)]
        });
        out
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// For the value (not the grad) of log_compress, sign(0) can be anything
// since ln(1) = 0; keep plain signum semantics away from zero.
fn sign_nonzero(x: f64) -> f64 {
    sign(x)
}
