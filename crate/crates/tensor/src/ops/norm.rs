//! Layer normalization and seeded dropout.

use crate::rng::Rng;
use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

impl Tensor {
    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if rank == 0 {
            return Err(TensorError::Dimension("layer_norm needs rank >= 1".into()));
        }
        let f = self.shape()[rank - 1];
        if gamma.shape() != [f] || beta.shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / f;
        let d = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; d.len()];
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * f..(r + 1) * f];
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..f {
                let xh = (row[j] - mu) * istd;
                xhat[r * f + j] = xh;
                data[r * f + j] = gd[j] * xh + bd[j];
            }
        }
        drop(d);
        drop(gd);
        drop(bd);
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let gamma_c = gamma.clone();
        record(&out, &[self, gamma, beta], move |g| {
            let gd = gamma_c.data();
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; gd.len()];
            let mut gbeta = vec![0.0; gd.len()];
            for r in 0..rows {
                let base = r * f;
                let istd = inv_std[r];
                let mut mean_gh = 0.0;
                let mut mean_gh_xh = 0.0;
                for j in 0..f {
                    let gh = g[base + j] * gd[j];
                    mean_gh += gh;
                    mean_gh_xh += gh * xhat[base + j];
                    ggamma[j] += g[base + j] * xhat[base + j];
                    gbeta[j] += g[base + j];
                }
                mean_gh /= f as f64;
                mean_gh_xh /= f as f64;
                for j in 0..f {
                    let gh = g[base + j] * gd[j];
                    gx[base + j] = istd * (gh - mean_gh - xhat[base + j] * mean_gh_xh);
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        });
        Ok(out)
    }

    /// Inverted dropout. In train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; eval mode is
    /// the identity. The mask comes from the counter-based stream for
    /// `key`, so a fixed key reproduces the same mask.
    pub fn dropout(&self, p: f64, train: bool, key: u64) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        if !train || p == 0.0 {
            // Identity with its own node so graph structure is stable.
            return self.mul_scalar(1.0);
        }
        let mut rng = Rng::new(key);
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { scale })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self], move |g| {
            vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as TRng;
    use crate::tensor::DType;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut rng = TRng::new(2);
        let x = Tensor::randn(&[4, 16], 3.0, DType::F64, &mut rng);
        let gamma = Tensor::full(&[16], 1.0, DType::F64);
        let beta = Tensor::zeros(&[16], DType::F64);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        let d = y.data();
        for r in 0..4 {
            let row = &d[r * 16..(r + 1) * 16];
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_seeded_reproducible() {
        let mut rng = TRng::new(3);
        let x = Tensor::randn(&[64], 1.0, DType::F64, &mut rng);
        let a = x.dropout(0.5, true, 77);
        let b = x.dropout(0.5, true, 77);
        let c = x.dropout(0.5, true, 78);
        assert_eq!(a.to_vec(), b.to_vec());
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = TRng::new(4);
        let x = Tensor::randn(&[32], 1.0, DType::F64, &mut rng);
        let y = x.dropout(0.5, false, 1);
        assert_eq!(y.to_vec(), x.to_vec());
    }
}
