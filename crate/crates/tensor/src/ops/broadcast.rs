//! The two sanctioned broadcast forms (per-row bias, per-channel bias)
//! plus the pairwise offset table used by the position encoding.

use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

impl Tensor {
    /// `[R, C] + [C]`: add `bias` to every row.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || bias.shape() != [self.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_rows",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let bd = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % c])
            .collect();
        drop(bd);
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self, bias], move |g| {
            let mut gb = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    gb[j] += g[i * c + j];
                }
            }
            vec![Some(g.to_vec()), Some(gb)]
        });
        Ok(out)
    }

    /// `[C, ...] + [C]`: add one bias value per leading-axis channel.
    pub fn add_bias_channels(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() < 1 || bias.shape() != [self.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_channels",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let c = self.shape()[0];
        let inner = self.numel() / c;
        let bd = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i / inner])
            .collect();
        drop(bd);
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        record(&out, &[self, bias], move |g| {
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                gb[ch] = g[ch * inner..(ch + 1) * inner].iter().sum();
            }
            vec![Some(g.to_vec()), Some(gb)]
        });
        Ok(out)
    }

    /// Pairwise offsets `out[k, n, :] = positions[n, :] - self[k, :]`
    /// for `self: [K, 3]` and `positions: [N, 3]`.
    pub fn offsets_to(&self, positions: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || positions.rank() != 2 || self.shape()[1] != positions.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "offsets_to",
                lhs: self.shape().to_vec(),
                rhs: positions.shape().to_vec(),
            });
        }
        let (k, c) = (self.shape()[0], self.shape()[1]);
        let n = positions.shape()[0];
        let sd = self.data();
        let pd = positions.data();
        let mut data = vec![0.0; k * n * c];
        for ki in 0..k {
            for ni in 0..n {
                for ci in 0..c {
                    data[(ki * n + ni) * c + ci] = pd[ni * c + ci] - sd[ki * c + ci];
                }
            }
        }
        drop(sd);
        drop(pd);
        let out = Tensor::from_op(data, vec![k, n, c], self.dtype());
        record(&out, &[self, positions], move |g| {
            let mut gs = vec![0.0; k * c];
            let mut gp = vec![0.0; n * c];
            for ki in 0..k {
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[(ki * n + ni) * c + ci];
                        gs[ki * c + ci] -= gv;
                        gp[ni * c + ci] += gv;
                    }
                }
            }
            vec![Some(gs), Some(gp)]
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use crate::{backward, clear_tape};

    #[test]
    fn bias_rows_adds_per_column() {
        let x = Tensor::zeros(&[2, 3], DType::F64);
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3], DType::F64).unwrap();
        let y = x.add_bias_rows(&b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bias_channels_grad_sums_spatial() {
        let x = Tensor::zeros(&[2, 2, 1, 1], DType::F64);
        let b = Tensor::from_vec(vec![1.0, -1.0], &[2], DType::F64).unwrap();
        b.set_requires_grad(true);
        let loss = x.add_bias_channels(&b).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
        clear_tape();
    }

    #[test]
    fn offsets_outer_matches_direct_subtraction() {
        let v = Tensor::from_vec(vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0], &[2, 3], DType::F64).unwrap();
        let p = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[1, 3], DType::F64).unwrap();
        let out = v.offsets_to(&p).unwrap();
        assert_eq!(out.shape(), &[2, 1, 3]);
        assert_eq!(out.to_vec(), vec![10.0, 20.0, 30.0, 9.0, 18.0, 27.0]);
    }
}
