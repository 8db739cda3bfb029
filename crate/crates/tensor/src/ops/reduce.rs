//! Reductions and normalized exponentials.

use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

impl Tensor {
    /// Sum of all elements, rank-0 output.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let out = Tensor::from_op(vec![s], Vec::new(), self.dtype());
        let n = self.numel();
        record(&out, &[self], move |g| vec![Some(vec![g[0]; n])]);
        out
    }

    /// Mean of all elements, rank-0 output.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.data().iter().sum();
        let out = Tensor::from_op(vec![s / n as f64], Vec::new(), self.dtype());
        record(&out, &[self], move |g| vec![Some(vec![g[0] / n as f64; n])]);
        out
    }

    /// Per-row mean of a `[R, C]` tensor, producing `[R]`.
    pub fn row_mean(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Dimension(format!(
                "row_mean needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let data: Vec<f64> = (0..r)
            .map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        drop(d);
        let out = Tensor::from_op(data, vec![r], self.dtype());
        record(&out, &[self], move |g| {
            let mut gi = vec![0.0; r * c];
            for i in 0..r {
                let v = g[i] / c as f64;
                for j in 0..c {
                    gi[i * c + j] = v;
                }
            }
            vec![Some(gi)]
        });
        Ok(out)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let (outer, lane, inner) = lane_split(self.shape(), axis)?;
        let d = self.data();
        let mut data = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..lane {
                    m = m.max(d[at(l)]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    let e = (d[at(l)] - m).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..lane {
                    data[at(l)] /= z;
                }
            }
        }
        drop(d);
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let y = out.clone();
        record(&out, &[self], move |g| {
            let yd = y.data();
            let mut gi = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * lane + l) * inner + i;
                    let mut dot = 0.0;
                    for l in 0..lane {
                        dot += g[at(l)] * yd[at(l)];
                    }
                    for l in 0..lane {
                        gi[at(l)] = yd[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        });
        Ok(out)
    }

    /// Max-stabilized log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let (outer, lane, inner) = lane_split(self.shape(), axis)?;
        let d = self.data();
        let mut data = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..lane {
                    m = m.max(d[at(l)]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    z += (d[at(l)] - m).exp();
                }
                let lse = m + z.ln();
                for l in 0..lane {
                    data[at(l)] = d[at(l)] - lse;
                }
            }
        }
        drop(d);
        let out = Tensor::from_op(data, self.shape().to_vec(), self.dtype());
        let y = out.clone();
        record(&out, &[self], move |g| {
            let yd = y.data();
            let mut gi = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * lane + l) * inner + i;
                    let mut gsum = 0.0;
                    for l in 0..lane {
                        gsum += g[at(l)];
                    }
                    for l in 0..lane {
                        gi[at(l)] = g[at(l)] - yd[at(l)].exp() * gsum;
                    }
                }
            }
            vec![Some(gi)]
        });
        Ok(out)
    }
}

fn lane_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, lane, inner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::DType;

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::from_vec(vec![3.0; 4], &[4], DType::F64).unwrap();
        let y = x.softmax(0).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.5, 0.0], &[4], DType::F64).unwrap();
        let y1 = x.softmax(0).unwrap();
        let y2 = x.add_scalar(17.5).softmax(0).unwrap();
        for (a, b) in y1.to_vec().iter().zip(y2.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_analytic_two_point() {
        let x = Tensor::from_vec(vec![0.0, 3.0f64.ln()], &[2], DType::F64).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_across_magnitudes() {
        let mut rng = Rng::new(5);
        for &scale in &[1e-3, 1.0, 1e3] {
            let x = Tensor::randn(&[6, 9], scale, DType::F64, &mut rng);
            let y = x.softmax(1).unwrap();
            let d = y.data();
            for r in 0..6 {
                let s: f64 = d[r * 9..(r + 1) * 9].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "scale {scale} row sum {s}");
                assert!(d[r * 9..(r + 1) * 9].iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let mut rng = Rng::new(8);
        let x = Tensor::randn(&[3, 5], 2.0, DType::F64, &mut rng);
        let a = x.softmax(1).unwrap();
        let b = x.log_softmax(1).unwrap();
        for (p, lp) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((p.ln() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mid_axis() {
        let mut rng = Rng::new(13);
        let x = Tensor::randn(&[2, 4, 3], 1.0, DType::F64, &mut rng);
        let y = x.softmax(1).unwrap();
        let d = y.data();
        for o in 0..2 {
            for i in 0..3 {
                let mut s = 0.0;
                for l in 0..4 {
                    s += d[(o * 4 + l) * 3 + i];
                }
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
