//! Structural ops: reshape (a view-copy), slice, concat.

use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

impl Tensor {
    /// Same data, new extents. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::DataLength {
                len: self.numel(),
                shape: shape.to_vec(),
            });
        }
        let out = Tensor::from_op(self.to_vec(), shape.to_vec(), self.dtype());
        record(&out, &[self], move |g| vec![Some(g.to_vec())]);
        Ok(out)
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        if start + len > self.shape()[axis] || len == 0 {
            return Err(TensorError::Dimension(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;

        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let in_lane = in_shape[axis];

        let d = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_lane + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        drop(d);
        let out = Tensor::from_op(data, out_shape, self.dtype());
        let in_numel = self.numel();
        record(&out, &[self], move |g| {
            let mut gi = vec![0.0; in_numel];
            for o in 0..outer {
                let dst = (o * in_lane + start) * inner;
                let src = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gi)]
        });
        Ok(out)
    }
}

impl Tensor {
    /// Gather rows of a `[R, C]` tensor by index (duplicates allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Dimension(format!(
                "select_rows needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::Dimension(format!(
                "select_rows index {bad} out of range for {r} rows"
            )));
        }
        let d = self.data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        drop(d);
        let out = Tensor::from_op(data, vec![indices.len(), c], self.dtype());
        let ix = indices.to_vec();
        record(&out, &[self], move |g| {
            let mut gi = vec![0.0; r * c];
            for (row, &i) in ix.iter().enumerate() {
                for j in 0..c {
                    gi[i * c + j] += g[row * c + j];
                }
            }
            vec![Some(gi)]
        });
        Ok(out)
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0];
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    let mut out_shape = first.shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != rank {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (d, (a, b)) in first.shape().iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let lanes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

    let mut data = vec![0.0; out_shape.iter().product()];
    let mut offset = 0;
    for (p, &lane) in parts.iter().zip(&lanes) {
        let d = p.data();
        for o in 0..outer {
            let src = o * lane * inner;
            let dst = (o * axis_total + offset) * inner;
            data[dst..dst + lane * inner].copy_from_slice(&d[src..src + lane * inner]);
        }
        offset += lane;
    }

    let out = Tensor::from_op(data, out_shape, first.dtype());
    let refs: Vec<&Tensor> = parts.to_vec();
    let lanes_bw = lanes.clone();
    record(&out, &refs, move |g| {
        let mut grads = Vec::with_capacity(lanes_bw.len());
        let mut offset = 0;
        for &lane in &lanes_bw {
            let mut gi = vec![0.0; outer * lane * inner];
            for o in 0..outer {
                let src = (o * axis_total + offset) * inner;
                let dst = o * lane * inner;
                gi[dst..dst + lane * inner].copy_from_slice(&g[src..src + lane * inner]);
            }
            grads.push(Some(gi));
            offset += lane;
        }
        grads
    });
    Ok(out)
}
