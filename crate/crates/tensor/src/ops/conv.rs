//! Volumetric kernels: direct 3D convolution, 2x max pooling, and
//! stride-2 transposed convolution for upsampling.
//!
//! Activations are `[C, D, H, W]`; one volume at a time, no batch axis.

use crate::tape::record;
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    in_d: usize,
    in_h: usize,
    in_w: usize,
    out_d: usize,
    out_h: usize,
    out_w: usize,
}

fn out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Direct 3D convolution of `x: [C_in, D, H, W]` with
/// `kernel: [C_out, C_in, k, k, k]`.
pub fn conv3d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    if x.rank() != 4 || kernel.rank() != 5 {
        return Err(TensorError::Dimension(format!(
            "conv3d expects x rank 4 and kernel rank 5, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let k = kernel.shape()[2];
    if k.is_multiple_of(2) || kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(TensorError::Dimension(format!(
            "conv3d kernel must be cubic with odd extent, got {:?}",
            kernel.shape()
        )));
    }
    if stride < 1 {
        return Err(TensorError::Dimension("conv3d stride must be >= 1".into()));
    }
    if kernel.shape()[1] != x.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (in_d, in_h, in_w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_d, out_h, out_w) = match (
        out_extent(in_d, k, stride, padding),
        out_extent(in_h, k, stride, padding),
        out_extent(in_w, k, stride, padding),
    ) {
        (Some(d), Some(h), Some(w)) if d > 0 && h > 0 && w > 0 => (d, h, w),
        _ => {
            return Err(TensorError::Dimension(format!(
                "conv3d output extent non-positive for input {:?}, k={k}, stride={stride}, padding={padding}",
                x.shape()
            )))
        }
    };
    let dims = ConvDims {
        c_in: x.shape()[0],
        c_out: kernel.shape()[0],
        k,
        stride,
        padding,
        in_d,
        in_h,
        in_w,
        out_d,
        out_h,
        out_w,
    };

    let data = conv3d_forward(&x.data(), &kernel.data(), dims);
    let out = Tensor::from_op(data, vec![dims.c_out, out_d, out_h, out_w], x.dtype());
    let (xc, kc) = (x.clone(), kernel.clone());
    record(&out, &[x, kernel], move |g| {
        let (gx, gk) = conv3d_backward(&xc.data(), &kc.data(), g, dims);
        vec![Some(gx), Some(gk)]
    });
    Ok(out)
}

fn conv3d_forward(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.out_d * d.out_h * d.out_w];
    let in_hw = d.in_h * d.in_w;
    let in_chw = d.in_d * in_hw;
    let out_hw = d.out_h * d.out_w;
    let k3 = d.k * d.k * d.k;
    for co in 0..d.c_out {
        for od in 0..d.out_d {
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let mut acc = 0.0;
                    for ci in 0..d.c_in {
                        let wbase = (co * d.c_in + ci) * k3;
                        let xbase = ci * in_chw;
                        for kz in 0..d.k {
                            let iz = (od * d.stride + kz) as isize - d.padding as isize;
                            if iz < 0 || iz >= d.in_d as isize {
                                continue;
                            }
                            for ky in 0..d.k {
                                let iy = (oh * d.stride + ky) as isize - d.padding as isize;
                                if iy < 0 || iy >= d.in_h as isize {
                                    continue;
                                }
                                for kx in 0..d.k {
                                    let ix = (ow * d.stride + kx) as isize - d.padding as isize;
                                    if ix < 0 || ix >= d.in_w as isize {
                                        continue;
                                    }
                                    acc += x[xbase
                                        + iz as usize * in_hw
                                        + iy as usize * d.in_w
                                        + ix as usize]
                                        * w[wbase + (kz * d.k + ky) * d.k + kx];
                                }
                            }
                        }
                    }
                    out[(co * d.out_d + od) * out_hw + oh * d.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

fn conv3d_backward(x: &[f64], w: &[f64], g: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let in_hw = d.in_h * d.in_w;
    let in_chw = d.in_d * in_hw;
    let out_hw = d.out_h * d.out_w;
    let k3 = d.k * d.k * d.k;
    for co in 0..d.c_out {
        for od in 0..d.out_d {
            for oh in 0..d.out_h {
                for ow in 0..d.out_w {
                    let go = g[(co * d.out_d + od) * out_hw + oh * d.out_w + ow];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..d.c_in {
                        let wbase = (co * d.c_in + ci) * k3;
                        let xbase = ci * in_chw;
                        for kz in 0..d.k {
                            let iz = (od * d.stride + kz) as isize - d.padding as isize;
                            if iz < 0 || iz >= d.in_d as isize {
                                continue;
                            }
                            for ky in 0..d.k {
                                let iy = (oh * d.stride + ky) as isize - d.padding as isize;
                                if iy < 0 || iy >= d.in_h as isize {
                                    continue;
                                }
                                for kx in 0..d.k {
                                    let ix = (ow * d.stride + kx) as isize - d.padding as isize;
                                    if ix < 0 || ix >= d.in_w as isize {
                                        continue;
                                    }
                                    let xi = xbase
                                        + iz as usize * in_hw
                                        + iy as usize * d.in_w
                                        + ix as usize;
                                    let wi = wbase + (kz * d.k + ky) * d.k + kx;
                                    gx[xi] += go * w[wi];
                                    gw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 2x2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximum in row-major order.
pub fn max_pool3d(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.rank() != 4 {
        return Err(TensorError::Dimension(format!(
            "max_pool3d expects rank 4, got {:?}",
            x.shape()
        )));
    }
    let (c, in_d, in_h, in_w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if in_d % 2 != 0 || in_h % 2 != 0 || in_w % 2 != 0 {
        return Err(TensorError::Dimension(format!(
            "max_pool3d needs even spatial extents, got {:?}",
            x.shape()
        )));
    }
    let (out_d, out_h, out_w) = (in_d / 2, in_h / 2, in_w / 2);
    let d = x.data();
    let in_hw = in_h * in_w;
    let in_chw = in_d * in_hw;
    let mut data = vec![0.0; c * out_d * out_h * out_w];
    let mut argmax = vec![0usize; data.len()];
    let mut oi = 0;
    for ch in 0..c {
        for od in 0..out_d {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_ix = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let ix = ch * in_chw
                                    + (od * 2 + dz) * in_hw
                                    + (oh * 2 + dy) * in_w
                                    + (ow * 2 + dx);
                                if d[ix] > best {
                                    best = d[ix];
                                    best_ix = ix;
                                }
                            }
                        }
                    }
                    data[oi] = best;
                    argmax[oi] = best_ix;
                    oi += 1;
                }
            }
        }
    }
    drop(d);
    let out = Tensor::from_op(data, vec![c, out_d, out_h, out_w], x.dtype());
    let in_numel = x.numel();
    record(&out, &[x], move |g| {
        let mut gi = vec![0.0; in_numel];
        for (o, &src) in argmax.iter().enumerate() {
            gi[src] += g[o];
        }
        vec![Some(gi)]
    });
    Ok(out)
}

/// Transposed 3D convolution of `x: [C_in, D, H, W]` with
/// `kernel: [C_in, C_out, k, k, k]`; output extent `(in-1)*stride + k`.
pub fn conv_transpose3d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
    if x.rank() != 4 || kernel.rank() != 5 {
        return Err(TensorError::Dimension(format!(
            "conv_transpose3d expects x rank 4 and kernel rank 5, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if kernel.shape()[0] != x.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose3d",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let k = kernel.shape()[2];
    if kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(TensorError::Dimension(format!(
            "conv_transpose3d kernel must be cubic, got {:?}",
            kernel.shape()
        )));
    }
    let (c_in, in_d, in_h, in_w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = kernel.shape()[1];
    let out_d = (in_d - 1) * stride + k;
    let out_h = (in_h - 1) * stride + k;
    let out_w = (in_w - 1) * stride + k;

    let xd = x.data();
    let wd = kernel.data();
    let out_hw = out_h * out_w;
    let out_chw = out_d * out_hw;
    let in_hw = in_h * in_w;
    let k3 = k * k * k;
    let mut data = vec![0.0; c_out * out_chw];
    for ci in 0..c_in {
        for iz in 0..in_d {
            for iy in 0..in_h {
                for ix in 0..in_w {
                    let xv = xd[ci * in_d * in_hw + iz * in_hw + iy * in_w + ix];
                    if xv == 0.0 {
                        continue;
                    }
                    for co in 0..c_out {
                        let wbase = (ci * c_out + co) * k3;
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oz = iz * stride + kz;
                                    let oy = iy * stride + ky;
                                    let ox = ix * stride + kx;
                                    data[co * out_chw + oz * out_hw + oy * out_w + ox] +=
                                        xv * wd[wbase + (kz * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wd);

    let out = Tensor::from_op(data, vec![c_out, out_d, out_h, out_w], x.dtype());
    let (xc, kc) = (x.clone(), kernel.clone());
    record(&out, &[x, kernel], move |g| {
        let xd = xc.data();
        let wd = kc.data();
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        for ci in 0..c_in {
            for iz in 0..in_d {
                for iy in 0..in_h {
                    for ix in 0..in_w {
                        let xi = ci * in_d * in_hw + iz * in_hw + iy * in_w + ix;
                        for co in 0..c_out {
                            let wbase = (ci * c_out + co) * k3;
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let oz = iz * stride + kz;
                                        let oy = iy * stride + ky;
                                        let ox = ix * stride + kx;
                                        let go = g[co * out_chw + oz * out_hw + oy * out_w + ox];
                                        let wi = wbase + (kz * k + ky) * k + kx;
                                        gx[xi] += go * wd[wi];
                                        gw[wi] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gw)]
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::DType;

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[1, 4, 4, 4], 1.0, DType::F64, &mut rng);
        let k = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1, 1], DType::F64).unwrap();
        let y = conv3d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_interior_sums_27() {
        let x = Tensor::full(&[1, 5, 5, 5], 1.0, DType::F64);
        let k = Tensor::full(&[1, 1, 3, 3, 3], 1.0, DType::F64);
        let y = conv3d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        // Every output voxel of an unpadded conv sees a full window.
        assert!(y.to_vec().iter().all(|v| (*v - 27.0).abs() < 1e-12));
    }

    #[test]
    fn matches_six_loop_oracle() {
        let mut rng = Rng::new(7);
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, DType::F64, &mut rng);
        let k = Tensor::randn(&[2, 1, 3, 3, 3], 1.0, DType::F64, &mut rng);
        let y = conv3d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
        let xd = x.data();
        let kd = k.data();
        let yd = y.data();
        for co in 0..2 {
            for od in 0..8usize {
                for oh in 0..8usize {
                    for ow in 0..8usize {
                        let mut acc = 0.0;
                        for kz in 0..3usize {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iz = od as isize + kz as isize - 1;
                                    let iy = oh as isize + ky as isize - 1;
                                    let ix = ow as isize + kx as isize - 1;
                                    if !(0..8).contains(&iz)
                                        || !(0..8).contains(&iy)
                                        || !(0..8).contains(&ix)
                                    {
                                        continue;
                                    }
                                    acc += xd[(iz as usize * 8 + iy as usize) * 8 + ix as usize]
                                        * kd[(co * 3 * 3 * 3) + (kz * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = yd[((co * 8 + od) * 8 + oh) * 8 + ow];
                        assert!((got - acc).abs() < 1e-10, "mismatch {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_output_rejected() {
        let x = Tensor::zeros(&[1, 2, 2, 2], DType::F64);
        let k = Tensor::zeros(&[1, 1, 3, 3, 3], DType::F64);
        assert!(conv3d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn pool_halves_and_takes_max() {
        let x = Tensor::from_vec(
            (0..8).map(|v| v as f64).collect(),
            &[1, 2, 2, 2],
            DType::F64,
        )
        .unwrap();
        let y = max_pool3d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![7.0]);
    }

    #[test]
    fn pool_tie_routes_to_first() {
        use crate::backward;
        let x = Tensor::full(&[1, 2, 2, 2], 3.0, DType::F64);
        x.set_requires_grad(true);
        let loss = max_pool3d(&x).unwrap().sum();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[0], 1.0);
        assert!(g[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn transpose_conv_doubles_extents() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[3, 4, 4, 4], 1.0, DType::F64, &mut rng);
        let k = Tensor::randn(&[3, 2, 2, 2, 2], 0.5, DType::F64, &mut rng);
        let y = conv_transpose3d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
    }

    #[test]
    fn transpose_conv_single_voxel_stamps_kernel() {
        let mut x = vec![0.0; 8];
        x[0] = 2.0; // channel 0, voxel (0,0,0)
        let x = Tensor::from_vec(x, &[1, 2, 2, 2], DType::F64).unwrap();
        let k = Tensor::from_vec(
            (1..=8).map(|v| v as f64).collect(),
            &[1, 1, 2, 2, 2],
            DType::F64,
        )
        .unwrap();
        let y = conv_transpose3d(&x, &k, 2).unwrap();
        let yd = y.to_vec();
        // Kernel stamped at the origin, scaled by 2.
        assert_eq!(yd[0], 2.0);
        assert_eq!(yd[1], 4.0);
        assert_eq!(yd[4], 6.0); // (0,1,0) in a 4x4x4 grid
    }
}
