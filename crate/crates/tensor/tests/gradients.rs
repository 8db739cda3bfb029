//! Finite-difference verification for every differentiable primitive.

use voxdet_tensor::gradcheck::check_gradients;
use voxdet_tensor::ops::{concat, conv3d, conv_transpose3d, max_pool3d};
use voxdet_tensor::rng::Rng;
use voxdet_tensor::{DType, Tensor};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

fn assert_grads(params: &[Tensor], f: impl FnMut() -> Tensor) {
    let report = check_gradients(params, f, STEP, FLOOR);
    assert!(
        report.max_rel_err <= REL_TOL,
        "gradcheck failed: {report:?}"
    );
    assert!(report.checked > 0, "nothing checked: {report:?}");
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = Rng::new(101);
    let a = Tensor::randn(&[3, 4], 1.0, DType::F64, &mut rng);
    let b = Tensor::randn(&[3, 4], 1.0, DType::F64, &mut rng).add_scalar(3.0); // keep divisor away from 0
    for op in 0..4 {
        let (ac, bc) = (a.clone(), b.clone());
        assert_grads(&[a.clone(), b.clone()], move || {
            let y = match op {
                0 => ac.add(&bc).unwrap(),
                1 => ac.sub(&bc).unwrap(),
                2 => ac.mul(&bc).unwrap(),
                _ => ac.div(&bc).unwrap(),
            };
            y.mul(&y).unwrap().mean()
        });
    }
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = Rng::new(102);
    // Positive inputs so log is defined; relu/abs kinks avoided by the
    // magnitude floor plus generic values.
    let x = Tensor::randn(&[2, 5], 0.5, DType::F64, &mut rng).add_scalar(2.0);
    for op in 0..7 {
        let xc = x.clone();
        assert_grads(std::slice::from_ref(&x), move || {
            let y = match op {
                0 => xc.relu(),
                1 => xc.sigmoid(),
                2 => xc.exp(),
                3 => xc.log(),
                4 => xc.abs(),
                5 => xc.softplus(),
                _ => xc.log_compress(0.1),
            };
            y.mul(&y).unwrap().mean()
        });
    }
}

#[test]
fn matmul_and_transpose() {
    let mut rng = Rng::new(103);
    let a = Tensor::randn(&[3, 4], 1.0, DType::F64, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, DType::F64, &mut rng);
    let (ac, bc) = (a.clone(), b.clone());
    assert_grads(&[a, b], move || {
        let y = ac.matmul(&bc).unwrap().transpose2d().unwrap();
        y.mul(&y).unwrap().sum()
    });
}

#[test]
fn reductions_and_softmax() {
    let mut rng = Rng::new(104);
    let x = Tensor::randn(&[4, 6], 1.5, DType::F64, &mut rng);
    let xc = x.clone();
    assert_grads(std::slice::from_ref(&x), move || {
        xc.softmax(1).unwrap().log().neg().mean()
    });
    let xc = x.clone();
    assert_grads(std::slice::from_ref(&x), move || {
        let y = xc.log_softmax(1).unwrap();
        y.mul(&y).unwrap().sum()
    });
    let xc = x.clone();
    assert_grads(std::slice::from_ref(&x), move || {
        let r = xc.row_mean().unwrap();
        r.mul(&r).unwrap().sum()
    });
}

#[test]
fn structural_ops() {
    let mut rng = Rng::new(105);
    let a = Tensor::randn(&[2, 3, 4], 1.0, DType::F64, &mut rng);
    let b = Tensor::randn(&[2, 2, 4], 1.0, DType::F64, &mut rng);
    let (ac, bc) = (a.clone(), b.clone());
    assert_grads(&[a, b], move || {
        let joined = concat(&[&ac, &bc], 1).unwrap();
        let sliced = joined.slice(1, 1, 3).unwrap();
        let flat = sliced.reshape(&[2, 12]).unwrap();
        flat.mul(&flat).unwrap().mean()
    });
}

#[test]
fn conv3d_gradients() {
    let mut rng = Rng::new(106);
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, DType::F64, &mut rng);
    let k = Tensor::randn(&[3, 2, 3, 3, 3], 0.5, DType::F64, &mut rng);
    let (xc, kc) = (x.clone(), k.clone());
    assert_grads(&[x, k], move || {
        let y = conv3d(&xc, &kc, 1, 1).unwrap();
        y.mul(&y).unwrap().mean()
    });
    // Strided, unpadded variant.
    let mut rng = Rng::new(107);
    let x = Tensor::randn(&[1, 5, 5, 5], 1.0, DType::F64, &mut rng);
    let k = Tensor::randn(&[2, 1, 3, 3, 3], 0.5, DType::F64, &mut rng);
    let (xc, kc) = (x.clone(), k.clone());
    assert_grads(&[x, k], move || {
        let y = conv3d(&xc, &kc, 2, 0).unwrap();
        y.mul(&y).unwrap().sum()
    });
}

#[test]
fn pooling_and_transposed_conv_gradients() {
    let mut rng = Rng::new(108);
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, DType::F64, &mut rng);
    let xc = x.clone();
    assert_grads(&[x], move || {
        let y = max_pool3d(&xc).unwrap();
        y.mul(&y).unwrap().sum()
    });
    let x = Tensor::randn(&[2, 3, 3, 3], 1.0, DType::F64, &mut rng);
    let k = Tensor::randn(&[2, 2, 2, 2, 2], 0.5, DType::F64, &mut rng);
    let (xc, kc) = (x.clone(), k.clone());
    assert_grads(&[x, k], move || {
        let y = conv_transpose3d(&xc, &kc, 2).unwrap();
        y.mul(&y).unwrap().mean()
    });
}

#[test]
fn norm_and_bias_gradients() {
    let mut rng = Rng::new(109);
    let x = Tensor::randn(&[3, 8], 1.0, DType::F64, &mut rng);
    let gamma = Tensor::rand_uniform(&[8], 0.5, 1.5, DType::F64, &mut rng);
    let beta = Tensor::randn(&[8], 0.3, DType::F64, &mut rng);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    assert_grads(&[x, gamma, beta], move || {
        let y = xc.layer_norm(&gc, &bc, 1e-5).unwrap();
        y.mul(&y).unwrap().mean()
    });

    let x = Tensor::randn(&[4, 3], 1.0, DType::F64, &mut rng);
    let b = Tensor::randn(&[3], 1.0, DType::F64, &mut rng);
    let (xc, bc) = (x.clone(), b.clone());
    assert_grads(&[x, b], move || {
        let y = xc.add_bias_rows(&bc).unwrap();
        y.mul(&y).unwrap().sum()
    });

    let x = Tensor::randn(&[3, 2, 2, 2], 1.0, DType::F64, &mut rng);
    let b = Tensor::randn(&[3], 1.0, DType::F64, &mut rng);
    let (xc, bc) = (x.clone(), b.clone());
    assert_grads(&[x, b], move || {
        let y = xc.add_bias_channels(&bc).unwrap();
        y.mul(&y).unwrap().sum()
    });
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let mut rng = Rng::new(110);
    let x = Tensor::randn(&[6, 6], 1.0, DType::F64, &mut rng);
    let xc = x.clone();
    assert_grads(&[x], move || {
        let y = xc.dropout(0.5, true, 12345);
        y.mul(&y).unwrap().mean()
    });
}

#[test]
fn offsets_outer_gradients() {
    let mut rng = Rng::new(111);
    let verts = Tensor::randn(&[4, 3], 1.0, DType::F64, &mut rng);
    let pos = Tensor::randn(&[5, 3], 1.0, DType::F64, &mut rng);
    let (vc, pc) = (verts.clone(), pos.clone());
    assert_grads(&[verts, pos], move || {
        let d = vc.offsets_to(&pc).unwrap();
        d.mul(&d).unwrap().mean()
    });
}

#[test]
fn determinism_same_seed_bitwise() {
    let run = || {
        let mut rng = Rng::new(500);
        let x = Tensor::randn(&[4, 4], 1.0, DType::F64, &mut rng);
        let w = Tensor::randn(&[4, 4], 1.0, DType::F64, &mut rng);
        w.set_requires_grad(true);
        let y = x.matmul(&w).unwrap().sigmoid().softmax(1).unwrap();
        let loss = y.log().neg().mean();
        voxdet_tensor::backward(&loss).unwrap();
        (loss.item(), w.grad().unwrap())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
