//! Adam and AdamW with per-group learning rates.

use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..Default::default()
        }
    }
}

pub struct ParamGroup {
    pub params: Vec<Tensor>,
    pub lr: f64,
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam/AdamW over one or more parameter groups. A group with lr 0 is
/// skipped entirely, so freeze/warmup schedules can drive `set_lr`
/// without touching parameter sets.
pub struct Adam {
    cfg: AdamConfig,
    groups: Vec<ParamGroup>,
    state: HashMap<u64, Moments>,
    t: u64,
}

impl Adam {
    pub fn new(groups: Vec<ParamGroup>, cfg: AdamConfig) -> Adam {
        for g in &groups {
            for p in &g.params {
                p.set_requires_grad(true);
            }
        }
        Adam {
            cfg,
            groups,
            state: HashMap::new(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, group: usize, lr: f64) {
        self.groups[group].lr = lr;
    }

    pub fn lr(&self, group: usize) -> f64 {
        self.groups[group].lr
    }

    pub fn zero_grad(&self) {
        for g in &self.groups {
            for p in &g.params {
                p.zero_grad();
            }
        }
    }

    /// One update step using the gradients currently stored on the params.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for group in &self.groups {
            if group.lr == 0.0 {
                continue;
            }
            for p in &group.params {
                let Some(grad) = p.grad() else { continue };
                let slot = self.state.entry(p.id()).or_insert_with(|| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                });
                let mut data = p.to_vec();
                for i in 0..data.len() {
                    let g = grad[i];
                    slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                    slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    if self.cfg.weight_decay > 0.0 {
                        data[i] -= group.lr * self.cfg.weight_decay * data[i];
                    }
                    data[i] -= group.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                }
                p.set_data(data);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use crate::{backward, clear_tape};

    fn quadratic_step(opt: &mut Adam, p: &Tensor, target: f64) -> f64 {
        opt.zero_grad();
        let t = Tensor::full(&[1], target, DType::F64);
        let d = p.sub(&t).unwrap();
        let loss = d.mul(&d).unwrap().sum();
        let v = loss.item();
        backward(&loss).unwrap();
        opt.step();
        v
    }

    #[test]
    fn adam_descends_quadratic() {
        let p = Tensor::full(&[1], 5.0, DType::F64);
        let mut opt = Adam::new(
            vec![ParamGroup {
                params: vec![p.clone()],
                lr: 0.1,
            }],
            AdamConfig::default(),
        );
        let first = quadratic_step(&mut opt, &p, 1.0);
        let mut last = first;
        for _ in 0..200 {
            last = quadratic_step(&mut opt, &p, 1.0);
        }
        assert!(last < 1e-3 * first, "loss {first} -> {last}");
        clear_tape();
    }

    #[test]
    fn zero_lr_group_is_frozen() {
        let p = Tensor::full(&[2], 3.0, DType::F64);
        let q = Tensor::full(&[2], 3.0, DType::F64);
        let mut opt = Adam::new(
            vec![
                ParamGroup {
                    params: vec![p.clone()],
                    lr: 0.0,
                },
                ParamGroup {
                    params: vec![q.clone()],
                    lr: 0.1,
                },
            ],
            AdamConfig::default(),
        );
        opt.zero_grad();
        let loss = p.sum().add(&q.sum()).unwrap();
        backward(&loss).unwrap();
        opt.step();
        assert_eq!(p.to_vec(), vec![3.0, 3.0]);
        assert_ne!(q.to_vec(), vec![3.0, 3.0]);
        clear_tape();
    }

    #[test]
    fn single_step_matches_formula() {
        // One Adam step from zero moments: update = lr * g/(|g|) modulo eps.
        let p = Tensor::full(&[1], 0.0, DType::F64);
        let mut opt = Adam::new(
            vec![ParamGroup {
                params: vec![p.clone()],
                lr: 0.5,
            }],
            AdamConfig::default(),
        );
        opt.zero_grad();
        let loss = p.mul_scalar(3.0).sum(); // grad = 3
        backward(&loss).unwrap();
        opt.step();
        let expected = -0.5 * 3.0 / (3.0 + 1e-8);
        assert!((p.to_vec()[0] - expected).abs() < 1e-12);
        clear_tape();
    }
}
