use serde::{Deserialize, Serialize};

use super::{Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are matched to trainable
/// parameters by visiting order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p: &mut Param| {
            if !p.trainable {
                return;
            }
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter");
            for j in 0..p.len() {
                let g = p.grad[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p.value[j] = p.value[j] * decay - update as f32;
            }
            idx += 1;
        });
    }
}

pub fn zero_grad<M: Module + ?Sized>(model: &mut M) {
    model.visit_mut("", &mut |_, p| p.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Param);

    impl Module for Quad {
        fn visit(&self, _: &str, f: &mut dyn FnMut(String, &Param)) {
            f("x".into(), &self.0);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f("x".into(), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step has magnitude lr.
        let mut q = Quad(Param::new(vec![2], vec![1.0, -1.0]));
        q.0.grad = vec![3.0, -0.5];
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut q);
        assert!((q.0.value[0] - 0.999).abs() < 1e-6);
        assert!((q.0.value[1] + 0.999).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut q = Quad(Param::new(vec![1], vec![5.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            q.0.grad[0] = 2.0 * q.0.value[0];
            opt.step(&mut q);
        }
        assert!(q.0.value[0].abs() < 0.05);
    }
}
