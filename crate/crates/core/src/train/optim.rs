use crate::model::{Gradients, Matrix, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = || {
            (0..params.len()).map(|i| {
                let s = params.value(i).shape();
                Matrix::zeros(s.0, s.1)
            })
        };
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros().collect(),
            v: zeros().collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            beta1: b1,
            beta2: b2,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for id in 0..params.len() {
            let g = grads.get(id).data();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((p, &gi), mi), vi) in params.value_mut(id).data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
            }
        }
    }
}
