//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Optimizer state for one decayed parameter buffer plus one undecayed scalar.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    params: Moments,
    scalar: Moments,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self {
            cfg,
            params: Moments::new(n_params),
            scalar: Moments::new(1),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `params` are decayed; `scalar` is not.
    pub fn step(&mut self, lr: f64, params: &mut [f64], grads: &[f64], scalar: &mut f64, scalar_grad: f64) {
        assert_eq!(params.len(), grads.len(), "parameter / gradient length mismatch");
        assert_eq!(params.len(), self.params.m.len(), "optimizer built for a different model");
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);

        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: f64| {
            *p -= lr * decay * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
        };

        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.params.m.iter_mut())
            .zip(self.params.v.iter_mut())
        {
            update(p, g, m, v, c.weight_decay);
        }
        update(scalar, scalar_grad, &mut self.scalar.m[0], &mut self.scalar.v[0], 0.0);
    }
}

/// `base * 0.5 * (1 + cos(pi * step / total))`, no warmup, floor 0.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
