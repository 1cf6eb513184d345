//! SGD with momentum for network weights, Adam with decoupled weight decay
//! for the sampling logits.

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Heavy-ball SGD with L2 decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in place with learning rate `lr`. Tensors without a
    /// gradient buffer are left untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for (p, vel) in params.into_iter().zip(&mut self.velocity) {
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for ((w, g), v) in data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let d = g + weight_decay * *w;
                *v = momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam over a flat parameter vector. Non-finite entries (pinned `-inf`
/// logits) are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            if !params[i].is_finite() {
                continue;
            }
            let g = grad[i];
            params[i] -= c.lr * c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}

/// `lr0 * (1 + cos(pi * epoch / epochs)) / 2`: `lr0` at epoch 0, zero at
/// `epoch == epochs`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let frac = epoch.min(epochs) as f64 / epochs as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}
