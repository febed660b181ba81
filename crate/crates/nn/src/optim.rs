//! First-order optimizers over flat parameter views.

use crate::layer::ParamView;
use crate::net::Grads;

/// Adam with decoupled weight decay. Decay is applied to tensors of rank
/// ≥ 2 only (weights), the common convention that leaves norms and biases
/// unregularized.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update at `lr * lr_scale`.
    pub fn step(&mut self, params: &mut [ParamView], grads: &Grads, lr_scale: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * lr_scale;
        for (i, p) in params.iter_mut().enumerate() {
            let g = match &grads.slots[i] {
                Some(g) => g,
                None => continue,
            };
            let gs = g.as_slice().expect("contiguous grad");
            let decay = if p.shape.len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data.iter_mut().enumerate() {
                let gj = gs[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain Adam over a single raw tensor; used for pixel-space optimization.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, data: &mut [f64], grad: &[f64]) {
        assert_eq!(data.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for j in 0..data.len() {
            let gj = grad[j];
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * gj;
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * gj * gj;
            let mhat = self.m[j] / bc1;
            let vhat = self.v[j] / bc2;
            data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// SGD with classical momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, buf: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [ParamView], grads: &Grads, lr_scale: f64) {
        if self.buf.is_empty() {
            self.buf = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        let lr = self.lr * lr_scale;
        for (i, p) in params.iter_mut().enumerate() {
            let g = match &grads.slots[i] {
                Some(g) => g,
                None => continue,
            };
            let gs = g.as_slice().expect("contiguous grad");
            let buf = &mut self.buf[i];
            for (j, w) in p.data.iter_mut().enumerate() {
                let gj = gs[j] + self.weight_decay * *w;
                buf[j] = self.momentum * buf[j] + gj;
                *w -= lr * buf[j];
            }
        }
    }
}
