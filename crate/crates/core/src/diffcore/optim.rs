//! Optimizers. Both skip `trainable = false` tensors and zero every gradient after a step.

use super::mlp::ParamTensor;

pub fn sgd_step(params: &mut [ParamTensor], lr: f32) {
    for p in params.iter_mut() {
        if p.trainable {
            for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w = (*w as f64 - lr as f64 * g as f64) as f32;
            }
        }
        p.zero_grad();
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter list.
///
/// Moments are lazily sized on the first step and indexed like the parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moments for parameter `i`, if any step has touched it.
    pub fn moments(&self, i: usize) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(i)?.as_slice(), self.v.get(i)?.as_slice()))
    }
}

pub fn adam_step(params: &mut [ParamTensor], cfg: &AdamConfig, state: &mut AdamState) {
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if p.trainable {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g as f64;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = (*w as f64 - cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
            }
        }
        p.zero_grad();
    }
}
