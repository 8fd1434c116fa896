//! Plain `f64` re-implementation of the network math, used as the
//! finite-difference oracle. Shares no code with the tape.

#![allow(dead_code)]

use fedgan::diffcore::{Activation, MlpSpec, Tensor};

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Linear => x,
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                0.2 * x
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    t.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Forward pass; `params` is `[W1, b1, W2, b2, …]` flattened row-major.
pub fn mlp(spec: &MlpSpec, params: &[Vec<f64>], input: &Rows) -> Rows {
    let dims = spec.layer_dims();
    let mut h = input.clone();
    for (l, &a) in spec.activations().iter().enumerate() {
        let (din, dout) = (dims[l], dims[l + 1]);
        let (w, b) = (&params[2 * l], &params[2 * l + 1]);
        h = h
            .iter()
            .map(|x| {
                (0..dout)
                    .map(|j| {
                        let z: f64 = (0..din).map(|i| x[i] * w[i * dout + j]).sum::<f64>() + b[j];
                        act(a, z)
                    })
                    .collect()
            })
            .collect();
    }
    h
}

pub fn ln_clamped(x: f64) -> f64 {
    x.max(1e-7).ln()
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn d_loss(d_real: &Rows, d_fake: &Rows) -> f64 {
    -mean(d_real.iter().map(|r| ln_clamped(r[0]))) - mean(d_fake.iter().map(|r| ln_clamped(1.0 - r[0])))
}

pub fn g_loss(d_fake: &Rows) -> f64 {
    -mean(d_fake.iter().map(|r| ln_clamped(r[0])))
}

pub fn concat(parts: &[Rows]) -> Rows {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

/// Smallest `|z|` over pre-activations feeding a ReLU or leaky ReLU.
/// Finite differences are only a valid oracle when this exceeds the stencil reach.
pub fn kink_margin(spec: &MlpSpec, params: &[Vec<f64>], input: &Rows) -> f64 {
    let dims = spec.layer_dims();
    let mut h = input.clone();
    let mut margin = f64::INFINITY;
    for (l, &a) in spec.activations().iter().enumerate() {
        let (din, dout) = (dims[l], dims[l + 1]);
        let (w, b) = (&params[2 * l], &params[2 * l + 1]);
        let kinked = matches!(a, Activation::Relu | Activation::LeakyRelu);
        h = h
            .iter()
            .map(|x| {
                (0..dout)
                    .map(|j| {
                        let z: f64 = (0..din).map(|i| x[i] * w[i * dout + j]).sum::<f64>() + b[j];
                        if kinked {
                            margin = margin.min(z.abs());
                        }
                        act(a, z)
                    })
                    .collect()
            })
            .collect();
    }
    margin
}

pub fn params_f64(m: &fedgan::diffcore::Mlp) -> Vec<Vec<f64>> {
    m.params()
        .iter()
        .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
        .collect()
}
