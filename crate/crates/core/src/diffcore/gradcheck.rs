//! Finite-difference gradient checking.

use super::mlp::ParamTensor;
use super::tape::{Tape, Var};
use super::Result;

/// Compares tape gradients against centered differences of a 64-bit reference.
///
/// `analytic` records the loss on a tape from the parameter leaves.
/// `reference` evaluates the same function in `f64` from plain parameter
/// vectors; it is the oracle and must not share the tape code path.
///
/// The numeric side Richardson-extrapolates two centered differences,
/// `(4·D(eps/2) - D(eps)) / 3` with `D(h) = (f(x+h) - f(x-h)) / 2h`. This is
/// fourth-order accurate while never probing further than `eps` from `x`,
/// which keeps piecewise-linear activations on one side of their kink. The
/// plain two-point rule's `O(eps²)` truncation alone exceeds `1e-3` relative
/// error on near-zero gradient entries at `eps = 1e-3`.
///
/// Returns the max over all entries of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<A, R>(analytic: A, reference: R, params: &[ParamTensor], eps: f64) -> Result<f64>
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let loss = analytic(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut point: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut worst = 0.0f64;
    for (i, &leaf) in leaves.iter().enumerate() {
        let a = grads.wrt_f64(&tape, leaf);
        for (j, &ga) in a.iter().enumerate() {
            let orig = point[i][j];
            let mut at = |offset: f64| {
                point[i][j] = orig + offset;
                let v = reference(&point);
                point[i][j] = orig;
                v
            };
            let wide = (at(eps) - at(-eps)) / (2.0 * eps);
            let narrow = (at(eps / 2.0) - at(-eps / 2.0)) / eps;
            let gn = (4.0 * narrow - wide) / 3.0;
            let err = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
