//! Seeded gradient-check scenarios. Each returns the worst relative error
//! over its instances.

#![allow(dead_code)]

use super::reference as oracle;
use fedgan::diffcore::{grad_check, Activation, Mlp, MlpSpec, ParamTensor, Rng, Tape, Tensor};
use fedgan::gan::{d_loss_on_tape, g_loss_on_tape, sample_noise};

pub const EPS: f64 = 1e-3;
pub const INSTANCES: u64 = 20;
/// Minimum distance of any ReLU-family pre-activation from its kink. Well
/// above the largest shift a perturbation of `EPS` can cause here.
pub const KINK_MARGIN: f64 = 0.05;

/// Builds instances from successive keys until one is at least `KINK_MARGIN`
/// away from every kink. Smooth activations accept the first draw.
pub fn smooth_instance<T>(seed: u64, build: impl Fn(u64) -> T, margin: impl Fn(&T) -> f64) -> T {
    (0..1000)
        .map(|k| build(seed + 1000 * k))
        .find(|inst| margin(inst) > KINK_MARGIN)
        .expect("no kink-free instance")
}

pub fn net(dims: &[usize], acts: &[Activation], seed: u64) -> Mlp {
    let spec = MlpSpec::new(dims.to_vec(), acts.to_vec()).unwrap();
    let mut m = Mlp::init(spec, &mut Rng::new(seed, 1));
    // Non-zero biases so every term of the bias gradient is exercised.
    let mut rng = Rng::new(seed, 2);
    for p in m.params_mut() {
        if p.value.shape().len() == 1 {
            p.value.data_mut().iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
        }
    }
    m
}

fn diff_only(e: fedgan::Error) -> fedgan::diffcore::DiffError {
    match e {
        fedgan::Error::Diff(e) => e,
        other => panic!("{other}"),
    }
}

/// `sum(y²)` through a 3-5-2 net with `act` on both layers, batch 4.
pub fn squared_loss(act: Activation) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let (m, x) = smooth_instance(
                seed,
                |key| (net(&[3, 5, 2], &[act, act], key), sample_noise(4, 3, &mut Rng::new(key, 3))),
                |(m, x)| oracle::kink_margin(m.spec(), &oracle::params_f64(m), &oracle::rows(x)),
            );
            let xr = oracle::rows(&x);
            let spec = m.spec().clone();
            grad_check(
                |t: &mut Tape, p| {
                    let xv = t.leaf(x.clone());
                    let y = m.forward(t, p, xv)?;
                    let sq = t.square(y)?;
                    t.sum(sq)
                },
                |p| oracle::mlp(&spec, p, &xr).iter().flatten().map(|v| v * v).sum(),
                m.params(),
                EPS,
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

/// `mean(y)` through a two-layer 4-8-3 net, `hidden` then linear, batch 4.
pub fn mean_loss(hidden: Activation) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let (m, x) = smooth_instance(
                seed,
                |key| {
                    (
                        net(&[4, 8, 3], &[hidden, Activation::Linear], key),
                        sample_noise(4, 4, &mut Rng::new(key, 3)),
                    )
                },
                |(m, x)| oracle::kink_margin(m.spec(), &oracle::params_f64(m), &oracle::rows(x)),
            );
            let xr = oracle::rows(&x);
            let spec = m.spec().clone();
            grad_check(
                |t, p| {
                    let xv = t.leaf(x.clone());
                    let y = m.forward(t, p, xv)?;
                    t.mean(y)
                },
                |p| oracle::mean(oracle::mlp(&spec, p, &xr).into_iter().flatten()),
                m.params(),
                EPS,
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

/// Discriminator loss of a 2-6-1 net, `hidden` then sigmoid, batch 5.
pub fn discriminator_loss(hidden: Activation) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let (d, real, fake) = smooth_instance(
                seed,
                |key| {
                    (
                        net(&[2, 6, 1], &[hidden, Activation::Sigmoid], key),
                        sample_noise(5, 2, &mut Rng::new(key, 4)),
                        sample_noise(5, 2, &mut Rng::new(key, 5)),
                    )
                },
                |(d, r, f)| {
                    let pd = oracle::params_f64(d);
                    let m = |x: &Tensor| oracle::kink_margin(d.spec(), &pd, &oracle::rows(x));
                    m(r).min(m(f))
                },
            );
            let (rr, fr) = (oracle::rows(&real), oracle::rows(&fake));
            let spec = d.spec().clone();
            grad_check(
                |t, p| {
                    let r = t.leaf(real.clone());
                    let f = t.leaf(fake.clone());
                    let dr = d.forward(t, p, r)?;
                    let df = d.forward(t, p, f)?;
                    d_loss_on_tape(t, dr, df).map_err(diff_only)
                },
                |p| oracle::d_loss(&oracle::mlp(&spec, p, &rr), &oracle::mlp(&spec, p, &fr)),
                d.params(),
                EPS,
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

/// Generator loss through a fused pair: G1 and G2 (3-5-2, `hidden` then
/// linear) share z, concatenate, and feed a 4-6-1 leaky/sigmoid D. Checks
/// the gradients of every tensor at once.
pub fn fused_generator_loss(hidden: Activation) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let (g1, g2, d, z) = smooth_instance(
                seed,
                |key| {
                    (
                        net(&[3, 5, 2], &[hidden, Activation::Linear], key),
                        net(&[3, 5, 2], &[hidden, Activation::Linear], key + 100),
                        net(&[4, 6, 1], &[Activation::LeakyRelu, Activation::Sigmoid], key + 200),
                        sample_noise(4, 3, &mut Rng::new(key, 6)),
                    )
                },
                |(g1, g2, d, z)| {
                    let zr = oracle::rows(z);
                    let (p1, p2) = (oracle::params_f64(g1), oracle::params_f64(g2));
                    let ab = oracle::concat(&[oracle::mlp(g1.spec(), &p1, &zr), oracle::mlp(g2.spec(), &p2, &zr)]);
                    oracle::kink_margin(g1.spec(), &p1, &zr)
                        .min(oracle::kink_margin(g2.spec(), &p2, &zr))
                        .min(oracle::kink_margin(d.spec(), &oracle::params_f64(d), &ab))
                },
            );
            let zr = oracle::rows(&z);
            let all: Vec<ParamTensor> = [&g1, &g2, &d].iter().flat_map(|m| m.params().to_vec()).collect();
            let (n1, n2) = (g1.params().len(), g2.params().len());
            let (s1, s2, sd) = (g1.spec().clone(), g2.spec().clone(), d.spec().clone());
            grad_check(
                |t, p| {
                    let zv = t.leaf(z.clone());
                    let a = g1.forward(t, &p[..n1], zv)?;
                    let b = g2.forward(t, &p[n1..n1 + n2], zv)?;
                    let ab = t.concat(&[a, b])?;
                    let df = d.forward(t, &p[n1 + n2..], ab)?;
                    g_loss_on_tape(t, df).map_err(diff_only)
                },
                |p| {
                    let a = oracle::mlp(&s1, &p[..n1], &zr);
                    let b = oracle::mlp(&s2, &p[n1..n1 + n2], &zr);
                    oracle::g_loss(&oracle::mlp(&sd, &p[n1 + n2..], &oracle::concat(&[a, b])))
                },
                &all,
                EPS,
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

/// Every scenario under every activation it admits, labelled.
pub fn all_cases() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for act in Activation::ALL {
        out.push((format!("squared/{act:?}"), squared_loss(act)));
        out.push((format!("mean/{act:?}"), mean_loss(act)));
        out.push((format!("d_loss/{act:?}"), discriminator_loss(act)));
        out.push((format!("fused_g_loss/{act:?}"), fused_generator_loss(act)));
    }
    out
}
