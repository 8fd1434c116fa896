//! Sampling and metric checks against binomial and Monte-Carlo bounds.

use fedgan::diffcore::{Rng, Tensor};
use fedgan::fusion::PairedDataset;
use fedgan::synthdata::{
    classify, default_chain, default_joint, mmd2, mmd2_permutation_threshold, pairing_accuracy, sample_chain,
    sample_joint, sample_marginal, JointSpec,
};

fn three_sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn cluster_frequencies_are_uniform_within_binomial_bound() {
    let spec = default_joint();
    let n = 10_000;
    let data = sample_joint(&spec, n, &mut Rng::new(1, 0));
    let mut counts = [0usize; 4];
    for row in data.samples().iter_rows() {
        counts[classify(&row[..2], &spec.centers_a)] += 1;
    }
    for c in counts {
        let freq = c as f64 / n as f64;
        assert!((freq - 0.25).abs() <= three_sigma(0.25, n), "{counts:?}");
    }
}

#[test]
fn vanishing_sigma_gives_exact_centers() {
    let d = default_joint();
    let spec = JointSpec::new(d.centers_a.clone(), d.centers_b.clone(), d.pairing.clone(), 1e-6).unwrap();
    let data = sample_joint(&spec, 500, &mut Rng::new(2, 0));
    for row in data.samples().iter_rows() {
        let c = classify(&row[..2], &spec.centers_a);
        let a = spec.centers_a[c];
        let b = spec.centers_b[spec.pairing[c]];
        let expect = [a[0], a[1], b[0], b[1]];
        for (v, e) in row.iter().zip(expect) {
            assert!((*v as f64 - e).abs() < 1e-4);
        }
    }
}

#[test]
fn sampled_pairs_and_chains_are_perfectly_linked() {
    let spec = default_joint();
    let data = sample_joint(&spec, 10_000, &mut Rng::new(3, 0));
    assert_eq!(pairing_accuracy(&spec, &data).unwrap(), 1.0);
    let chain = default_chain();
    let triples = sample_chain(&chain, 5_000, &mut Rng::new(3, 1));
    assert_eq!(fedgan::synthdata::chain_accuracy(&chain, &triples).unwrap(), 1.0);
}

#[test]
fn derangement_of_b_scores_zero() {
    let spec = default_joint();
    let data = sample_joint(&spec, 2_000, &mut Rng::new(4, 0));
    // b now belongs to pairing[c] + 1, never pairing[c].
    let rows: Vec<f32> = data
        .samples()
        .iter_rows()
        .flat_map(|row| {
            let c = classify(&row[..2], &spec.centers_a);
            let b = spec.centers_b[(spec.pairing[c] + 1) % 4];
            [row[0], row[1], b[0] as f32, b[1] as f32]
        })
        .collect();
    let shifted = PairedDataset::new(Tensor::matrix(2_000, 4, rows).unwrap(), vec![2, 2]).unwrap();
    assert_eq!(pairing_accuracy(&spec, &shifted).unwrap(), 0.0);
}

#[test]
fn independent_marginals_pair_at_chance() {
    let spec = default_joint();
    let n = 10_000;
    let a = sample_marginal(&spec.centers_a, &spec.weights, spec.sigma, n, &mut Rng::new(5, 0));
    let b = sample_marginal(&spec.centers_b, &spec.weights, spec.sigma, n, &mut Rng::new(5, 1));
    let pairs = PairedDataset::new(Tensor::concat_cols(&[&a, &b]).unwrap(), vec![2, 2]).unwrap();
    let acc = pairing_accuracy(&spec, &pairs).unwrap();
    assert!((acc - 0.25).abs() <= three_sigma(0.25, n), "{acc}");
}

#[test]
fn shifted_gaussians_have_large_mmd() {
    let mut rng = Rng::new(6, 0);
    let x = Tensor::matrix(1000, 1, (0..1000).map(|_| rng.normal()).collect()).unwrap();
    let y = Tensor::matrix(1000, 1, (0..1000).map(|_| 3.0 + rng.normal()).collect()).unwrap();
    let v = mmd2(&x, &y, 1.0).unwrap();
    assert!(v > 0.5, "{v}");
}

#[test]
fn joint_marginals_pass_permutation_test() {
    let spec = default_joint();
    let data = sample_joint(&spec, 300, &mut Rng::new(7, 0));
    let fresh_a = sample_marginal(&spec.centers_a, &spec.weights, spec.sigma, 300, &mut Rng::new(7, 1));
    let fresh_b = sample_marginal(&spec.centers_b, &spec.weights, spec.sigma, 300, &mut Rng::new(7, 2));
    for (k, fresh) in [fresh_a, fresh_b].iter().enumerate() {
        let comp = data.component(k).unwrap();
        let stat = mmd2(&comp, fresh, 1.0).unwrap();
        let threshold = mmd2_permutation_threshold(&comp, fresh, 1.0, 100, 0.05, &mut Rng::new(7, 3)).unwrap();
        assert!(stat < threshold, "component {k}: {stat} >= {threshold}");
    }
}

#[test]
fn permutation_test_rejects_wrong_marginal() {
    let spec = default_joint();
    let data = sample_joint(&spec, 300, &mut Rng::new(8, 0));
    let wrong = sample_marginal(&spec.centers_b, &spec.weights, spec.sigma, 300, &mut Rng::new(8, 1));
    let a = data.component(0).unwrap();
    let stat = mmd2(&a, &wrong, 1.0).unwrap();
    let threshold = mmd2_permutation_threshold(&a, &wrong, 1.0, 100, 0.05, &mut Rng::new(8, 2)).unwrap();
    assert!(stat > threshold);
}
