//! Clustered 2-D distributions with a known cluster-to-cluster mapping, and
//! the metrics that score generated samples against them.

use std::io::Write;

use crate::diffcore::{Rng, Tensor};
use crate::fusion::PairedDataset;
use crate::{Error, Result};

pub type Point = [f64; 2];

/// Paired clusters: component A from cluster `c`, component B from cluster `pairing[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub centers_a: Vec<Point>,
    pub centers_b: Vec<Point>,
    pub pairing: Vec<usize>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

/// Three locations linked by `map12` and `map23`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub centers: [Vec<Point>; 3],
    pub map12: Vec<usize>,
    pub map23: Vec<usize>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

fn is_bijection(map: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    map.len() == k
        && map.iter().all(|&j| {
            let fresh = j < k && !seen[j];
            if fresh {
                seen[j] = true;
            }
            fresh
        })
}

fn min_separation(centers: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            best = best.min(dist(a, b));
        }
    }
    best
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn validate_clusters(rings: &[&[Point]], maps: &[&[usize]], sigma: f64, weights: &[f64]) -> Result<()> {
    let k = rings[0].len();
    if k == 0 || rings.iter().any(|r| r.len() != k) {
        return Err(Error::Config("every ring needs the same non-zero cluster count".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if maps.iter().any(|m| !is_bijection(m, k)) {
        return Err(Error::Config("cluster maps must be bijections".into()));
    }
    if weights.len() != k || weights.iter().any(|&w| !(w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("mixture weights must be k non-negative values".into()));
    }
    for ring in rings {
        if k > 1 && min_separation(ring) < 6.0 * sigma {
            return Err(Error::Config("cluster centers closer than 6 sigma".into()));
        }
    }
    Ok(())
}

fn ring(k: usize, radius: f64, offset_deg: f64) -> Vec<Point> {
    (0..k)
        .map(|i| {
            let t = (offset_deg + 360.0 * i as f64 / k as f64).to_radians();
            [radius * t.cos(), radius * t.sin()]
        })
        .collect()
}

fn rotation(k: usize, by: usize) -> Vec<usize> {
    (0..k).map(|c| (c + by) % k).collect()
}

impl JointSpec {
    pub fn new(centers_a: Vec<Point>, centers_b: Vec<Point>, pairing: Vec<usize>, sigma: f64) -> Result<Self> {
        let k = centers_a.len();
        Self::with_weights(centers_a, centers_b, pairing, sigma, vec![1.0 / k as f64; k])
    }

    pub fn with_weights(
        centers_a: Vec<Point>,
        centers_b: Vec<Point>,
        pairing: Vec<usize>,
        sigma: f64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        validate_clusters(&[&centers_a, &centers_b], &[&pairing], sigma, &weights)?;
        Ok(Self {
            centers_a,
            centers_b,
            pairing,
            sigma,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.centers_a.len()
    }
}

impl ChainSpec {
    pub fn new(centers: [Vec<Point>; 3], map12: Vec<usize>, map23: Vec<usize>, sigma: f64) -> Result<Self> {
        let k = centers[0].len();
        let weights = vec![1.0 / k as f64; k];
        validate_clusters(&[&centers[0], &centers[1], &centers[2]], &[&map12, &map23], sigma, &weights)?;
        Ok(Self {
            centers,
            map12,
            map23,
            sigma,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.map12.len()
    }

    /// The (location 1, location 2) pair structure.
    pub fn first_pair(&self) -> JointSpec {
        JointSpec {
            centers_a: self.centers[0].clone(),
            centers_b: self.centers[1].clone(),
            pairing: self.map12.clone(),
            sigma: self.sigma,
            weights: self.weights.clone(),
        }
    }

    /// Location-3 cluster caused by location-1 cluster `c`.
    pub fn end_to_end(&self, c: usize) -> usize {
        self.map23[self.map12[c]]
    }
}

/// Four clusters on radius-5 rings: A at 0°/90°/180°/270°, B rotated 45°,
/// pairing `c → c + 1 (mod 4)`, σ = 0.3.
pub fn default_joint() -> JointSpec {
    JointSpec::new(ring(4, 5.0, 0.0), ring(4, 5.0, 45.0), rotation(4, 1), 0.3).expect("valid default")
}

/// [`default_joint`] plus a third radius-5 ring at 22.5° offset, linked by
/// another `+1` rotation.
pub fn default_chain() -> ChainSpec {
    ChainSpec::new(
        [ring(4, 5.0, 0.0), ring(4, 5.0, 45.0), ring(4, 5.0, 22.5)],
        rotation(4, 1),
        rotation(4, 1),
        0.3,
    )
    .expect("valid default")
}

fn draw_cluster(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.uniform_f64() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn push_gaussian(out: &mut Vec<f32>, center: &Point, sigma: f64, rng: &mut Rng) {
    for c in center {
        out.push((c + sigma * rng.normal_f64()) as f32);
    }
}

/// Draws `n` concatenated `(a, b)` rows.
pub fn sample_joint(spec: &JointSpec, n: usize, rng: &mut Rng) -> PairedDataset {
    let mut data = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let c = draw_cluster(&spec.weights, rng);
        push_gaussian(&mut data, &spec.centers_a[c], spec.sigma, rng);
        push_gaussian(&mut data, &spec.centers_b[spec.pairing[c]], spec.sigma, rng);
    }
    let t = Tensor::matrix(n, 4, data).expect("finite samples");
    PairedDataset::new(t, vec![2, 2]).expect("consistent dims")
}

/// Draws `n` concatenated `(loc1, loc2, loc3)` rows.
pub fn sample_chain(spec: &ChainSpec, n: usize, rng: &mut Rng) -> PairedDataset {
    let mut data = Vec::with_capacity(6 * n);
    for _ in 0..n {
        let c1 = draw_cluster(&spec.weights, rng);
        let c2 = spec.map12[c1];
        let c3 = spec.map23[c2];
        push_gaussian(&mut data, &spec.centers[0][c1], spec.sigma, rng);
        push_gaussian(&mut data, &spec.centers[1][c2], spec.sigma, rng);
        push_gaussian(&mut data, &spec.centers[2][c3], spec.sigma, rng);
    }
    let t = Tensor::matrix(n, 6, data).expect("finite samples");
    PairedDataset::new(t, vec![2, 2, 2]).expect("consistent dims")
}

/// `n` points from the mixture over `centers`.
pub fn sample_marginal(centers: &[Point], weights: &[f64], sigma: f64, n: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = draw_cluster(weights, rng);
        push_gaussian(&mut data, &centers[c], sigma, rng);
    }
    Tensor::matrix(n, 2, data).expect("finite samples")
}

/// Nearest center by Euclidean distance; ties go to the lowest index.
pub fn classify(point: &[f32], centers: &[Point]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (point[0] as f64 - c[0]).powi(2) + (point[1] as f64 - c[1]).powi(2);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn linked_fraction(data: &PairedDataset, rings: &[&[Point]], maps: &[&[usize]]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("pairs"));
    }
    if data.component_dims().iter().any(|&d| d != 2) || data.component_dims().len() != rings.len() {
        return Err(Error::Dimension(format!(
            "expected {} two-dimensional components, got {:?}",
            rings.len(),
            data.component_dims()
        )));
    }
    let hits = data
        .samples()
        .iter_rows()
        .filter(|row| {
            let labels: Vec<usize> = rings
                .iter()
                .enumerate()
                .map(|(k, r)| classify(&row[2 * k..2 * k + 2], r))
                .collect();
            maps.iter().enumerate().all(|(k, m)| m[labels[k]] == labels[k + 1])
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of rows with `classify(b) == pairing[classify(a)]`.
pub fn pairing_accuracy(spec: &JointSpec, pairs: &PairedDataset) -> Result<f64> {
    linked_fraction(pairs, &[&spec.centers_a, &spec.centers_b], &[&spec.pairing])
}

/// Fraction of rows whose three labels follow both chain maps.
pub fn chain_accuracy(spec: &ChainSpec, triples: &PairedDataset) -> Result<f64> {
    let rings: Vec<&[Point]> = spec.centers.iter().map(Vec::as_slice).collect();
    linked_fraction(triples, &rings, &[&spec.map12, &spec.map23])
}

/// Per location-1 cluster: how often each location-3 cluster was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    /// `counts[c1][c3]`.
    pub counts: Vec<Vec<usize>>,
    /// Modal location-3 cluster per location-1 cluster; `None` if `c1` never occurred.
    pub modal: Vec<Option<usize>>,
    pub expected: Vec<usize>,
}

impl ConsistencyReport {
    /// Fraction of location-1 clusters whose modal location-3 cluster is the
    /// causal image. Clusters with no samples count as misses.
    pub fn fraction_consistent(&self) -> f64 {
        let ok = self
            .modal
            .iter()
            .zip(&self.expected)
            .filter(|(m, e)| **m == Some(**e))
            .count();
        ok as f64 / self.expected.len() as f64
    }
}

pub fn conditional_consistency(spec: &ChainSpec, triples: &PairedDataset) -> Result<ConsistencyReport> {
    if triples.component_dims() != [2, 2, 2] {
        return Err(Error::Dimension(format!("expected triples, got {:?}", triples.component_dims())));
    }
    let k = spec.k();
    let mut counts = vec![vec![0usize; k]; k];
    for row in triples.samples().iter_rows() {
        let c1 = classify(&row[0..2], &spec.centers[0]);
        let c3 = classify(&row[4..6], &spec.centers[2]);
        counts[c1][c3] += 1;
    }
    let modal = counts
        .iter()
        .map(|row| {
            let (best, &n) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            (n > 0).then_some(best)
        })
        .collect();
    let expected = (0..k).map(|c| spec.end_to_end(c)).collect();
    Ok(ConsistencyReport {
        counts,
        modal,
        expected,
    })
}

fn to_f64_rows(x: &Tensor) -> Vec<Vec<f64>> {
    x.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty("sample set"));
    }
    if x.cols() != y.cols() {
        return Err(Error::Dimension(format!("feature dims {} vs {}", x.cols(), y.cols())));
    }
    Ok(())
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], k: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += k(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

fn mmd2_rows(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> f64 {
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    // Non-negative in exact arithmetic; only rounding can push it below.
    (mean_kernel(x, x, k) + mean_kernel(y, y, k) - 2.0 * mean_kernel(x, y, k)).max(0.0)
}

/// Biased (V-statistic) squared MMD with an RBF kernel of bandwidth `h`.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair(x, y)?;
    Ok(mmd2_rows(&to_f64_rows(x), &to_f64_rows(y), bandwidth))
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|`.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let (xs, ys) = (to_f64_rows(x), to_f64_rows(y));
    let norm = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
    Ok(2.0 * mean_kernel(&xs, &ys, norm) - mean_kernel(&xs, &xs, norm) - mean_kernel(&ys, &ys, norm))
}

/// Permutation-null quantile of `mmd2` at level `alpha`.
///
/// Pools `x` and `y`, reshuffles `permutations` times, and returns the
/// `(1 - alpha)` empirical quantile of the resampled statistics.
pub fn mmd2_permutation_threshold(
    x: &Tensor,
    y: &Tensor,
    bandwidth: f64,
    permutations: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<f64> {
    check_pair(x, y)?;
    let mut pool = to_f64_rows(x);
    pool.extend(to_f64_rows(y));
    let nx = x.rows();
    let mut stats = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        for i in (1..pool.len()).rev() {
            let j = rng.index(i + 1);
            pool.swap(i, j);
        }
        stats.push(mmd2_rows(&pool[..nx], &pool[nx..], bandwidth));
    }
    stats.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(stats[idx])
}

/// Writes a dataset as CSV with columns `a0,a1,b0,b1[,c0,c1…]`.
pub fn write_csv(data: &PairedDataset, mut out: impl Write) -> std::io::Result<()> {
    let mut header = Vec::new();
    for (k, &d) in data.component_dims().iter().enumerate() {
        let letter = (b'a' + k as u8) as char;
        header.extend((0..d).map(|j| format!("{letter}{j}")));
    }
    writeln!(out, "{}", header.join(","))?;
    for row in data.samples().iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_joint_geometry() {
        let s = default_joint();
        assert_eq!(s.k(), 4);
        assert!(min_separation(&s.centers_a) > 6.0 * s.sigma);
        assert!((min_separation(&s.centers_b) - 5.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((s.centers_b[0][0] - 5.0 * 45f64.to_radians().cos()).abs() < 1e-12);
        assert_eq!(s.pairing, vec![1, 2, 3, 0]);
        assert_eq!(default_joint(), s);
    }

    #[test]
    fn chain_geometry() {
        let c = default_chain();
        assert_eq!(c.first_pair(), default_joint());
        assert_eq!((0..4).map(|i| c.end_to_end(i)).collect::<Vec<_>>(), vec![2, 3, 0, 1]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let a = ring(4, 5.0, 0.0);
        assert!(JointSpec::new(a.clone(), a.clone(), vec![0, 0, 1, 2], 0.3).is_err());
        assert!(JointSpec::new(a.clone(), a.clone(), vec![0, 1, 2, 3], 0.0).is_err());
        assert!(JointSpec::new(a.clone(), a.clone(), vec![0, 1, 2, 3], 2.0).is_err());
        assert!(JointSpec::new(a.clone(), a[..3].to_vec(), vec![0, 1, 2, 3], 0.3).is_err());
    }

    #[test]
    fn degenerate_sigma_hits_centers() {
        let base = default_joint();
        let s = JointSpec::new(base.centers_a.clone(), base.centers_b.clone(), base.pairing.clone(), 1e-6).unwrap();
        let d = sample_joint(&s, 200, &mut Rng::new(1, 0));
        for row in d.samples().iter_rows() {
            let c = classify(&row[..2], &s.centers_a);
            let b = s.centers_b[s.pairing[c]];
            let a = s.centers_a[c];
            for (v, t) in row.iter().zip([a[0], a[1], b[0], b[1]]) {
                assert!((*v as f64 - t).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn oracle_pairs_score_one() {
        let s = default_joint();
        let d = sample_joint(&s, 10_000, &mut Rng::new(2, 0));
        assert_eq!(pairing_accuracy(&s, &d).unwrap(), 1.0);
        let c = default_chain();
        let t = sample_chain(&c, 2000, &mut Rng::new(2, 1));
        assert_eq!(chain_accuracy(&c, &t).unwrap(), 1.0);
        assert_eq!(conditional_consistency(&c, &t).unwrap().fraction_consistent(), 1.0);
    }

    #[test]
    fn derangement_scores_zero() {
        let s = default_joint();
        let d = sample_joint(&s, 500, &mut Rng::new(3, 0));
        // Relabel every b to the center one step further around the ring.
        let mut rows = Vec::new();
        for row in d.samples().iter_rows() {
            let cb = classify(&row[2..], &s.centers_b);
            let nb = s.centers_b[(cb + 1) % 4];
            rows.push(vec![row[0], row[1], nb[0] as f32, nb[1] as f32]);
        }
        let deranged = PairedDataset::new(Tensor::from_rows(&rows).unwrap(), vec![2, 2]).unwrap();
        assert_eq!(pairing_accuracy(&s, &deranged).unwrap(), 0.0);
    }

    #[test]
    fn classify_ties_go_low() {
        let centers = [[-1.0, 0.0], [1.0, 0.0]];
        assert_eq!(classify(&[0.0, 0.0], &centers), 0);
        assert_eq!(classify(&[0.1, 0.0], &centers), 1);
    }

    #[test]
    fn mmd_identities() {
        let x = sample_marginal(&ring(4, 5.0, 0.0), &[0.25; 4], 0.3, 200, &mut Rng::new(4, 0));
        let y = sample_marginal(&ring(4, 5.0, 45.0), &[0.25; 4], 0.3, 150, &mut Rng::new(4, 1));
        assert_eq!(mmd2(&x, &x, 1.0).unwrap(), 0.0);
        assert!((mmd2(&x, &y, 1.0).unwrap() - mmd2(&y, &x, 1.0).unwrap()).abs() < 1e-12);
        assert!(mmd2(&x, &y, 1.0).unwrap() > 0.0);
        assert!(energy_distance(&x, &x).unwrap().abs() < 1e-12);
        assert!(energy_distance(&x, &y).unwrap() > 0.0);
        let empty_err = mmd2(&x, &Tensor::zeros(&[1, 3]), 1.0);
        assert!(empty_err.is_err());
    }

    #[test]
    fn csv_header() {
        let d = sample_chain(&default_chain(), 2, &mut Rng::new(0, 0));
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a0,a1,b0,b1,c0,c1\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
