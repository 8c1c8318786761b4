//! Seeded k-means over the Lab pixels of one training window.
//!
//! `kmeans_pp_init` picks starting centroids, `lloyd` refines them and
//! `cluster_window` glues both together with subsampling and the per-centroid
//! acceptance radius that later decides whether a pixel is "too far".

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorlab::{squared_distance, LabColor};

/// Operator-facing suggested range for k.
pub const SUGGESTED_K: (usize, usize) = (2, 5);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty point set")]
    Empty,
    #[error("k = {k} exceeds the {distinct} distinct colors in the window; select a larger window or a smaller k")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("k = {k} is outside the allowed range 1..={k_max}")]
    InvalidK { k: usize, k_max: usize },
    #[error("weights must be positive and match the number of points ({points} points, {weights} weights)")]
    InvalidWeights { points: usize, weights: usize },
    #[error("max_iter must be at least 1")]
    NoIterations,
    #[error("radius estimate needs at least one distance")]
    EmptyDistances,
}

/// Tuning knobs for window clustering. Also snapshotted into model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub inflation: f64,
    pub k_max: usize,
    pub max_iter: usize,
    pub max_window_pixels: usize,
    /// Centroids of one class closer than this (ΔE) are merged.
    pub merge_eps: f64,
    pub quantile: f64,
    pub r_min: f64,
    /// Independent k-means++ starts; the lowest-inertia run wins.
    pub restarts: usize,
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            inflation: 1.25,
            k_max: 8,
            max_iter: 50,
            max_window_pixels: 100_000,
            merge_eps: 3.0,
            quantile: 0.99,
            r_min: 2.0,
            restarts: 16,
            tol: 0.05,
        }
    }
}

/// The Lab pixels of a window, optionally weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<LabColor>,
    weights: Option<Vec<u64>>,
}

impl PointSet {
    pub fn new(points: Vec<LabColor>) -> Self {
        Self { points, weights: None }
    }

    pub fn weighted(points: Vec<LabColor>, weights: Vec<u64>) -> Result<Self, ClusterError> {
        if weights.len() != points.len() || weights.contains(&0) {
            return Err(ClusterError::InvalidWeights { points: points.len(), weights: weights.len() });
        }
        Ok(Self { points, weights: Some(weights) })
    }

    pub fn points(&self) -> &[LabColor] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn weight(&self, i: usize) -> u64 {
        self.weights.as_ref().map_or(1, |w| w[i])
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.as_ref().map_or(self.points.len() as u64, |w| w.iter().sum())
    }

    pub fn distinct_count(&self) -> usize {
        self.points
            .iter()
            .map(|p| [p.l.to_bits(), p.a.to_bits(), p.b.to_bits()])
            .collect::<HashSet<_>>()
            .len()
    }

    /// Uniform seeded subsample without replacement, keeping original order.
    fn subsample(&self, cap: usize, seed: u64) -> PointSet {
        if self.len() <= cap {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let mut picked = index::sample(&mut rng, self.len(), cap).into_vec();
        picked.sort_unstable();
        PointSet {
            points: picked.iter().map(|&i| self.points[i]).collect(),
            weights: self.weights.as_ref().map(|w| picked.iter().map(|&i| w[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub centroids: Vec<LabColor>,
    /// Total weight assigned to each centroid.
    pub counts: Vec<u64>,
    pub radii: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

/// Index of the nearest centroid and the squared distance to it; ties go to the lower index.
#[inline]
pub fn nearest(centroids: &[LabColor], p: LabColor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, *c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: the first centroid is drawn in proportion to point
/// weight, each later one in proportion to weight × squared distance to the
/// closest centroid chosen so far.
pub fn kmeans_pp_init(ps: &PointSet, k: usize, seed: u64) -> Result<Vec<LabColor>, ClusterError> {
    if ps.is_empty() {
        return Err(ClusterError::Empty);
    }
    if k == 0 {
        return Err(ClusterError::InvalidK { k, k_max: ps.len() });
    }
    let distinct = ps.distinct_count();
    if k > distinct {
        return Err(ClusterError::TooFewDistinct { k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ps.len();
    let uniform: Vec<f64> = (0..n).map(|i| ps.weight(i) as f64).collect();
    let first = weighted_pick(&mut rng, &uniform);
    let mut centroids = vec![ps.points[first]];

    let mut mass: Vec<f64> = (0..n)
        .map(|i| ps.weight(i) as f64 * squared_distance(ps.points[i], centroids[0]))
        .collect();
    while centroids.len() < k {
        let pick = weighted_pick(&mut rng, &mass);
        let c = ps.points[pick];
        centroids.push(c);
        for (i, m) in mass.iter_mut().enumerate() {
            let d = ps.weight(i) as f64 * squared_distance(ps.points[i], c);
            if d < *m {
                *m = d;
            }
        }
    }
    Ok(centroids)
}

/// Draws an index with probability proportional to `mass`. Zero-mass entries are never chosen.
fn weighted_pick(rng: &mut impl Rng, mass: &[f64]) -> usize {
    let total: f64 = mass.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &m) in mass.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        acc += m;
        last_positive = i;
        if acc > target {
            return i;
        }
    }
    last_positive
}

struct Assignment {
    labels: Vec<usize>,
    sq_dist: Vec<f64>,
    counts: Vec<u64>,
    members: Vec<usize>,
    inertia: f64,
}

fn assign(ps: &PointSet, centroids: &[LabColor]) -> Assignment {
    let k = centroids.len();
    let mut labels = Vec::with_capacity(ps.len());
    let mut sq_dist = Vec::with_capacity(ps.len());
    let mut counts = vec![0u64; k];
    let mut members = vec![0usize; k];
    let mut inertia = 0.0;
    for (i, p) in ps.points.iter().enumerate() {
        let (j, d) = nearest(centroids, *p);
        let w = ps.weight(i);
        labels.push(j);
        sq_dist.push(d);
        counts[j] += w;
        members[j] += 1;
        inertia += w as f64 * d;
    }
    Assignment { labels, sq_dist, counts, members, inertia }
}

/// Moves empty centroids onto the point farthest from its own centroid
/// (taken from a cluster with more than one member) until none is empty.
fn repair_empty(ps: &PointSet, centroids: &mut [LabColor], mut a: Assignment) -> Assignment {
    // Every repair strictly lowers inertia, so this terminates; the bound is a backstop.
    for _ in 0..ps.len().max(1) * centroids.len() {
        let Some(empty) = a.members.iter().position(|&m| m == 0) else {
            break;
        };
        let farthest = (0..ps.len())
            .filter(|&i| a.members[a.labels[i]] > 1 && a.sq_dist[i] > 0.0)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if a.sq_dist[b] >= a.sq_dist[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = farthest else {
            break;
        };
        centroids[empty] = ps.points[i];
        a = assign(ps, centroids);
    }
    a
}

fn weighted_means(ps: &PointSet, a: &Assignment, previous: &[LabColor]) -> Vec<LabColor> {
    let k = previous.len();
    let mut sums = vec![[0.0f64; 3]; k];
    for (i, p) in ps.points.iter().enumerate() {
        let w = ps.weight(i) as f64;
        let s = &mut sums[a.labels[i]];
        s[0] += w * p.l;
        s[1] += w * p.a;
        s[2] += w * p.b;
    }
    sums.iter()
        .zip(&a.counts)
        .zip(previous)
        .map(|((s, &n), prev)| {
            if n == 0 {
                *prev
            } else {
                let n = n as f64;
                LabColor::new(s[0] / n, s[1] / n, s[2] / n)
            }
        })
        .collect()
}

/// Lloyd refinement. Stops once no centroid moves more than `tol` ΔE or
/// after `max_iter` update steps. Counts and inertia in the result come from
/// a final assignment against the returned centroids; radii are left empty
/// (see [`cluster_window`]).
pub fn lloyd(ps: &PointSet, init: &[LabColor], max_iter: usize, tol: f64) -> Result<ClusterResult, ClusterError> {
    if ps.is_empty() || init.is_empty() {
        return Err(ClusterError::Empty);
    }
    if max_iter == 0 {
        return Err(ClusterError::NoIterations);
    }
    let mut centroids = init.to_vec();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let first = assign(ps, &centroids);
        let a = repair_empty(ps, &mut centroids, first);
        history.push(a.inertia);
        let next = weighted_means(ps, &a, &centroids);
        let movement = next
            .iter()
            .zip(&centroids)
            .map(|(n, c)| squared_distance(*n, *c))
            .fold(0.0f64, f64::max)
            .sqrt();
        centroids = next;
        if movement <= tol {
            break;
        }
    }
    let first = assign(ps, &centroids);
    let last = repair_empty(ps, &mut centroids, first);
    history.push(last.inertia);
    Ok(ClusterResult {
        centroids,
        counts: last.counts,
        radii: Vec::new(),
        inertia: last.inertia,
        iterations,
        seed: 0,
        inertia_history: history,
    })
}

/// Weighted nearest-rank quantile, inflated and floored at `r_min`.
pub fn estimate_radius_weighted(distances: &[(f64, u64)], q: f64, inflation: f64, r_min: f64) -> Result<f64, ClusterError> {
    if distances.is_empty() {
        return Err(ClusterError::EmptyDistances);
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: u64 = sorted.iter().map(|d| d.1).sum();
    // 1-based nearest rank; the small slack keeps q·n from rounding up past an integer.
    let rank = ((q * total as f64) - 1e-9).ceil().clamp(1.0, total as f64) as u64;
    let mut seen = 0;
    let mut value = sorted[sorted.len() - 1].0;
    for (d, w) in &sorted {
        seen += w;
        if seen >= rank {
            value = *d;
            break;
        }
    }
    Ok(r_min.max(inflation * value))
}

pub fn estimate_radius(distances: &[f64], q: f64, inflation: f64, r_min: f64) -> Result<f64, ClusterError> {
    let pairs: Vec<(f64, u64)> = distances.iter().map(|&d| (d, 1)).collect();
    estimate_radius_weighted(&pairs, q, inflation, r_min)
}

/// Clusters a window's pixels into `k` centroids with acceptance radii.
pub fn cluster_window(pixels: &PointSet, k: usize, seed: u64, cfg: &ClusterConfig) -> Result<ClusterResult, ClusterError> {
    if k == 0 || k > cfg.k_max {
        return Err(ClusterError::InvalidK { k, k_max: cfg.k_max });
    }
    if pixels.is_empty() {
        return Err(ClusterError::Empty);
    }
    let ps = pixels.subsample(cfg.max_window_pixels.max(k), seed);
    let mut result: Option<ClusterResult> = None;
    for r in 0..cfg.restarts.max(1) as u64 {
        let init = kmeans_pp_init(&ps, k, seed.wrapping_add(r.wrapping_mul(0xd1b5_4a32_d192_ed03)))?;
        let run = lloyd(&ps, &init, cfg.max_iter, cfg.tol)?;
        if result.as_ref().is_none_or(|best| run.inertia < best.inertia) {
            result = Some(run);
        }
    }
    let mut result = result.expect("at least one start");
    result.seed = seed;

    let mut per_cluster: Vec<Vec<(f64, u64)>> = vec![Vec::new(); k];
    for (i, p) in ps.points.iter().enumerate() {
        let (j, d) = nearest(&result.centroids, *p);
        per_cluster[j].push((d.sqrt(), ps.weight(i)));
    }
    result.radii = per_cluster
        .iter()
        .map(|d| {
            if d.is_empty() {
                Ok(cfg.r_min)
            } else {
                estimate_radius_weighted(d, cfg.quantile, cfg.inflation, cfg.r_min)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn lab(l: f64) -> LabColor {
        LabColor::new(l, 0.0, 0.0)
    }

    fn random_points(n: usize, seed: u64) -> Vec<LabColor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| LabColor::new(rng.random_range(0.0..100.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)))
            .collect()
    }

    #[test]
    fn init_single_candidate() {
        let ps = PointSet::new(vec![lab(42.0); 10]);
        assert_eq!(kmeans_pp_init(&ps, 1, 3).unwrap(), vec![lab(42.0)]);
    }

    #[test]
    fn init_two_distinct_points_takes_both() {
        let p = LabColor::new(10.0, 5.0, -5.0);
        let q = LabColor::new(60.0, -20.0, 30.0);
        for seed in 0..20 {
            let ps = PointSet::new(vec![p, p, p, q]);
            let mut got = kmeans_pp_init(&ps, 2, seed).unwrap();
            got.sort_by(|x, y| x.l.total_cmp(&y.l));
            assert_eq!(got, vec![p, q]);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let ps = PointSet::new(random_points(100, 9));
        assert_eq!(kmeans_pp_init(&ps, 5, 77).unwrap(), kmeans_pp_init(&ps, 5, 77).unwrap());
    }

    #[test]
    fn init_rejects_k_above_distinct() {
        let ps = PointSet::new(vec![lab(1.0), lab(1.0), lab(2.0)]);
        let err = kmeans_pp_init(&ps, 3, 0).unwrap_err();
        assert_eq!(err, ClusterError::TooFewDistinct { k: 3, distinct: 2 });
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn lloyd_two_groups_fixed_point() {
        let mut points = vec![lab(0.0); 50];
        points.extend(vec![lab(100.0); 50]);
        let ps = PointSet::new(points);
        let r = lloyd(&ps, &[lab(10.0), lab(70.0)], 50, 0.05).unwrap();
        assert_eq!(r.centroids, vec![lab(0.0), lab(100.0)]);
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.counts, vec![50, 50]);
    }

    #[test]
    fn lloyd_at_means_stops_on_first_check() {
        let mut points = vec![lab(0.0); 5];
        points.extend(vec![lab(100.0); 5]);
        let r = lloyd(&PointSet::new(points), &[lab(0.0), lab(100.0)], 50, 0.0).unwrap();
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn lloyd_reseeds_empty_cluster() {
        // Second centroid is far from everything and would start empty.
        let ps = PointSet::new(vec![lab(0.0), lab(1.0), lab(10.0), lab(11.0)]);
        let r = lloyd(&ps, &[lab(5.0), lab(99.0)], 50, 0.0).unwrap();
        assert!(r.counts.iter().all(|&c| c > 0), "{:?}", r.counts);
        assert_eq!(r.counts.iter().sum::<u64>(), 4);
    }

    #[test]
    fn lloyd_inertia_is_non_increasing() {
        for seed in 0..10 {
            let ps = PointSet::new(random_points(300, seed));
            let init = kmeans_pp_init(&ps, 4, seed).unwrap();
            let r = lloyd(&ps, &init, 100, 0.0).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{:?}", r.inertia_history);
            }
        }
    }

    #[test]
    fn lloyd_preconditions() {
        let ps = PointSet::new(vec![lab(1.0)]);
        assert_eq!(lloyd(&ps, &[], 10, 0.0).unwrap_err(), ClusterError::Empty);
        assert_eq!(lloyd(&ps, &[lab(1.0)], 0, 0.0).unwrap_err(), ClusterError::NoIterations);
    }

    #[test]
    fn radius_examples() {
        let d = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0];
        assert_eq!(estimate_radius(&d, 0.9, 1.5, 0.0).unwrap(), 1.5);
        assert_eq!(estimate_radius(&[0.0; 7], 0.99, 1.25, 2.0).unwrap(), 2.0);
        assert_eq!(estimate_radius(&[5.0], 0.99, 1.0, 0.0).unwrap(), 5.0);
        assert_eq!(estimate_radius(&[], 0.5, 1.0, 0.0).unwrap_err(), ClusterError::EmptyDistances);
        // q = 1 is the maximum
        assert_eq!(estimate_radius(&d, 1.0, 1.0, 0.0).unwrap(), 100.0);
    }

    #[test]
    fn window_k_bounds() {
        let ps = PointSet::new(vec![lab(1.0), lab(2.0)]);
        let cfg = ClusterConfig::default();
        assert_eq!(cluster_window(&ps, 0, 1, &cfg).unwrap_err(), ClusterError::InvalidK { k: 0, k_max: 8 });
        assert_eq!(cluster_window(&ps, 9, 1, &cfg).unwrap_err(), ClusterError::InvalidK { k: 9, k_max: 8 });
        assert!(matches!(cluster_window(&ps, 3, 1, &cfg), Err(ClusterError::TooFewDistinct { .. })));
        assert_eq!(SUGGESTED_K, (2, 5));
    }

    #[test]
    fn window_uniform_patch_k1() {
        let c = LabColor::new(55.0, 10.0, -3.0);
        let r = cluster_window(&PointSet::new(vec![c; 400]), 1, 5, &ClusterConfig::default()).unwrap();
        assert_eq!(r.centroids, vec![c]);
        assert!(r.inertia.abs() < 1e-12);
        assert_eq!(r.radii, vec![2.0]);
        assert_eq!(r.seed, 5);
    }

    #[test]
    fn window_two_color_patch() {
        let a = crate::colorlab::srgb_to_lab(crate::colorlab::Rgb8::new(240, 240, 235));
        let b = crate::colorlab::srgb_to_lab(crate::colorlab::Rgb8::new(200, 30, 40));
        let mut points = vec![a; 700];
        points.extend(vec![b; 300]);
        let r = cluster_window(&PointSet::new(points), 2, 11, &ClusterConfig::default()).unwrap();
        let mut found = r.centroids.clone();
        found.sort_by(|x, y| y.l.total_cmp(&x.l));
        assert!(crate::colorlab::delta_e(found[0], a) < 0.5);
        assert!(crate::colorlab::delta_e(found[1], b) < 0.5);
    }

    #[test]
    fn window_subsampling_is_seeded() {
        let cfg = ClusterConfig { max_window_pixels: 500, ..Default::default() };
        let ps = PointSet::new(random_points(5000, 3));
        let r1 = cluster_window(&ps, 3, 8, &cfg).unwrap();
        let r2 = cluster_window(&ps, 3, 8, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.counts.iter().sum::<u64>(), 500);
    }

    #[test]
    fn weighted_points() {
        let ps = PointSet::weighted(vec![lab(0.0), lab(10.0)], vec![1, 3]).unwrap();
        let r = lloyd(&ps, &[lab(5.0)], 10, 0.0).unwrap();
        assert_eq!(r.centroids, vec![lab(7.5)]);
        assert_eq!(r.counts, vec![4]);
        assert!(PointSet::weighted(vec![lab(0.0)], vec![0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn results_are_deterministic_and_conserve_counts(seed in 0u64..1000, n in 5usize..80, k in 1usize..5) {
            let ps = PointSet::new(random_points(n, seed));
            let cfg = ClusterConfig::default();
            let r = cluster_window(&ps, k, seed, &cfg).unwrap();
            prop_assert_eq!(&r, &cluster_window(&ps, k, seed, &cfg).unwrap());
            prop_assert_eq!(r.counts.iter().sum::<u64>(), n as u64);
            prop_assert_eq!(r.k(), k);
            prop_assert!(r.inertia >= 0.0);
            prop_assert!(r.radii.iter().all(|&x| x >= cfg.r_min));
            // reassigning reproduces counts
            let mut counts = vec![0u64; k];
            for p in ps.points() {
                counts[nearest(&r.centroids, *p).0] += 1;
            }
            prop_assert_eq!(counts, r.counts);
        }

        #[test]
        fn well_separated_clusters_recover_empirical_means(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let means = [LabColor::new(20.0, 0.0, 0.0), LabColor::new(60.0, 40.0, 0.0), LabColor::new(90.0, -30.0, 50.0)];
            let mut points = Vec::new();
            let mut groups = vec![Vec::new(); 3];
            for (g, m) in means.iter().enumerate() {
                for _ in 0..40 {
                    let p = LabColor::new(m.l + rng.random_range(-2.0..2.0), m.a + rng.random_range(-2.0..2.0), m.b + rng.random_range(-2.0..2.0));
                    points.push(p);
                    groups[g].push(p);
                }
            }
            let cfg = ClusterConfig { tol: 0.0, ..Default::default() };
            let r = cluster_window(&PointSet::new(points), 3, seed, &cfg).unwrap();
            for g in &groups {
                let n = g.len() as f64;
                let mean = LabColor::new(g.iter().map(|p| p.l).sum::<f64>() / n, g.iter().map(|p| p.a).sum::<f64>() / n, g.iter().map(|p| p.b).sum::<f64>() / n);
                let closest = r.centroids.iter().map(|c| crate::colorlab::delta_e(*c, mean)).fold(f64::INFINITY, f64::min);
                prop_assert!(closest < 1e-6, "closest {}", closest);
            }
        }
    }
}
