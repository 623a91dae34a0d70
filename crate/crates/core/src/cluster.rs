//! Spherical k-means over memory-bank snapshots.
//!
//! Prototypes are normalized cluster means. Seeding is greedy k-means++ under
//! the cosine distance `1 - cos`, which for unit vectors is half the squared
//! Euclidean distance, so the usual D² weighting carries over unchanged.

use rand::Rng;

use crate::bank::{Domain, MemoryBank};
use crate::error::{PcsError, Result};
use crate::geometry::{argmax, cosine_sim, l2_normalize};
use crate::seed;

pub const DEFAULT_PHI: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once an iteration improves inertia by less than this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// A fitted clustering: unit prototypes, the assignment of every input
/// vector, and the concentration temperature used by the prototype loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub prototypes: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub phi: f64,
    /// Sum of `1 - cos` between each vector and its prototype.
    pub inertia: f64,
    /// Inertia after each Lloyd update, in order.
    pub inertia_trace: Vec<f64>,
    /// Bank the model was fit on, when known.
    pub domain: Option<Domain>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.prototypes.len()
    }

    pub fn with_phi(mut self, phi: f64) -> Self {
        self.phi = phi;
        self
    }

    /// Index of the most similar prototype, lowest index on ties.
    pub fn assign(&self, f: &[f64]) -> usize {
        nearest(&self.prototypes, f).0
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(prototypes: &[Vec<f64>], f: &[f64]) -> (usize, f64) {
    let sims: Vec<f64> = prototypes.iter().map(|p| cosine_sim(p, f)).collect();
    let best = argmax(&sims);
    (best, sims[best])
}

/// Greedy k-means++ seeding; returns the indices of the chosen centers.
pub fn kmeans_pp_init(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(PcsError::TooManyClusters { k, n });
    }
    let mut rng = seed::rng(seed, &[seed::CLUSTERING]);
    let trials = 2 + (k as f64).ln().floor() as usize;

    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = vectors
        .iter()
        .map(|v| (1.0 - cosine_sim(v, &vectors[first])).max(0.0))
        .collect();

    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            // every remaining point coincides with a center
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        } else {
            let mut best: Option<(usize, f64)> = None;
            for _ in 0..trials {
                let cand = sample_weighted(&dist, total, rng.random::<f64>());
                let potential: f64 = vectors
                    .iter()
                    .zip(&dist)
                    .map(|(v, &d)| d.min((1.0 - cosine_sim(v, &vectors[cand])).max(0.0)))
                    .sum();
                if best.is_none_or(|(_, p)| potential < p) {
                    best = Some((cand, potential));
                }
            }
            best.expect("trials >= 2").0
        };
        for (d, v) in dist.iter_mut().zip(vectors) {
            *d = d.min((1.0 - cosine_sim(v, &vectors[next])).max(0.0));
        }
        chosen.push(next);
    }
    Ok(chosen)
}

fn sample_weighted(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if acc > target {
                return i;
            }
        }
    }
    last_positive
}

/// Fits `k` unit prototypes with seeded k-means++ initialization.
pub fn spherical_kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<ClusterModel> {
    let centers = kmeans_pp_init(vectors, k, seed)?
        .into_iter()
        .map(|i| vectors[i].clone())
        .collect();
    spherical_kmeans_from(vectors, centers, params)
}

/// Lloyd iterations from explicit initial centers.
pub fn spherical_kmeans_from(
    vectors: &[Vec<f64>],
    initial_centers: Vec<Vec<f64>>,
    params: KMeansParams,
) -> Result<ClusterModel> {
    let n = vectors.len();
    let k = initial_centers.len();
    if k == 0 || k > n {
        return Err(PcsError::TooManyClusters { k, n });
    }
    if params.max_iter == 0 {
        return Err(PcsError::InvalidConfig("max_iter must be at least 1".into()));
    }
    let mut prototypes = initial_centers;
    let mut assignments = assign_with_repair(vectors, &mut prototypes);
    let mut trace = Vec::new();

    for _ in 0..params.max_iter {
        update_prototypes(vectors, &assignments, &mut prototypes);
        let inertia = inertia_of(vectors, &assignments, &prototypes);
        let improvement = trace.last().map_or(f64::INFINITY, |prev| prev - inertia);
        trace.push(inertia);

        let next = assign_with_repair(vectors, &mut prototypes);
        let unchanged = next == assignments;
        assignments = next;
        if unchanged || improvement < params.tol {
            break;
        }
    }

    let inertia = inertia_of(vectors, &assignments, &prototypes);
    Ok(ClusterModel {
        prototypes,
        assignments,
        phi: DEFAULT_PHI,
        inertia,
        inertia_trace: trace,
        domain: None,
    })
}

fn inertia_of(vectors: &[Vec<f64>], assignments: &[usize], prototypes: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .zip(assignments)
        .map(|(v, &a)| 1.0 - cosine_sim(v, &prototypes[a]))
        .sum()
}

fn update_prototypes(vectors: &[Vec<f64>], assignments: &[usize], prototypes: &mut [Vec<f64>]) {
    let dim = vectors[0].len();
    let mut sums = vec![vec![0.0; dim]; prototypes.len()];
    let mut counts = vec![0usize; prototypes.len()];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    for ((proto, sum), count) in prototypes.iter_mut().zip(sums).zip(counts) {
        if count == 0 {
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        // a zero mean has no direction; keep the previous prototype
        if let Ok(unit) = l2_normalize(&mean) {
            *proto = unit;
        }
    }
}

/// Assigns every vector to its nearest prototype. Empty clusters are repaired
/// by re-centering them on the worst-fitting vector of a multi-member cluster,
/// then everything is reassigned so assignments stay consistent with the
/// final prototypes.
fn assign_with_repair(vectors: &[Vec<f64>], prototypes: &mut [Vec<f64>]) -> Vec<usize> {
    let k = prototypes.len();
    let mut assignments = Vec::with_capacity(vectors.len());
    for _ in 0..=k {
        assignments.clear();
        let mut sims = Vec::with_capacity(vectors.len());
        let mut sizes = vec![0usize; k];
        for v in vectors {
            let (a, s) = nearest(prototypes, v);
            assignments.push(a);
            sims.push(s);
            sizes[a] += 1;
        }
        let empty: Vec<usize> = (0..k).filter(|&j| sizes[j] == 0).collect();
        if empty.is_empty() {
            break;
        }
        let mut taken = vec![false; vectors.len()];
        for j in empty {
            let worst = (0..vectors.len())
                .filter(|&i| !taken[i] && sizes[assignments[i]] > 1)
                .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            let Some(i) = worst else { break };
            taken[i] = true;
            sizes[assignments[i]] -= 1;
            sizes[j] += 1;
            prototypes[j] = vectors[i].clone();
        }
    }
    assignments
}

/// The `(k_m, seed_m)` pairs for the repeated clusterings of one bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSchedule {
    counts: Vec<usize>,
    seeds: Vec<u64>,
}

impl ClusterSchedule {
    pub fn new(counts: Vec<usize>, seeds: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(PcsError::InvalidConfig(
                "cluster schedule needs at least one run".into(),
            ));
        }
        if counts.len() != seeds.len() {
            return Err(PcsError::InvalidConfig(format!(
                "cluster schedule has {} counts but {} seeds",
                counts.len(),
                seeds.len()
            )));
        }
        if counts.contains(&0) {
            return Err(PcsError::InvalidConfig("cluster counts must be >= 1".into()));
        }
        Ok(Self { counts, seeds })
    }

    /// `runs` clusterings: the first half with `n_classes` clusters, the rest
    /// with `2 * n_classes`.
    pub fn default_for(n_classes: usize, runs: usize, base_seed: u64) -> Result<Self> {
        let half = runs.div_ceil(2);
        let counts = (0..runs)
            .map(|m| if m < half { n_classes } else { 2 * n_classes })
            .collect();
        let seeds = (0..runs as u64).map(|m| seed::derive(base_seed, &[m])).collect();
        Self::new(counts, seeds)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Copy with every count capped at `n`.
    pub fn capped(&self, n: usize) -> Self {
        Self {
            counts: self.counts.iter().map(|&k| k.min(n)).collect(),
            seeds: self.seeds.clone(),
        }
    }
}

/// One independent fit per schedule entry.
pub fn multi_cluster(
    vectors: &[Vec<f64>],
    schedule: &ClusterSchedule,
    phi: f64,
    params: KMeansParams,
) -> Result<Vec<ClusterModel>> {
    if !(phi > 0.0) {
        return Err(PcsError::InvalidTemperature(phi));
    }
    schedule
        .counts
        .iter()
        .zip(&schedule.seeds)
        .map(|(&k, &s)| spherical_kmeans(vectors, k, s, params).map(|m| m.with_phi(phi)))
        .collect()
}

/// [`multi_cluster`] over a bank snapshot, tagging each model with the
/// bank's domain.
pub fn cluster_bank(
    bank: &MemoryBank,
    schedule: &ClusterSchedule,
    phi: f64,
    params: KMeansParams,
) -> Result<Vec<ClusterModel>> {
    let mut models = multi_cluster(bank.vectors(), schedule, phi, params)?;
    for m in &mut models {
        m.domain = Some(bank.domain());
    }
    Ok(models)
}

/// Fraction of samples whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assignments.len(), labels.len());
    if assignments.is_empty() {
        return 1.0;
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; c]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l] += 1;
    }
    let majority: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    majority as f64 / assignments.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mean_vector, norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if norm(&v) > 1e-3 {
                return unit(&v);
            }
        }
    }

    fn antipodal_groups() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for (g, sign) in [1.0, -1.0].into_iter().enumerate() {
            for i in 0..6 {
                let angle = (i as f64 - 2.5) * 0.02;
                vectors.push(vec![sign * angle.cos(), sign * angle.sin()]);
                labels.push(g);
            }
        }
        (vectors, labels)
    }

    /// Cost of the best prototypes for a fixed 2-partition.
    fn partition_cost(vectors: &[Vec<f64>], mask: u32) -> f64 {
        let mut cost = 0.0;
        for side in [0, 1] {
            let members: Vec<&[f64]> = vectors
                .iter()
                .enumerate()
                .filter(|(i, _)| ((mask >> i) & 1) as usize == side)
                .map(|(_, v)| v.as_slice())
                .collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mean = mean_vector(members.iter().copied()).unwrap();
            // A zero mean makes every prototype equally good: sum of cos is 0.
            cost += match l2_normalize(&mean) {
                Ok(mu) => members.iter().map(|v| 1.0 - cosine_sim(v, &mu)).sum::<f64>(),
                Err(_) => members.len() as f64,
            };
        }
        cost
    }

    #[test]
    fn antipodal_groups_match_brute_force_partition() {
        let (vectors, labels) = antipodal_groups();
        let n = vectors.len() as u32;
        // brute force over all 2-partitions (fixing point 0 on side 0)
        let best_mask = (0..(1u32 << n))
            .filter(|m| m & 1 == 0)
            .min_by(|&a, &b| partition_cost(&vectors, a).total_cmp(&partition_cost(&vectors, b)))
            .unwrap();
        let oracle: Vec<usize> = (0..n).map(|i| ((best_mask >> i) & 1) as usize).collect();
        assert_eq!(oracle, labels);

        for seed in 0..10 {
            let model = spherical_kmeans(&vectors, 2, seed, KMeansParams::default()).unwrap();
            assert!(same_partition(&model.assignments, &oracle));
        }
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        let n = a.len();
        (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vectors: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 5)).collect();
        let model = spherical_kmeans(&vectors, 1, 11, KMeansParams::default()).unwrap();
        let expected = unit(&mean_vector(vectors.iter().map(Vec::as_slice)).unwrap());
        assert!(model.assignments.iter().all(|&a| a == 0));
        for (a, b) in model.prototypes[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_clustering_reproduces_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vectors: Vec<Vec<f64>> = (0..9).map(|_| random_unit(&mut rng, 4)).collect();
        let model = spherical_kmeans(&vectors, 9, 1, KMeansParams::default()).unwrap();
        let mut seen = vec![false; 9];
        for (i, &a) in model.assignments.iter().enumerate() {
            assert!(!seen[a]);
            seen[a] = true;
            for (x, y) in model.prototypes[a].iter().zip(&vectors[i]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(model.inertia.abs() < 1e-12);
    }

    #[test]
    fn too_many_clusters() {
        let vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            spherical_kmeans(&vectors, 3, 0, KMeansParams::default()),
            Err(PcsError::TooManyClusters { k: 3, n: 2 })
        ));
    }

    #[test]
    fn assign_examples() {
        let model = ClusterModel {
            prototypes: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            assignments: vec![],
            phi: DEFAULT_PHI,
            inertia: 0.0,
            inertia_trace: vec![],
            domain: None,
        };
        assert_eq!(model.assign(&[0.0, 0.0, 1.0]), 2);
        let s = 1.0 / 3f64.sqrt();
        assert_eq!(model.assign(&[s, s, s]), 0);

        let two = ClusterModel {
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ..model
        };
        assert_eq!(two.assign(&[0.6, 0.8]), 1);
    }

    #[test]
    fn fitted_state_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<Vec<f64>> = (0..300).map(|_| random_unit(&mut rng, 6)).collect();
        for k in [2, 5, 10, 30] {
            let model = spherical_kmeans(&vectors, k, 42, KMeansParams::default()).unwrap();
            for w in model.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "inertia rose: {w:?}");
            }
            assert!(model.cluster_sizes().iter().all(|&s| s > 0));
            for (v, &a) in vectors.iter().zip(&model.assignments) {
                assert_eq!(model.assign(v), a);
            }
            for p in &model.prototypes {
                assert!((norm(p) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_preserves_partition_with_canonical_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vectors: Vec<Vec<f64>> = (0..120).map(|_| random_unit(&mut rng, 3)).collect();
        let init: Vec<Vec<f64>> = kmeans_pp_init(&vectors, 4, 8)
            .unwrap()
            .into_iter()
            .map(|i| vectors[i].clone())
            .collect();
        let base = spherical_kmeans_from(&vectors, init.clone(), KMeansParams::default()).unwrap();

        let perm: Vec<usize> = (0..vectors.len()).map(|i| (i * 37 + 11) % vectors.len()).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| vectors[i].clone()).collect();
        let other = spherical_kmeans_from(&permuted, init, KMeansParams::default()).unwrap();
        let unpermuted: Vec<usize> = {
            let mut out = vec![0; vectors.len()];
            for (pos, &i) in perm.iter().enumerate() {
                out[i] = other.assignments[pos];
            }
            out
        };
        assert!(same_partition(&base.assignments, &unpermuted));
    }

    #[test]
    fn schedule_defaults_and_determinism() {
        let schedule = ClusterSchedule::default_for(5, 20, 1).unwrap();
        assert_eq!(schedule.len(), 20);
        assert_eq!(schedule.counts().iter().filter(|&&k| k == 5).count(), 10);
        assert_eq!(schedule.counts().iter().filter(|&&k| k == 10).count(), 10);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vectors: Vec<Vec<f64>> = (0..50).map(|_| random_unit(&mut rng, 4)).collect();
        let single = ClusterSchedule::new(vec![3], vec![77]).unwrap();
        let fits = multi_cluster(&vectors, &single, 0.2, KMeansParams::default()).unwrap();
        let direct = spherical_kmeans(&vectors, 3, 77, KMeansParams::default()).unwrap();
        assert_eq!(fits, vec![direct.with_phi(0.2)]);

        let twin = ClusterSchedule::new(vec![4, 4], vec![9, 9]).unwrap();
        let fits = multi_cluster(&vectors, &twin, 0.1, KMeansParams::default()).unwrap();
        assert_eq!(fits[0], fits[1]);
    }

    #[test]
    fn schedule_validation() {
        assert!(ClusterSchedule::new(vec![], vec![]).is_err());
        assert!(ClusterSchedule::new(vec![0], vec![1]).is_err());
        assert!(ClusterSchedule::new(vec![2], vec![]).is_err());
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
        assert_eq!(purity(&[0, 0, 0, 1], &[0, 1, 0, 1]), 0.75);
    }
}
