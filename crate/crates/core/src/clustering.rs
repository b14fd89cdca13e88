//! Lloyd's k-means with k-means++ seeding, and the two-stage
//! (global, then per-domain) centroid construction used to initialize the
//! domain classifiers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::numerics::{squared_distance, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once the relative inertia decrease falls below this.
    pub tol: f64,
    /// Independent k-means++ restarts when no initial centroids are given;
    /// the lowest-inertia result wins.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub history: Vec<f64>,
    /// Centroid slots that were reseeded because their cluster emptied.
    pub reseeded: Vec<bool>,
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(points: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    points
        .row_iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, centroids.row(a)))
        .sum()
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.row_iter().enumerate() {
        let d = squared_distance(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.index(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.row_iter().map(|p| squared_distance(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.index(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (d, p) in d2.iter_mut().zip(points.row_iter()) {
            *d = d.min(squared_distance(p, centroids.row(c)));
        }
    }
    centroids
}

/// Assigns every point to its nearest centroid. Empty clusters are repaired
/// by moving their centroid onto the point farthest from its own centroid.
fn assign(points: &Matrix, centroids: &mut Matrix, assignments: &mut [usize], reseeded: &mut [bool]) -> f64 {
    let k = centroids.rows();
    let nearest_all: Vec<(usize, f64)> = (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids))
        .collect();
    let mut dist: Vec<f64> = Vec::with_capacity(points.rows());
    for (i, (c, d)) in nearest_all.into_iter().enumerate() {
        assignments[i] = c;
        dist.push(d);
    }
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // farthest point whose own cluster keeps at least one member
        let far = (0..points.rows())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&i, &j| dist[i].total_cmp(&dist[j]).then(j.cmp(&i)));
        let Some(far) = far else { break };
        counts[assignments[far]] -= 1;
        counts[c] += 1;
        assignments[far] = c;
        dist[far] = 0.0;
        centroids.row_mut(c).copy_from_slice(points.row(far));
        reseeded[c] = true;
    }
    dist.iter().sum()
}

fn update_means(points: &Matrix, assignments: &[usize], centroids: &mut Matrix) {
    let k = centroids.rows();
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &a) in points.row_iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums.row_mut(a).iter_mut().zip(p) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
}

/// Hartigan refinement: moves single points between clusters whenever the
/// move lowers the total inertia, until no such move exists. Centroids must
/// be the means of `assignments` on entry and are exact means on exit.
/// Returns whether any point moved.
fn hartigan(points: &Matrix, assignments: &mut [usize], centroids: &mut Matrix) -> bool {
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for (i, x) in points.row_iter().enumerate() {
            let from = assignments[i];
            let n_from = counts[from] as f64;
            if counts[from] <= 1 {
                continue;
            }
            let removal_gain = n_from / (n_from - 1.0) * squared_distance(x, centroids.row(from));
            let mut best = (from, removal_gain);
            for c in (0..k).filter(|&c| c != from) {
                let n_c = counts[c] as f64;
                let cost = n_c / (n_c + 1.0) * squared_distance(x, centroids.row(c));
                if cost < best.1 {
                    best = (c, cost);
                }
            }
            let (to, cost) = best;
            // relative margin keeps rounding noise from cycling points
            if to == from || cost >= removal_gain * (1.0 - 1e-12) {
                continue;
            }
            let n_to = counts[to] as f64;
            for (c, xi) in centroids.row_mut(from).iter_mut().zip(x) {
                *c = (n_from * *c - xi) / (n_from - 1.0);
            }
            for (c, xi) in centroids.row_mut(to).iter_mut().zip(x) {
                *c = (n_to * *c + xi) / (n_to + 1.0);
            }
            counts[from] -= 1;
            counts[to] += 1;
            assignments[i] = to;
            moved = true;
        }
        if !moved {
            break;
        }
        moved_any = true;
        update_means(points, assignments, centroids);
    }
    moved_any
}

fn lloyd(points: &Matrix, mut centroids: Matrix, opts: &KMeansOptions, refine: bool) -> KMeansResult {
    let k = centroids.rows();
    let mut assignments = vec![0usize; points.rows()];
    let mut reseeded = vec![false; k];
    let mut history = Vec::<f64>::new();
    loop {
        let cur = assign(points, &mut centroids, &mut assignments, &mut reseeded);
        let converged = match history.last() {
            Some(&prev) => prev - cur <= opts.tol * prev.max(f64::MIN_POSITIVE),
            None => false,
        };
        history.push(cur);
        if history.len() > opts.max_iters {
            break;
        }
        update_means(points, &assignments, &mut centroids);
        if converged && (!refine || !hartigan(points, &mut assignments, &mut centroids)) {
            // report against the exact means of the final partition
            let exact = inertia(points, &centroids, &assignments);
            history.push(exact.min(cur));
            break;
        }
    }
    KMeansResult {
        inertia: *history.last().unwrap(),
        centroids,
        assignments,
        history,
        reseeded,
    }
}

/// Lloyd's algorithm from `init` (k × L) or, when absent, from the best of
/// `opts.restarts` k-means++ seedings. Unseeded runs also try single-point
/// Hartigan moves once Lloyd settles, resuming Lloyd if any succeeds; seeded
/// runs are plain Lloyd so a converged seed is a fixed point. The returned
/// centroids are the means of the final partition, every point is nearest to
/// its own centroid, and no cluster is empty.
pub fn kmeans(points: &Matrix, k: usize, init: Option<&Matrix>, opts: &KMeansOptions, rng: &mut Rng) -> Result<KMeansResult> {
    if k == 0 || points.rows() < k {
        return Err(Error::invalid(format!("k-means needs N ≥ k ≥ 1 (N = {}, k = {k})", points.rows())));
    }
    match init {
        Some(c) => {
            if c.rows() != k || c.cols() != points.cols() {
                return Err(Error::invalid(format!(
                    "initial centroids are {}x{}, expected {k}x{}",
                    c.rows(),
                    c.cols(),
                    points.cols()
                )));
            }
            Ok(lloyd(points, c.clone(), opts, false))
        }
        None => {
            let mut best: Option<KMeansResult> = None;
            for _ in 0..opts.restarts.max(1) {
                let seeds = kmeans_plus_plus(points, k, rng);
                let run = lloyd(points, seeds, opts, true);
                if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                    best = Some(run);
                }
            }
            Ok(best.unwrap())
        }
    }
}

/// One clustering granularity: global centroids on the union of both banks
/// and the per-domain refinements seeded from them. Row `c` of
/// `centroids_a`, `centroids_b` and `global_centroids` share lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRun {
    pub k: usize,
    pub global_centroids: Matrix,
    pub centroids_a: Matrix,
    pub centroids_b: Matrix,
    pub assignments_a: Vec<usize>,
    pub assignments_b: Vec<usize>,
    /// Rows of the domain centroids that were reseeded during refinement and
    /// so no longer descend from their global seed.
    pub reseeded_a: Vec<bool>,
    pub reseeded_b: Vec<bool>,
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.as_slice().len() + b.as_slice().len());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("same width")
}

pub fn two_stage_centroids(bank_a: &MemoryBank, bank_b: &MemoryBank, k: usize, opts: &KMeansOptions, rng: &mut Rng) -> Result<ClusterRun> {
    if bank_a.len() < k || bank_b.len() < k {
        return Err(Error::invalid(format!(
            "k = {k} exceeds a domain's sample count (N_A = {}, N_B = {})",
            bank_a.len(),
            bank_b.len()
        )));
    }
    let union = stack(bank_a.rows(), bank_b.rows());
    let global = kmeans(&union, k, None, opts, rng)?;
    let ra = kmeans(bank_a.rows(), k, Some(&global.centroids), opts, rng)?;
    let rb = kmeans(bank_b.rows(), k, Some(&global.centroids), opts, rng)?;
    Ok(ClusterRun {
        k,
        global_centroids: global.centroids,
        centroids_a: ra.centroids,
        centroids_b: rb.centroids,
        assignments_a: ra.assignments,
        assignments_b: rb.assignments,
        reseeded_a: ra.reseeded,
        reseeded_b: rb.reseeded,
    })
}

/// `runs` clusterings with `k_r = r · base_k`, `r = 1..=runs`.
pub fn build_cluster_runs(bank_a: &MemoryBank, bank_b: &MemoryBank, base_k: usize, runs: usize, opts: &KMeansOptions, seed: u64) -> Result<Vec<ClusterRun>> {
    if base_k == 0 || runs == 0 {
        return Err(Error::invalid("base cluster count and number of runs must be ≥ 1"));
    }
    let min_n = bank_a.len().min(bank_b.len());
    let too_big: Vec<usize> = (1..=runs).map(|r| r * base_k).filter(|&k| k > min_n).collect();
    if !too_big.is_empty() {
        return Err(Error::invalid(format!(
            "cluster counts {too_big:?} exceed the smaller domain's {min_n} samples"
        )));
    }
    let root = Rng::new(seed);
    (1..=runs)
        .map(|r| two_stage_centroids(bank_a, bank_b, r * base_k, opts, &mut root.derive(0x6b6d + r as u64)))
        .collect()
}
