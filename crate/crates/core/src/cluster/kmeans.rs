use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the relative inertia improvement falls to this value.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 3,
            seed: 0,
            restarts: 10,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

/// Partition of a point set with its centers.
///
/// Cluster ids are canonical: ordered by the index of each cluster's first
/// member; clusters left empty (duplicate points) take the trailing ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row `i` of a flat `n x dim` buffer.
fn row(points: &[f64], dim: usize, i: usize) -> &[f64] {
    &points[i * dim..(i + 1) * dim]
}

/// Lloyd's algorithm from k-means++ seeding, best of `restarts` runs.
///
/// `points` is a flat row-major `n x dim` buffer.
pub fn kmeans(points: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "point buffer of {} values is not a multiple of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    let k = params.k;
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if params.tol.is_nan() || params.tol < 0.0 {
        return Err(Error::InvalidArgument("tol must be nonnegative".into()));
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "point {} dim {} is not finite",
            i / dim,
            i % dim
        )));
    }
    let restarts = params.restarts.max(1);
    let runs: Vec<KMeansResult> = (0..restarts)
        .into_par_iter()
        .map(|r| single_run(points, dim, n, params, r as u64))
        .collect();
    // Strict `<` keeps the lowest restart index on ties.
    let best = runs
        .into_iter()
        .reduce(|best, cand| if cand.inertia < best.inertia { cand } else { best })
        .expect("at least one restart");
    Ok(best)
}

fn single_run(points: &[f64], dim: usize, n: usize, params: &KMeansParams, restart: u64) -> KMeansResult {
    let k = params.k;
    let mut rng = rng_for(params.seed, restart);
    let mut centers = seed_plus_plus(points, dim, n, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    let mut inertia;

    loop {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let a = nearest(row(points, dim, i), &centers);
            if assignments[i] != a {
                assignments[i] = a;
                changed = true;
            }
        }
        changed |= repair_empty(points, dim, &centers, &mut assignments, k);
        centers = means(points, dim, &assignments, k, &centers);
        inertia = (0..n)
            .map(|i| sq_dist(row(points, dim, i), &centers[assignments[i]]))
            .sum::<f64>();
        if !changed || iterations >= params.max_iter {
            break;
        }
        if prev_inertia.is_finite() && prev_inertia - inertia <= params.tol * prev_inertia {
            break;
        }
        prev_inertia = inertia;
    }

    canonicalize(KMeansResult {
        assignments,
        centers,
        k,
        inertia,
        iterations,
        seed: params.seed,
    })
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn seed_plus_plus(points: &[f64], dim: usize, n: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(row(points, dim, rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(row(points, dim, i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            rng.random_range(0..n)
        };
        let c = row(points, dim, pick).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(points, dim, i), &c));
        }
        centers.push(c);
    }
    centers
}

/// Moves the farthest point of a multi-member cluster into each empty
/// cluster. Points sitting exactly on their center are never moved, so
/// fully duplicated data keeps its empty clusters.
fn repair_empty(points: &[f64], dim: usize, centers: &[Vec<f64>], assignments: &mut [usize], k: usize) -> bool {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut moved = false;
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let far = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .map(|i| (i, sq_dist(row(points, dim, i), &centers[assignments[i]])))
            .filter(|&(_, d)| d > 0.0)
            .fold(None, |best: Option<(usize, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((i, _)) = far {
            sizes[assignments[i]] -= 1;
            assignments[i] = j;
            sizes[j] = 1;
            moved = true;
        }
    }
    moved
}

fn means(points: &[f64], dim: usize, assignments: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(row(points, dim, i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(j, (s, c))| {
            if c == 0 {
                previous[j].clone()
            } else {
                s.into_iter().map(|v| v / c as f64).collect()
            }
        })
        .collect()
}

fn canonicalize(mut r: KMeansResult) -> KMeansResult {
    let mut relabel = vec![usize::MAX; r.k];
    let mut next = 0;
    for &a in &r.assignments {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }
    for slot in relabel.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next;
        next += 1;
    }
    let mut centers = vec![Vec::new(); r.k];
    for (old, c) in r.centers.drain(..).enumerate() {
        centers[relabel[old]] = c;
    }
    r.centers = centers;
    for a in &mut r.assignments {
        *a = relabel[*a];
    }
    r
}
