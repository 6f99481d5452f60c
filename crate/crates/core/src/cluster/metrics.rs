use serde::Serialize;

use super::kmeans::{sq_dist, KMeansResult};
use crate::error::{Error, Result};

/// Compactness and separation of the object cluster.
///
/// `d_cc`, the ratios and `ch_score` are `None` where undefined (a single
/// cluster, or zero within-cluster spread).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterMetrics {
    /// Mean distance of object-cluster points to their center.
    pub d_ic: f64,
    /// Largest such distance.
    pub d_r: f64,
    /// Object center's distances to all centers, summed, over `k - 1`.
    pub d_cc: Option<f64>,
    pub ratio_ic: Option<f64>,
    pub ratio_r: Option<f64>,
    pub ch_score: Option<f64>,
}

fn ratio(num: Option<f64>, den: f64) -> Option<f64> {
    num.filter(|_| den > 0.0).map(|n| n / den)
}

/// Diagnostics for `object_cluster` of a fit over the flat `points` buffer.
pub fn clustering_metrics(points: &[f64], dim: usize, result: &KMeansResult, object_cluster: usize) -> Result<ClusterMetrics> {
    let n = points.len() / dim.max(1);
    if n != result.assignments.len() {
        return Err(Error::Shape(format!(
            "{n} points but {} assignments",
            result.assignments.len()
        )));
    }
    if object_cluster >= result.k {
        return Err(Error::InvalidArgument(format!(
            "object cluster {object_cluster} out of range for k={}",
            result.k
        )));
    }
    let center = &result.centers[object_cluster];
    let dists: Vec<f64> = result
        .assignments
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == object_cluster)
        .map(|(i, _)| sq_dist(&points[i * dim..(i + 1) * dim], center).sqrt())
        .collect();
    if dists.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "object cluster {object_cluster} is empty"
        )));
    }
    let d_ic = dists.iter().sum::<f64>() / dists.len() as f64;
    let d_r = dists.iter().copied().fold(0.0, f64::max);
    let d_cc = (result.k > 1).then(|| {
        result
            .centers
            .iter()
            .map(|c| sq_dist(center, c).sqrt())
            .sum::<f64>()
            / (result.k - 1) as f64
    });
    Ok(ClusterMetrics {
        d_ic,
        d_r,
        d_cc,
        ratio_ic: ratio(d_cc, d_ic),
        ratio_r: ratio(d_cc, d_r),
        ch_score: calinski_harabasz(points, dim, result),
    })
}

/// `tr(B) / tr(W) * (n - k) / (k - 1)` over all clusters, with `k` the
/// number of nonempty clusters.
pub fn calinski_harabasz(points: &[f64], dim: usize, result: &KMeansResult) -> Option<f64> {
    let n = result.assignments.len();
    let sizes = result.cluster_sizes();
    let k = sizes.iter().filter(|&&s| s > 0).count();
    if k < 2 || n <= k {
        return None;
    }
    let mut global = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        for (g, v) in global.iter_mut().zip(p) {
            *g += v;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);

    let within: f64 = points
        .chunks_exact(dim)
        .zip(&result.assignments)
        .map(|(p, &a)| sq_dist(p, &result.centers[a]))
        .sum();
    let between: f64 = sizes
        .iter()
        .zip(&result.centers)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, c)| s as f64 * sq_dist(c, &global))
        .sum();
    (within > 0.0).then(|| between / within * (n - k) as f64 / (k - 1) as f64)
}
