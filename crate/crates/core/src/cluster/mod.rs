//! Token clustering with the class token as foreground anchor, plus the
//! clustering-quality diagnostics.

mod kmeans;
mod metrics;
mod similarity;

pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use metrics::{calinski_harabasz, clustering_metrics, ClusterMetrics};
pub use similarity::{similarity_curve, similarity_matrix, SimilarityMatrix};

use serde::Serialize;

use crate::error::Result;
use crate::maskops::Mask;
use crate::merge::MergedMap;

/// Clustering of one merged map. The class token is clustered as one extra
/// point after the `height * width` grid tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterResult {
    pub height: usize,
    pub width: usize,
    pub class_token_cluster: usize,
    /// Fit over grid tokens followed by the class token.
    pub fit: KMeansResult,
}

impl ClusterResult {
    /// Grid-token assignments, row-major, class token excluded.
    pub fn assignments(&self) -> &[usize] {
        &self.fit.assignments[..self.height * self.width]
    }

    pub fn k(&self) -> usize {
        self.fit.k
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.fit.centers
    }
}

/// Grid tokens then the class token as a flat `(n + 1) x dim` buffer.
pub fn token_points(map: &MergedMap) -> Vec<f64> {
    map.grid
        .iter()
        .chain(&map.class_token)
        .map(|&v| v as f64)
        .collect()
}

pub fn cluster_tokens(map: &MergedMap, params: &KMeansParams) -> Result<ClusterResult> {
    let points = token_points(map);
    let fit = kmeans(&points, map.dim, params)?;
    let class_token_cluster = fit.assignments[map.cells()];
    Ok(ClusterResult {
        height: map.height,
        width: map.width,
        class_token_cluster,
        fit,
    })
}

/// Cells sharing the class token's cluster.
pub fn foreground_mask(result: &ClusterResult) -> Mask {
    Mask {
        height: result.height,
        width: result.width,
        bits: result
            .assignments()
            .iter()
            .map(|&a| a == result.class_token_cluster)
            .collect(),
    }
}

/// Euclidean distance from the merged class token to its cluster center.
pub fn class_token_affinity(map: &MergedMap, result: &ClusterResult) -> f64 {
    map.class_token
        .iter()
        .zip(&result.fit.centers[result.class_token_cluster])
        .map(|(&a, b)| (a as f64 - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merged(h: usize, w: usize, dim: usize, grid: Vec<f32>, class_token: Vec<f32>) -> MergedMap {
        MergedMap {
            height: h,
            width: w,
            dim,
            grid,
            class_token,
        }
    }

    /// 4x4 grid, left half near 0, right half near 10, 1-D tokens.
    fn two_blobs(class_value: f32) -> MergedMap {
        let grid = (0..16)
            .map(|i| {
                let jitter = ((i * 7) % 5) as f32 * 0.05;
                if i % 4 < 2 {
                    jitter
                } else {
                    10.0 + jitter
                }
            })
            .collect();
        merged(4, 4, 1, grid, vec![class_value])
    }

    #[test]
    fn class_token_selects_its_blob() {
        let params = KMeansParams {
            k: 2,
            ..Default::default()
        };
        for (value, right) in [(10.1f32, true), (0.1, false)] {
            let r = cluster_tokens(&two_blobs(value), &params).unwrap();
            let mask = foreground_mask(&r);
            for i in 0..16 {
                assert_eq!(mask.bits[i], (i % 4 >= 2) == right);
            }
            assert_eq!(mask.count_ones(), 8);
        }
    }

    #[test]
    fn constant_grid_degenerates_cleanly() {
        let m = merged(3, 3, 2, vec![0.7; 18], vec![0.7, 0.7]);
        let r = cluster_tokens(&m, &KMeansParams::default()).unwrap();
        assert!(r.assignments().iter().all(|&a| a == r.assignments()[0]));
        assert!(foreground_mask(&r).bits.iter().all(|&b| b));
    }

    #[test]
    fn class_token_in_own_cluster_gives_empty_mask() {
        let mut m = two_blobs(500.0);
        m.grid.iter_mut().for_each(|v| *v = v.min(0.2));
        let r = cluster_tokens(
            &m,
            &KMeansParams {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(foreground_mask(&r).is_empty());
    }

    #[test]
    fn vit_scale_shapes_are_accepted() {
        let (h, w, d) = (24, 24, 768);
        let grid: Vec<f32> = (0..h * w * d).map(|i| ((i * 2654435761usize) % 1000) as f32 / 1000.0).collect();
        let m = merged(h, w, d, grid, vec![0.5; d]);
        let r = cluster_tokens(
            &m,
            &KMeansParams {
                restarts: 1,
                max_iter: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.assignments().len(), 576);
        assert_eq!(r.k(), 3);
    }

    #[test]
    fn affinity_is_distance_to_own_center() {
        let m = merged(1, 2, 1, vec![0.0, 2.0], vec![3.0]);
        let r = ClusterResult {
            height: 1,
            width: 2,
            class_token_cluster: 0,
            fit: KMeansResult {
                assignments: vec![0, 0, 0],
                centers: vec![vec![1.0]],
                k: 1,
                inertia: 0.0,
                iterations: 1,
                seed: 0,
            },
        };
        assert_eq!(class_token_affinity(&m, &r), 2.0);
        let at_center = merged(1, 2, 1, vec![0.0, 2.0], vec![1.0]);
        assert_eq!(class_token_affinity(&at_center, &r), 0.0);
    }
}
