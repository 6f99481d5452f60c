//! Weighted fusion of the token layers and the positional embedding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_io::TokenMap;

/// Nonnegative fusion weights: three token layers and the positional map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeRatios {
    pub alpha_0: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    pub alpha_p: f64,
}

impl Default for MergeRatios {
    fn default() -> Self {
        MergeRatios::new(0.25, 0.25, 0.25, 0.25)
    }
}

impl MergeRatios {
    pub const fn new(alpha_0: f64, alpha_1: f64, alpha_2: f64, alpha_p: f64) -> Self {
        MergeRatios {
            alpha_0,
            alpha_1,
            alpha_2,
            alpha_p,
        }
    }

    pub fn layers(&self) -> [f64; 3] {
        [self.alpha_0, self.alpha_1, self.alpha_2]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_0, self.alpha_1, self.alpha_2, self.alpha_p];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "merge ratios must be finite and nonnegative: {self}"
            )));
        }
        if all.iter().all(|&a| a == 0.0) {
            return Err(Error::InvalidArgument(
                "at least one merge ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for MergeRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.alpha_0, self.alpha_1, self.alpha_2, self.alpha_p
        )
    }
}

impl FromStr for MergeRatios {
    type Err = Error;

    /// Parses `a0,a1,a2,ap`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "expected four comma-separated ratios, got {s:?}"
            )));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad ratio {p:?}")))?;
        }
        let r = MergeRatios::new(v[0], v[1], v[2], v[3]);
        r.validate()?;
        Ok(r)
    }
}

/// Fused H x W x D grid and fused class token.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `[row][col][dim]`
    pub grid: Vec<f32>,
    pub class_token: Vec<f32>,
}

impl MergedMap {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Token of cell `i` in row-major order.
    pub fn token(&self, i: usize) -> &[f32] {
        &self.grid[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f32]> {
        self.grid.chunks_exact(self.dim)
    }
}

/// `sum_i alpha_i * layer_i + alpha_p * positional`, for the grid and the
/// class token.
///
/// The positional class entry is skipped with a warning when the map has
/// none.
pub fn merge_maps(map: &TokenMap, ratios: &MergeRatios) -> Result<MergedMap> {
    ratios.validate()?;
    if map.n_layers > 3 {
        return Err(Error::Shape(format!(
            "expected at most 3 token layers, map has {}",
            map.n_layers
        )));
    }
    let layer_weights = ratios.layers();
    if let Some(i) = (map.n_layers..3).find(|&i| layer_weights[i] > 0.0) {
        return Err(Error::Shape(format!(
            "ratio alpha_{i} > 0 needs layer {i}, map has {} layer(s)",
            map.n_layers
        )));
    }
    let pos_grid = match (&map.pos_grid, ratios.alpha_p > 0.0) {
        (Some(p), true) => Some(p.as_slice()),
        (None, true) => {
            return Err(Error::Shape(
                "alpha_p > 0 but the token map has no positional grid".into(),
            ))
        }
        (_, false) => None,
    };
    let pos_class = if ratios.alpha_p > 0.0 {
        if map.pos_class.is_none() {
            log::warn!("positional class entry absent; merged class token omits it");
        }
        map.pos_class.as_deref()
    } else {
        None
    };

    let mut sources: Vec<(f64, &[f32], &[f32])> = (0..map.n_layers)
        .filter(|&i| layer_weights[i] > 0.0)
        .map(|i| (layer_weights[i], map.layer(i), map.class_token(i)))
        .collect();
    if let Some(pg) = pos_grid {
        sources.push((ratios.alpha_p, pg, pos_class.unwrap_or(&[])));
    }

    let grid = weighted_sum(map.layer_len(), sources.iter().map(|s| (s.0, s.1)));
    let class_token = weighted_sum(map.dim, sources.iter().map(|s| (s.0, s.2)));
    Ok(MergedMap {
        height: map.height,
        width: map.width,
        dim: map.dim,
        grid,
        class_token,
    })
}

/// `sum_s w_s * v_s[j]` in f64 for `j < len`; short sources contribute 0.
fn weighted_sum<'a>(len: usize, sources: impl Iterator<Item = (f64, &'a [f32])> + Clone) -> Vec<f32> {
    (0..len)
        .map(|j| {
            sources
                .clone()
                .filter_map(|(w, v)| v.get(j).map(|&x| w * x as f64))
                .sum::<f64>() as f32
        })
        .collect()
}

/// Fusion presets for the layer-count ablation.
///
/// Uniform weight over the first `n_layers_used` layer slots plus the
/// positional map; with `emphasize_last` the highest included slot counts
/// twice. Weights are normalized to sum to one.
pub fn layer_subset_ratios(n_layers_used: usize, emphasize_last: bool) -> MergeRatios {
    let n = n_layers_used.clamp(1, 3);
    let mut w = [0.0f64; 4];
    for slot in w.iter_mut().take(n) {
        *slot = 1.0;
    }
    if emphasize_last {
        w[n - 1] = 2.0;
    }
    w[3] = 1.0;
    let total: f64 = w.iter().sum();
    MergeRatios::new(w[0] / total, w[1] / total, w[2] / total, w[3] / total)
}
