//! Token-map interchange (CTM files) and the dataset manifest.

mod ctm;
mod manifest;

pub use ctm::{ctm_file_len, decode_token_map, encode_token_map, read_token_map, write_token_map, CTM_HEADER_LEN, CTM_MAGIC, CTM_VERSION};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ImageEntry};

use std::fmt;

/// Per-image stack of spatial token grids plus class tokens and an optional
/// positional-embedding grid.
///
/// `grid` is laid out `[layer][row][col][dim]`, `class_tokens` as
/// `[layer][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub n_layers: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub grid: Vec<f32>,
    pub class_tokens: Vec<f32>,
    pub pos_grid: Option<Vec<f32>>,
    pub pos_class: Option<Vec<f32>>,
}

impl TokenMap {
    /// Number of spatial cells per layer.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn layer_len(&self) -> usize {
        self.height * self.width * self.dim
    }

    /// Spatial grid of one layer, `[row][col][dim]`.
    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.layer_len();
        &self.grid[l * n..(l + 1) * n]
    }

    pub fn class_token(&self, l: usize) -> &[f32] {
        &self.class_tokens[l * self.dim..(l + 1) * self.dim]
    }

    pub fn token(&self, l: usize, row: usize, col: usize) -> &[f32] {
        let off = l * self.layer_len() + (row * self.width + col) * self.dim;
        &self.grid[off..off + self.dim]
    }
}

/// One failed invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Outcome of [`validate_token_map`]; empty iff the map is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: String) {
        self.violations.push(Violation(msg));
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<&str> = self.violations.iter().map(|v| v.0.as_str()).collect();
        f.write_str(&msgs.join("; "))
    }
}

/// Checks every [`TokenMap`] invariant without aborting.
///
/// Non-finite values are reported once per offending array, naming the
/// first bad position and the total count.
pub fn validate_token_map(map: &TokenMap) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dims = [
        ("n_layers", map.n_layers),
        ("height", map.height),
        ("width", map.width),
        ("dim", map.dim),
    ];
    for (name, v) in dims {
        if v == 0 {
            report.push(format!("{name} must be at least 1"));
        }
    }
    let grid_len = map.n_layers * map.layer_len();
    if map.grid.len() != grid_len {
        report.push(format!(
            "grid has {} values, expected {grid_len}",
            map.grid.len()
        ));
    } else if let Some((count, first)) = non_finite(&map.grid) {
        let layer_len = map.layer_len().max(1);
        let l = first / layer_len;
        let cell = (first % layer_len) / map.dim.max(1);
        let (row, col) = (cell / map.width.max(1), cell % map.width.max(1));
        report.push(format!(
            "non-finite value in grid: {count} value(s), first at layer {l} cell ({row}, {col}) dim {}",
            first % map.dim.max(1)
        ));
    }
    let class_len = map.n_layers * map.dim;
    if map.class_tokens.len() != class_len {
        report.push(format!(
            "class_tokens has {} values, expected {class_len}",
            map.class_tokens.len()
        ));
    } else if let Some((count, first)) = non_finite(&map.class_tokens) {
        report.push(format!(
            "non-finite value in class token: {count} value(s), first at layer {}",
            first / map.dim.max(1)
        ));
    }
    if let Some(pos) = &map.pos_grid {
        if pos.len() != map.layer_len() {
            report.push(format!(
                "pos_grid has {} values, expected {}",
                pos.len(),
                map.layer_len()
            ));
        } else if let Some((count, first)) = non_finite(pos) {
            let cell = first / map.dim.max(1);
            report.push(format!(
                "non-finite value in pos_grid: {count} value(s), first at cell ({}, {})",
                cell / map.width.max(1),
                cell % map.width.max(1)
            ));
        }
    }
    if let Some(pc) = &map.pos_class {
        if map.pos_grid.is_none() {
            report.push("pos_class present without pos_grid".to_string());
        }
        if pc.len() != map.dim {
            report.push(format!(
                "pos_class has {} values, expected {}",
                pc.len(),
                map.dim
            ));
        } else if let Some((count, _)) = non_finite(pc) {
            report.push(format!("non-finite value in pos_class: {count} value(s)"));
        }
    }
    report
}

fn non_finite(values: &[f32]) -> Option<(usize, usize)> {
    let first = values.iter().position(|v| !v.is_finite())?;
    let count = values[first..].iter().filter(|v| !v.is_finite()).count();
    Some((count, first))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_map() -> TokenMap {
        TokenMap {
            n_layers: 1,
            height: 2,
            width: 2,
            dim: 3,
            grid: (0..12).map(|v| v as f32).collect(),
            class_tokens: vec![0.5, 1.5, 2.5],
            pos_grid: None,
            pos_class: None,
        }
    }

    #[test]
    fn valid_map_has_empty_report() {
        assert!(validate_token_map(&small_map()).is_valid());
    }

    #[test]
    fn pos_class_without_grid_is_one_violation() {
        let mut m = small_map();
        m.pos_class = Some(vec![0.0; 3]);
        let r = validate_token_map(&m);
        assert_eq!(r.violations.len(), 1, "{r}");
        assert!(r.violations[0].0.contains("pos_class"));
    }

    #[test]
    fn inf_cell_names_layer_and_cell() {
        let mut m = small_map();
        m.grid[3 * 3 + 1] = f32::INFINITY;
        let r = validate_token_map(&m);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].0.contains("layer 0 cell (1, 1)"), "{r}");
    }

    #[test]
    fn zero_dims_reported_without_panicking() {
        let m = TokenMap {
            n_layers: 0,
            height: 0,
            width: 0,
            dim: 0,
            grid: vec![],
            class_tokens: vec![],
            pos_grid: Some(vec![f32::NAN]),
            pos_class: None,
        };
        let r = validate_token_map(&m);
        assert!(r.violations.len() >= 4);
    }
}
