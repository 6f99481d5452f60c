use serde::{Deserialize, Serialize};

use super::components::{connected_components, Connectivity};
use crate::error::{Error, Result};

/// Binary token-resolution mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from rows of 0/1 values; handy for fixtures.
    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let bits = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), width, "ragged mask rows");
                r.iter().map(|&v| v != 0)
            })
            .collect();
        Mask {
            height,
            width,
            bits,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Intersection over union of the foreground cells; 1 when both are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shapes differ"
        );
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Fraction of cells where the two masks agree.
    pub fn agreement(&self, other: &Mask) -> f64 {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shapes differ"
        );
        let same = self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count();
        same as f64 / self.bits.len().max(1) as f64
    }
}

/// Real-valued mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "soft mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "soft mask value {v} outside [0, 1]"
            )));
        }
        Ok(SoftMask {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Pixel box, half-open: `[x_min, x_max) x [y_min, y_max)`, y downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub const fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn full(image_size: (u32, u32)) -> Self {
        BBox::new(0, 0, image_size.0, image_size.1)
    }

    pub fn area(&self) -> u64 {
        self.x_max.saturating_sub(self.x_min) as u64 * self.y_max.saturating_sub(self.y_min) as u64
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn within(&self, image_size: (u32, u32)) -> bool {
        self.is_valid() && self.x_max <= image_size.0 && self.y_max <= image_size.1
    }
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Which foreground cells the predicted box must enclose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxPolicy {
    /// Largest 8-connected component.
    #[default]
    LargestComponent,
    AllForeground,
}

/// Tight box around the selected foreground cells, in pixels.
///
/// An empty mask yields the full-image box; callers that count fallbacks
/// check [`Mask::is_empty`] first.
pub fn mask_to_box(mask: &Mask, patch_size: u32, image_size: (u32, u32), policy: BoxPolicy) -> BBox {
    let bounds = match policy {
        BoxPolicy::AllForeground => cell_bounds(
            mask.bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| (i / mask.width, i % mask.width)),
        ),
        BoxPolicy::LargestComponent => connected_components(mask, Connectivity::Eight)
            .first()
            .and_then(|c| cell_bounds(c.cells.iter().copied())),
    };
    let Some((r0, c0, r1, c1)) = bounds else {
        return BBox::full(image_size);
    };
    let p = patch_size;
    BBox::new(
        (c0 as u32 * p).min(image_size.0),
        (r0 as u32 * p).min(image_size.1),
        ((c1 as u32 + 1) * p).min(image_size.0),
        ((r1 as u32 + 1) * p).min(image_size.1),
    )
}

fn cell_bounds(cells: impl Iterator<Item = (usize, usize)>) -> Option<(usize, usize, usize, usize)> {
    cells.fold(None, |acc, (r, c)| match acc {
        None => Some((r, c, r, c)),
        Some((r0, c0, r1, c1)) => Some((r0.min(r), c0.min(c), r1.max(r), c1.max(c))),
    })
}
