use super::types::{Mask, SoftMask};
use crate::error::{Error, Result};

/// Nearest-neighbour block replication.
pub fn upsample_mask(mask: &Mask, factor: usize) -> Mask {
    assert!(factor >= 1, "factor must be at least 1");
    let (h, w) = (mask.height * factor, mask.width * factor);
    let bits = (0..h * w)
        .map(|i| mask.get((i / w) / factor, (i % w) / factor))
        .collect();
    Mask {
        height: h,
        width: w,
        bits,
    }
}

/// Block mean over `factor x factor` cells.
pub fn downsample_soft(mask: &Mask, factor: usize) -> Result<SoftMask> {
    if factor == 0 || !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "mask {}x{} is not divisible by factor {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let area = (factor * factor) as f64;
    let mut values = vec![0.0; h * w];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                values[(r / factor) * w + c / factor] += 1.0;
            }
        }
    }
    for v in &mut values {
        *v /= area;
    }
    Ok(SoftMask {
        height: h,
        width: w,
        values,
    })
}
