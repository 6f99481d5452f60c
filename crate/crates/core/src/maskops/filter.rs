use serde::{Deserialize, Serialize};

use super::types::{Mask, SoftMask};

/// Smoothing and re-binarization parameters for [`denoise`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub sigma: f64,
    pub radius: usize,
    pub threshold: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            sigma: 1.0,
            radius: 2,
            threshold: 0.5,
        }
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any offset and any `n >= 1`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian smoothing with reflected borders.
pub fn gaussian_smooth(mask: &SoftMask, sigma: f64, radius: usize) -> SoftMask {
    assert!(radius >= 1, "radius must be at least 1");
    let kernel = gaussian_kernel(sigma, radius);
    let (h, w) = (mask.height, mask.width);
    let r = radius as isize;

    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let src = &mask.values[y * w..(y + 1) * w];
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * src[reflect_index(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * rows[reflect_index(y as isize + k as isize - r, h) * w + x])
                .sum();
            // Rounding can push a convex combination a hair past the bounds.
            out[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    SoftMask {
        height: h,
        width: w,
        values: out,
    }
}

/// 1 where `value >= threshold`.
pub fn binarize(mask: &SoftMask, threshold: f64) -> Mask {
    Mask {
        height: mask.height,
        width: mask.width,
        bits: mask.values.iter().map(|&v| v >= threshold).collect(),
    }
}

pub fn denoise(mask: &Mask, params: &FilterParams) -> Mask {
    binarize(
        &gaussian_smooth(&mask.to_soft(), params.sigma, params.radius),
        params.threshold,
    )
}
