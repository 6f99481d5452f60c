//! Quadrant refinement: predict on the four image quarters, stitch the
//! masks at double resolution, and reduce back to a training target.

use rayon::prelude::*;

use crate::atf::{atf_predict, AtfModel, Real};
use crate::error::{Error, Result};
use crate::maskops::{binarize, downsample_soft, Mask};
use crate::merge::MergedMap;

/// Anything that maps a merged token grid to a binary mask of the same size.
pub trait MaskPredictor: Sync {
    fn predict_mask(&self, map: &MergedMap) -> Result<Mask>;
}

impl<T: Real> MaskPredictor for AtfModel<T> {
    fn predict_mask(&self, map: &MergedMap) -> Result<Mask> {
        atf_predict(self, map)
    }
}

/// Stitched `2H x 2W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedMask(pub Mask);

/// Predicts each quadrant (top-left, top-right, bottom-left, bottom-right)
/// and places the results on a double-resolution canvas.
pub fn refine_mask<P: MaskPredictor + ?Sized>(predictor: &P, quadrants: &[MergedMap; 4]) -> Result<RefinedMask> {
    let (h, w, d) = (quadrants[0].height, quadrants[0].width, quadrants[0].dim);
    if let Some(q) = quadrants.iter().position(|m| (m.height, m.width, m.dim) != (h, w, d)) {
        return Err(Error::Shape(format!(
            "quadrant {q} is {}x{}x{}, quadrant 0 is {h}x{w}x{d}",
            quadrants[q].height, quadrants[q].width, quadrants[q].dim
        )));
    }
    let masks: Vec<Mask> = quadrants
        .par_iter()
        .map(|q| predictor.predict_mask(q))
        .collect::<Result<_>>()?;
    let mut canvas = Mask::zeros(2 * h, 2 * w);
    for (q, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape(format!(
                "predictor returned {}x{} for a {h}x{w} quadrant",
                m.height, m.width
            )));
        }
        let (r0, c0) = ((q / 2) * h, (q % 2) * w);
        for r in 0..h {
            for c in 0..w {
                canvas.set(r0 + r, c0 + c, m.get(r, c));
            }
        }
    }
    Ok(RefinedMask(canvas))
}

/// 2x2 block mean of the refined mask, binarized with `>= threshold`.
pub fn refined_to_target(refined: &RefinedMask, threshold: f64) -> Result<Mask> {
    Ok(binarize(&downsample_soft(&refined.0, 2)?, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskops::upsample_mask;
    use proptest::prelude::*;

    struct Constant(bool);

    impl MaskPredictor for Constant {
        fn predict_mask(&self, map: &MergedMap) -> Result<Mask> {
            Ok(if self.0 {
                Mask::ones(map.height, map.width)
            } else {
                Mask::zeros(map.height, map.width)
            })
        }
    }

    /// Foreground where the first token coordinate is positive.
    struct SignOfFirst;

    impl MaskPredictor for SignOfFirst {
        fn predict_mask(&self, map: &MergedMap) -> Result<Mask> {
            Mask::from_bits(map.height, map.width, map.tokens().map(|t| t[0] > 0.0).collect())
        }
    }

    fn quad(h: usize, w: usize, value: f32) -> MergedMap {
        MergedMap {
            height: h,
            width: w,
            dim: 1,
            grid: vec![value; h * w],
            class_token: vec![0.0],
        }
    }

    #[test]
    fn all_ones_predictor_fills_canvas() {
        let qs = [quad(24, 24, 0.0), quad(24, 24, 0.0), quad(24, 24, 0.0), quad(24, 24, 0.0)];
        let r = refine_mask(&Constant(true), &qs).unwrap();
        assert_eq!(r.0, Mask::ones(48, 48));
        assert_eq!(refined_to_target(&r, 0.5).unwrap(), Mask::ones(24, 24));
    }

    #[test]
    fn single_quadrant_lands_in_place() {
        for q in 0..4 {
            let mut qs = [quad(3, 4, -1.0), quad(3, 4, -1.0), quad(3, 4, -1.0), quad(3, 4, -1.0)];
            qs[q] = quad(3, 4, 1.0);
            let r = refine_mask(&SignOfFirst, &qs).unwrap().0;
            for row in 0..6 {
                for col in 0..8 {
                    let inside = row / 3 == q / 2 && col / 4 == q % 2;
                    assert_eq!(r.get(row, col), inside);
                }
            }
        }
    }

    #[test]
    fn mismatched_quadrants_rejected() {
        let qs = [quad(3, 4, 0.0), quad(3, 4, 0.0), quad(4, 3, 0.0), quad(3, 4, 0.0)];
        assert!(refine_mask(&Constant(true), &qs).is_err());
    }

    #[test]
    fn two_of_four_is_foreground() {
        let r = RefinedMask(Mask::from_rows(&[&[1, 0], &[1, 0]]));
        assert_eq!(refined_to_target(&r, 0.5).unwrap().bits, vec![true]);
        let one = RefinedMask(Mask::from_rows(&[&[1, 0], &[0, 0]]));
        assert_eq!(refined_to_target(&one, 0.5).unwrap().bits, vec![false]);
    }

    proptest! {
        #[test]
        fn target_of_upsampled_mask_is_identity(bits in proptest::collection::vec(any::<bool>(), 30)) {
            let m = Mask::from_bits(5, 6, bits).unwrap();
            let refined = RefinedMask(upsample_mask(&m, 2));
            prop_assert_eq!(refined_to_target(&refined, 0.5).unwrap(), m);
        }

        #[test]
        fn stitching_is_a_bijection(seed in any::<u64>()) {
            // Tag every quadrant cell with a unique value and check each
            // canvas cell receives exactly its own source.
            let (h, w) = (3usize, 2usize);
            let qs: [MergedMap; 4] = std::array::from_fn(|q| MergedMap {
                height: h,
                width: w,
                dim: 1,
                grid: (0..h * w).map(|i| ((q * h * w + i) as u64 ^ (seed & 1)) as f32).collect(),
                class_token: vec![0.0],
            });
            struct Bit(usize);
            impl MaskPredictor for Bit {
                fn predict_mask(&self, map: &MergedMap) -> Result<Mask> {
                    Mask::from_bits(map.height, map.width, map.tokens().map(|t| (t[0] as usize >> self.0) & 1 == 1).collect())
                }
            }
            let mut recovered = vec![0usize; 4 * h * w];
            for bit in 0..5 {
                let r = refine_mask(&Bit(bit), &qs).unwrap().0;
                for (i, &b) in r.bits.iter().enumerate() {
                    recovered[i] |= (b as usize) << bit;
                }
            }
            let mut sorted = recovered.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), 4 * h * w);
            for (i, &tag) in recovered.iter().enumerate() {
                let (row, col) = (i / (2 * w), i % (2 * w));
                let q = (row / h) * 2 + col / w;
                let src = (row % h) * w + col % w;
                prop_assert_eq!(tag, (q * h * w + src) ^ (seed & 1) as usize);
            }
        }
    }
}
