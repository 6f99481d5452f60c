//! Box IoU and localization accuracy.
//!
//! One predicted box per image; when an image has several ground-truth
//! boxes the best-matching one counts. Images without ground truth are left
//! out of every denominator and reported separately.

use serde::Serialize;

use crate::maskops::BBox;

/// Intersection over union with half-open pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min)) as u64;
    let ih = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min)) as u64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn best_iou(pred: &BBox, gts: &[BBox]) -> Option<f64> {
    gts.iter().map(|g| iou(pred, g)).reduce(f64::max)
}

fn best_ious(preds: &[BBox], gts: &[Vec<BBox>]) -> Vec<f64> {
    assert_eq!(preds.len(), gts.len(), "one prediction per image");
    let missing = gts.iter().filter(|g| g.is_empty()).count();
    if missing > 0 {
        log::warn!("{missing} image(s) without ground-truth boxes skipped");
    }
    preds
        .iter()
        .zip(gts)
        .filter_map(|(p, g)| best_iou(p, g))
        .collect()
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percentage of images whose best IoU is at least `threshold`.
pub fn gt_known_loc(preds: &[BBox], gts: &[Vec<BBox>], threshold: f64) -> f64 {
    let ious = best_ious(preds, gts);
    percent(ious.iter().filter(|&&v| v >= threshold).count(), ious.len())
}

/// Percentage of images localized at `threshold` whose class is among the
/// first `k` predictions. Images missing either class field count as misses.
pub fn topk_loc(
    preds: &[BBox],
    gts: &[Vec<BBox>],
    gt_class: &[Option<u32>],
    pred_classes: &[Option<Vec<u32>>],
    k: usize,
    threshold: f64,
) -> f64 {
    assert!(
        preds.len() == gt_class.len() && preds.len() == pred_classes.len(),
        "per-image inputs differ in length"
    );
    let mut total = 0;
    let mut hits = 0;
    for i in 0..preds.len() {
        let Some(best) = best_iou(&preds[i], &gts[i]) else {
            continue;
        };
        total += 1;
        let class_ok = match (&gt_class[i], &pred_classes[i]) {
            (Some(c), Some(p)) => p.iter().take(k).any(|x| x == c),
            _ => false,
        };
        hits += (class_ok && best >= threshold) as usize;
    }
    percent(hits, total)
}

/// Mean over images of the best IoU, in `[0, 1]`.
pub fn mean_iou(preds: &[BBox], gts: &[Vec<BBox>]) -> f64 {
    let ious = best_ious(preds, gts);
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// GT-known accuracy at each threshold.
pub fn loc_curve(preds: &[BBox], gts: &[Vec<BBox>], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let ious = best_ious(preds, gts);
    thresholds
        .iter()
        .map(|&t| (t, percent(ious.iter().filter(|&&v| v >= t).count(), ious.len())))
        .collect()
}

/// Everything needed to score one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub pred: BBox,
    pub gts: Vec<BBox>,
    pub gt_class: Option<u32>,
    pub pred_classes: Option<Vec<u32>>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub gt_known_loc: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub mean_iou: f64,
    pub curve: Vec<(f64, f64)>,
    pub iou_threshold: f64,
    /// Images scored (with at least one ground-truth box).
    pub n_images: usize,
    pub fallback_count: usize,
    pub missing_gt_count: usize,
    pub missing_class_count: usize,
}

/// Default thresholds for the accuracy-vs-IoU curve: 0.30, 0.35, ..., 0.90.
pub fn default_curve_thresholds() -> Vec<f64> {
    (0..13).map(|i| (30 + 5 * i) as f64 / 100.0).collect()
}

pub fn evaluate(records: &[EvalRecord], iou_threshold: f64, curve_thresholds: &[f64]) -> EvalReport {
    let preds: Vec<BBox> = records.iter().map(|r| r.pred).collect();
    let gts: Vec<Vec<BBox>> = records.iter().map(|r| r.gts.clone()).collect();
    let gt_class: Vec<Option<u32>> = records.iter().map(|r| r.gt_class).collect();
    let pred_classes: Vec<Option<Vec<u32>>> = records.iter().map(|r| r.pred_classes.clone()).collect();
    let scored = records.iter().filter(|r| !r.gts.is_empty());
    let missing_class_count = scored
        .clone()
        .filter(|r| r.gt_class.is_none() || r.pred_classes.is_none())
        .count();
    if missing_class_count > 0 {
        log::warn!("{missing_class_count} image(s) lack class labels; counted as top-k misses");
    }
    EvalReport {
        gt_known_loc: gt_known_loc(&preds, &gts, iou_threshold),
        top1_loc: topk_loc(&preds, &gts, &gt_class, &pred_classes, 1, iou_threshold),
        top5_loc: topk_loc(&preds, &gts, &gt_class, &pred_classes, 5, iou_threshold),
        mean_iou: mean_iou(&preds, &gts),
        curve: loc_curve(&preds, &gts, curve_thresholds),
        iou_threshold,
        n_images: scored.count(),
        fallback_count: records.iter().filter(|r| r.fallback).count(),
        missing_gt_count: records.iter().filter(|r| r.gts.is_empty()).count(),
        missing_class_count,
    }
}
