//! Batch stages over a manifest: pseudo-mask clustering, filter training,
//! quadrant refinement, box prediction, evaluation and diagnostics.
//!
//! Every stage writes only under its output directory. Per-image failures
//! are logged and recorded in the stage summary rather than aborting the
//! run. Results are listed in manifest order, so reruns with the same
//! configuration produce byte-identical files.

mod config;

pub use config::PipelineConfig;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atf::{load_model, save_model, train_atf, AtfConfig, AtfModel, TrainLog};
use crate::cluster::{
    class_token_affinity, cluster_tokens, clustering_metrics, foreground_mask, similarity_curve, similarity_matrix,
    token_points, ClusterMetrics, KMeansParams,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalRecord, EvalReport};
use crate::maskops::{denoise, mask_to_box, read_mask, write_mask, write_pgm, BBox, Mask};
use crate::merge::{merge_maps, MergedMap};
use crate::refine::{refine_mask, refined_to_target, MaskPredictor};
use crate::rng::derive_seed;
use crate::token_io::{DatasetManifest, ImageEntry};

pub const MASK_DIR: &str = "masks";
pub const MODEL_FILE: &str = "model.cafm";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CLUSTER_SUMMARY_FILE: &str = "cluster_summary.json";
pub const REFINE_SUMMARY_FILE: &str = "refine_summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterImageSummary {
    pub id: String,
    pub class_token_cluster: usize,
    pub cluster_sizes: Vec<usize>,
    pub foreground_cells: usize,
    /// The denoised mask is empty, so its box falls back to the full image.
    pub fallback: bool,
    pub metrics: ClusterMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub n_images: usize,
    pub fallback_count: usize,
    pub images: Vec<ClusterImageSummary>,
    pub failures: Vec<ImageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineSummary {
    pub written: Vec<String>,
    pub missing_quadrants: Vec<String>,
    pub failures: Vec<ImageFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub fallback: bool,
    pub foreground_cells: usize,
}

/// Predictions keyed by image id.
pub type Predictions = BTreeMap<String, Prediction>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictSummary {
    pub predictions: Predictions,
    pub fallback_count: usize,
    pub failures: Vec<ImageFailure>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<id>.mask` and a `.pgm` preview.
pub fn write_mask_pair(mask: &Mask, dir: &Path, id: &str) -> Result<()> {
    write_mask(mask, dir.join(format!("{id}.mask")))?;
    write_pgm(mask, dir.join(format!("{id}.pgm")))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mask"))
}

fn load_merged(manifest: &DatasetManifest, entry: &ImageEntry, cfg: &PipelineConfig) -> Result<MergedMap> {
    merge_maps(&manifest.load_map(entry)?, &cfg.ratios)
}

/// Runs `f` on every image in parallel and splits successes from failures,
/// both in manifest order.
fn per_image<T: Send>(
    manifest: &DatasetManifest,
    stage: &str,
    f: impl Fn(usize, &ImageEntry) -> Result<T> + Sync,
) -> (Vec<(usize, T)>, Vec<ImageFailure>) {
    let results: Vec<Result<T>> = manifest
        .images
        .par_iter()
        .enumerate()
        .map(|(i, e)| f(i, e))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((i, v)),
            Err(e) => {
                let id = manifest.images[i].id.clone();
                log::warn!("{stage}: skipping {id}: {e}");
                failed.push(ImageFailure { id, error: e.to_string() });
            }
        }
    }
    (ok, failed)
}

/// Seed used to cluster image `index`.
pub fn image_kmeans_params(cfg: &PipelineConfig, index: usize) -> KMeansParams {
    KMeansParams {
        seed: derive_seed(cfg.kmeans.seed, index as u64),
        ..cfg.kmeans
    }
}

/// Phase (a) for one merged map: cluster, take the class token's cluster,
/// and smooth.
pub fn pseudo_mask(map: &MergedMap, params: &KMeansParams, cfg: &PipelineConfig) -> Result<(Mask, ClusterImageSummary)> {
    let result = cluster_tokens(map, params)?;
    let points = token_points(map);
    let metrics = clustering_metrics(&points, map.dim, &result.fit, result.class_token_cluster)?;
    let mask = denoise(&foreground_mask(&result), &cfg.filter);
    let summary = ClusterImageSummary {
        id: String::new(),
        class_token_cluster: result.class_token_cluster,
        cluster_sizes: result.fit.cluster_sizes(),
        foreground_cells: mask.count_ones(),
        fallback: mask.is_empty(),
        metrics,
    };
    Ok((mask, summary))
}

/// Phase (a): pseudo masks under `<out>/masks` and a summary JSON.
pub fn cmd_cluster(manifest: &DatasetManifest, cfg: &PipelineConfig, out_dir: &Path) -> Result<ClusterSummary> {
    cfg.validate()?;
    let masks = out_dir.join(MASK_DIR);
    create_dir(&masks)?;
    let (ok, failures) = per_image(manifest, "cluster", |i, entry| {
        let map = load_merged(manifest, entry, cfg)?;
        let (mask, mut summary) = pseudo_mask(&map, &image_kmeans_params(cfg, i), cfg)?;
        write_mask_pair(&mask, &masks, &entry.id)?;
        summary.id = entry.id.clone();
        Ok(summary)
    });
    let images: Vec<ClusterImageSummary> = ok.into_iter().map(|(_, s)| s).collect();
    let summary = ClusterSummary {
        n_images: images.len(),
        fallback_count: images.iter().filter(|s| s.fallback).count(),
        images,
        failures,
    };
    log::info!(
        "cluster: {} masks, {} empty, {} failed",
        summary.n_images,
        summary.fallback_count,
        summary.failures.len()
    );
    write_json(&summary, &out_dir.join(CLUSTER_SUMMARY_FILE))?;
    Ok(summary)
}

/// Trains a filter on `(merged map, <mask_dir>/<id>.mask)` for every image
/// and writes `model.cafm` and `train_log.csv` under `out_dir`.
///
/// Any missing or unreadable mask is an error naming every such image.
pub fn cmd_train(
    manifest: &DatasetManifest,
    mask_dir: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<(AtfModel<f32>, TrainLog)> {
    cfg.validate()?;
    let missing: Vec<String> = manifest
        .images
        .iter()
        .filter(|e| !mask_path(mask_dir, &e.id).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!(
            "no mask in {} for: {}",
            mask_dir.display(),
            missing.join(", ")
        )));
    }
    let dataset: Vec<(MergedMap, Mask)> = manifest
        .images
        .par_iter()
        .map(|e| Ok((load_merged(manifest, e, cfg)?, read_mask(mask_path(mask_dir, &e.id))?)))
        .collect::<Result<_>>()?;
    let dim = dataset.first().map_or(cfg.atf.dim, |(m, _)| m.dim);
    let acfg = AtfConfig { dim, ..cfg.atf };
    let (model, log) = train_atf::<f32>(&dataset, &cfg.train, &acfg)?;
    create_dir(out_dir)?;
    save_model(&model, out_dir.join(MODEL_FILE))?;
    write_text(&log.to_csv(), &out_dir.join(TRAIN_LOG_FILE))?;
    Ok((model, log))
}

/// Phase (c) data preparation: refined targets under `<out>/masks`.
/// Images without quadrant maps are skipped with a warning.
pub fn cmd_refine<P: MaskPredictor + ?Sized>(
    manifest: &DatasetManifest,
    predictor: &P,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<RefineSummary> {
    cfg.validate()?;
    let masks = out_dir.join(MASK_DIR);
    create_dir(&masks)?;
    let (ok, failures) = per_image(manifest, "refine", |_, entry| {
        let Some(quads) = manifest.load_quadrants(entry)? else {
            log::warn!("refine: {} has no quadrant maps", entry.id);
            return Ok(false);
        };
        let merged: Vec<MergedMap> = quads
            .iter()
            .map(|q| merge_maps(q, &cfg.ratios))
            .collect::<Result<_>>()?;
        let merged: [MergedMap; 4] = merged.try_into().expect("four quadrants");
        let target = refined_to_target(&refine_mask(predictor, &merged)?, cfg.refine_threshold)?;
        write_mask_pair(&target, &masks, &entry.id)?;
        Ok(true)
    });
    let mut summary = RefineSummary {
        written: Vec::new(),
        missing_quadrants: Vec::new(),
        failures,
    };
    for (i, written) in ok {
        let id = manifest.images[i].id.clone();
        if written {
            summary.written.push(id);
        } else {
            summary.missing_quadrants.push(id);
        }
    }
    if !summary.missing_quadrants.is_empty() {
        log::warn!("refine: {} image(s) lacked quadrant maps", summary.missing_quadrants.len());
    }
    write_json(&summary, &out_dir.join(REFINE_SUMMARY_FILE))?;
    Ok(summary)
}

/// Inference: merged map, predicted mask, optional smoothing, box.
pub fn cmd_predict<P: MaskPredictor + ?Sized>(
    manifest: &DatasetManifest,
    predictor: &P,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PredictSummary> {
    cfg.validate()?;
    let masks = out_dir.join(MASK_DIR);
    create_dir(&masks)?;
    let (ok, failures) = per_image(manifest, "predict", |_, entry| {
        let map = load_merged(manifest, entry, cfg)?;
        let mut mask = predictor.predict_mask(&map)?;
        if cfg.denoise_predictions {
            mask = denoise(&mask, &cfg.filter);
        }
        write_mask_pair(&mask, &masks, &entry.id)?;
        Ok(Prediction {
            bbox: mask_to_box(&mask, manifest.patch_size, manifest.image_size, cfg.box_policy),
            fallback: mask.is_empty(),
            foreground_cells: mask.count_ones(),
        })
    });
    let predictions: Predictions = ok
        .into_iter()
        .map(|(i, p)| (manifest.images[i].id.clone(), p))
        .collect();
    let fallback_count = predictions.values().filter(|p| p.fallback).count();
    if fallback_count > 0 {
        log::info!("predict: {fallback_count} full-image fallback box(es)");
    }
    write_json(&predictions, &out_dir.join(PREDICTIONS_FILE))?;
    Ok(PredictSummary {
        predictions,
        fallback_count,
        failures,
    })
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Scores predictions against the manifest's ground truth and writes
/// `report.json` and `curve.csv`. The id sets must match exactly.
pub fn cmd_eval(
    manifest: &DatasetManifest,
    predictions: &Predictions,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let ids: Vec<&str> = manifest.images.iter().map(|e| e.id.as_str()).collect();
    let unpredicted: Vec<&str> = ids.iter().copied().filter(|id| !predictions.contains_key(*id)).collect();
    let unknown: Vec<&str> = predictions
        .keys()
        .map(String::as_str)
        .filter(|id| !ids.contains(id))
        .collect();
    if !unpredicted.is_empty() || !unknown.is_empty() {
        let mut msg = String::from("prediction ids do not match the manifest");
        if !unpredicted.is_empty() {
            let _ = write!(msg, "; no prediction for: {}", unpredicted.join(", "));
        }
        if !unknown.is_empty() {
            let _ = write!(msg, "; not in manifest: {}", unknown.join(", "));
        }
        return Err(Error::Manifest(msg));
    }
    let records: Vec<EvalRecord> = manifest
        .images
        .iter()
        .map(|e| {
            let p = predictions[&e.id];
            EvalRecord {
                pred: p.bbox,
                gts: e.gt_boxes.clone().unwrap_or_default(),
                gt_class: e.gt_class,
                pred_classes: e.pred_classes.clone(),
                fallback: p.fallback,
            }
        })
        .collect();
    let report = evaluate(&records, cfg.iou_threshold, &cfg.curve_thresholds);
    create_dir(out_dir)?;
    write_json(&report, &out_dir.join(REPORT_FILE))?;
    let mut curve = String::from("iou_threshold,gt_known_loc\n");
    for (t, acc) in &report.curve {
        let _ = writeln!(curve, "{t},{acc}");
    }
    write_text(&curve, &out_dir.join(CURVE_FILE))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseRecord {
    pub id: String,
    pub metrics: ClusterMetrics,
    pub class_token_cluster: usize,
    /// Distance from the class token to its cluster center.
    pub class_token_affinity: f64,
}

fn matrix_csv(rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Per image: `<id>_similarity.csv` (cell-by-cell cosine matrix),
/// `<id>_curve.csv` (each cell against the centre cell) and
/// `<id>_metrics.json`.
pub fn cmd_diagnose(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<(Vec<DiagnoseRecord>, Vec<ImageFailure>)> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let (ok, failures) = per_image(manifest, "diagnose", |i, entry| {
        let map = load_merged(manifest, entry, cfg)?;
        let result = cluster_tokens(&map, &image_kmeans_params(cfg, i))?;
        let metrics = clustering_metrics(&token_points(&map), map.dim, &result.fit, result.class_token_cluster)?;
        let record = DiagnoseRecord {
            id: entry.id.clone(),
            metrics,
            class_token_cluster: result.class_token_cluster,
            class_token_affinity: class_token_affinity(&map, &result),
        };
        let sim = similarity_matrix(&map);
        write_text(
            &matrix_csv((0..sim.n).map(|r| sim.row(r).to_vec())),
            &out_dir.join(format!("{}_similarity.csv", entry.id)),
        )?;
        let centre = (map.height / 2) * map.width + map.width / 2;
        write_text(
            &matrix_csv(similarity_curve(&map, centre).into_iter().map(|v| vec![v])),
            &out_dir.join(format!("{}_curve.csv", entry.id)),
        )?;
        write_json(&record, &out_dir.join(format!("{}_metrics.json", entry.id)))?;
        Ok(record)
    });
    Ok((ok.into_iter().map(|(_, r)| r).collect(), failures))
}

/// Artifacts of a full three-phase run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub cluster: ClusterSummary,
    pub atf1: AtfModel<f32>,
    pub refine: RefineSummary,
    pub atf2: AtfModel<f32>,
    pub predict: PredictSummary,
    pub report: EvalReport,
}

/// Phase (a) clustering, AtF1 on the pseudo masks, refinement with AtF1,
/// AtF2 on the refined targets, then inference and evaluation with AtF2.
///
/// Subdirectories of `out_dir`: `phase_a`, `atf1`, `refined`, `atf2`,
/// `predict`, `eval`.
pub fn run_pipeline(manifest: &DatasetManifest, cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineRun> {
    let cluster = cmd_cluster(manifest, cfg, &out_dir.join("phase_a"))?;
    let (atf1, _) = cmd_train(manifest, &out_dir.join("phase_a").join(MASK_DIR), cfg, &out_dir.join("atf1"))?;
    let refine = cmd_refine(manifest, &atf1, cfg, &out_dir.join("refined"))?;
    let (atf2, _) = cmd_train(manifest, &out_dir.join("refined").join(MASK_DIR), cfg, &out_dir.join("atf2"))?;
    let predict = cmd_predict(manifest, &atf2, cfg, &out_dir.join("predict"))?;
    let report = cmd_eval(manifest, &predict.predictions, cfg, &out_dir.join("eval"))?;
    Ok(PipelineRun {
        cluster,
        atf1,
        refine,
        atf2,
        predict,
        report,
    })
}

/// Loads a model file for the predict and refine stages.
pub fn load_predictor(path: impl AsRef<Path>) -> Result<AtfModel<f32>> {
    load_model(path)
}
