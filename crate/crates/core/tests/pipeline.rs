use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use caft_core::atf::{init_atf, AtfConfig, AtfModel};
use caft_core::maskops::{read_mask, Mask};
use caft_core::merge::MergedMap;
use caft_core::pipeline::{
    cmd_cluster, cmd_diagnose, cmd_eval, cmd_predict, cmd_refine, cmd_train, load_predictions,
    load_predictor, mask_path, run_pipeline, PipelineConfig, Prediction, Predictions, MASK_DIR,
    MODEL_FILE, PREDICTIONS_FILE,
};
use caft_core::refine::MaskPredictor;
use caft_core::synth::{generate_synthetic, write_synthetic, SynthConfig, SynthDataset};
use caft_core::token_io::{load_manifest, save_manifest, DatasetManifest};
use caft_core::Result;
use tempfile::TempDir;

fn dataset(n: usize, flip: f64) -> (SynthDataset, DatasetManifest, TempDir) {
    let dir = TempDir::new().unwrap();
    let cfg = SynthConfig {
        n_images: n,
        noise_flip_rate: flip,
        seed: 11,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg).unwrap();
    write_synthetic(&ds, dir.path().join("data")).unwrap();
    let manifest = load_manifest(dir.path().join("data").join("manifest.json")).unwrap();
    (ds, manifest, dir)
}

fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(5);
    cfg.train.epochs = 3;
    cfg
}

fn tree(root: &Path) -> BTreeSet<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeSet<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(root, root, &mut out);
    out
}

/// Thresholds the projection of each merged token onto the shared class axis,
/// halfway between the two class means. Exact on flip-free synthetic data.
struct AxisPredictor {
    axis: Vec<f64>,
    threshold: f64,
}

impl AxisPredictor {
    fn new(ds: &SynthDataset, cfg: &PipelineConfig) -> Self {
        let img = &ds.images[0];
        let diff: Vec<f64> = img.fg_mean.iter().zip(&img.bg_mean).map(|(f, b)| f - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let axis: Vec<f64> = diff.iter().map(|v| v / norm).collect();
        let mid: f64 = img
            .fg_mean
            .iter()
            .zip(&img.bg_mean)
            .zip(&axis)
            .map(|((f, b), u)| 0.5 * (f + b) * u)
            .sum();
        let r = &cfg.ratios;
        // Layers are identical and positions are zero in synthetic maps.
        let scale = r.alpha_0 + r.alpha_1 + r.alpha_2;
        AxisPredictor {
            axis,
            threshold: mid * scale,
        }
    }
}

impl MaskPredictor for AxisPredictor {
    fn predict_mask(&self, map: &MergedMap) -> Result<Mask> {
        let bits = map
            .grid
            .chunks(map.dim)
            .map(|t| t.iter().zip(&self.axis).map(|(x, u)| *x as f64 * u).sum::<f64>() > self.threshold)
            .collect();
        Mask::from_bits(map.height, map.width, bits)
    }
}

fn all_background(dim: usize) -> AtfModel<f32> {
    let mut model: AtfModel<f32> = init_atf(&AtfConfig {
        n_hidden_blocks: 1,
        first_kernel: 3,
        dim,
        seed: 0,
    })
    .unwrap();
    model.head_weight.iter_mut().for_each(|w| *w = 0.0);
    model.head_bias = vec![10.0, -10.0];
    model
}

#[test]
fn empty_manifest_gives_empty_outputs() {
    let dir = TempDir::new().unwrap();
    let manifest = DatasetManifest {
        version: 1,
        patch_size: 16,
        image_size: (64, 64),
        images: Vec::new(),
        base_dir: dir.path().to_path_buf(),
    };
    let cfg = quick_config();
    let summary = cmd_cluster(&manifest, &cfg, &dir.path().join("a")).unwrap();
    assert_eq!(summary.n_images, 0);
    assert!(summary.images.is_empty() && summary.failures.is_empty());
    let predict = cmd_predict(&manifest, &all_background(4), &cfg, &dir.path().join("p")).unwrap();
    assert!(predict.predictions.is_empty());
    let report = cmd_eval(&manifest, &predict.predictions, &cfg, &dir.path().join("e")).unwrap();
    assert_eq!(report.n_images, 0);
}

#[test]
fn cluster_writes_one_mask_per_image_and_nothing_in_the_data_dir() {
    let (ds, manifest, dir) = dataset(6, 0.02);
    let before = tree(&dir.path().join("data"));
    let out = dir.path().join("cluster");
    let summary = cmd_cluster(&manifest, &quick_config(), &out).unwrap();
    assert_eq!(summary.images.len(), 6);
    assert_eq!(tree(&dir.path().join("data")), before);
    for (img, s) in ds.images.iter().zip(&summary.images) {
        assert_eq!(s.id, img.id);
        let mask = read_mask(mask_path(&out.join(MASK_DIR), &img.id)).unwrap();
        assert_eq!((mask.height, mask.width), (24, 24));
        assert_eq!(mask.count_ones(), s.foreground_cells);
        // The class token is clustered alongside the grid.
        assert_eq!(s.cluster_sizes.iter().sum::<usize>(), 24 * 24 + 1);
    }
}

#[test]
fn corrupt_map_is_reported_and_others_continue() {
    let (_, manifest, dir) = dataset(4, 0.02);
    let victim = manifest.resolve(&manifest.images[2].token_map);
    fs::write(&victim, b"CTM1 but not really").unwrap();
    let summary = cmd_cluster(&manifest, &quick_config(), &dir.path().join("cluster")).unwrap();
    assert_eq!(summary.images.len(), 3);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].id, manifest.images[2].id);
}

#[test]
fn train_lists_every_missing_mask() {
    let (_, manifest, dir) = dataset(3, 0.02);
    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    let err = cmd_train(&manifest, &masks, &quick_config(), &dir.path().join("m"))
        .unwrap_err()
        .to_string();
    for img in &manifest.images {
        assert!(err.contains(&img.id), "{err}");
    }
    assert!(!dir.path().join("m").exists());
}

#[test]
fn trained_model_round_trips_through_disk() {
    let (_, manifest, dir) = dataset(4, 0.02);
    let cfg = quick_config();
    cmd_cluster(&manifest, &cfg, &dir.path().join("a")).unwrap();
    let out = dir.path().join("m");
    let (model, log) = cmd_train(&manifest, &dir.path().join("a").join(MASK_DIR), &cfg, &out).unwrap();
    assert_eq!(log.loss.len(), cfg.train.epochs);
    assert_eq!(load_predictor(out.join(MODEL_FILE)).unwrap(), model);
    assert_eq!(model.config.dim, 16);
}

#[test]
fn refine_without_quadrants_skips_every_image() {
    let (_, mut manifest, dir) = dataset(3, 0.02);
    for img in &mut manifest.images {
        img.quadrant_maps = None;
    }
    let cfg = quick_config();
    let ap = all_background(16);
    let summary = cmd_refine(&manifest, &ap, &cfg, &dir.path().join("r")).unwrap();
    assert!(summary.written.is_empty());
    assert_eq!(summary.missing_quadrants.len(), 3);
}

#[test]
fn refine_with_exact_predictor_recovers_planted_masks() {
    let (ds, manifest, dir) = dataset(5, 0.0);
    let cfg = quick_config();
    let predictor = AxisPredictor::new(&ds, &cfg);
    let out = dir.path().join("r");
    let summary = cmd_refine(&manifest, &predictor, &cfg, &out).unwrap();
    assert_eq!(summary.written.len(), 5);
    for img in &ds.images {
        assert_eq!(read_mask(mask_path(&out.join(MASK_DIR), &img.id)).unwrap(), img.mask);
    }
}

#[test]
fn all_background_model_falls_back_everywhere() {
    let (ds, manifest, dir) = dataset(4, 0.02);
    let cfg = quick_config();
    let summary = cmd_predict(&manifest, &all_background(16), &cfg, &dir.path().join("p")).unwrap();
    assert_eq!(summary.fallback_count, 4);
    let full = ds.image_size();
    assert!(summary
        .predictions
        .values()
        .all(|p| p.fallback && (p.bbox.x_max, p.bbox.y_max) == full && (p.bbox.x_min, p.bbox.y_min) == (0, 0)));
    let report = cmd_eval(&manifest, &summary.predictions, &cfg, &dir.path().join("e")).unwrap();
    assert_eq!(report.fallback_count, 4);
}

#[test]
fn exact_predictor_boxes_equal_planted_boxes() {
    let (ds, manifest, dir) = dataset(8, 0.0);
    let cfg = PipelineConfig {
        denoise_predictions: false,
        ..quick_config()
    };
    let predictor = AxisPredictor::new(&ds, &cfg);
    let out = dir.path().join("p");
    let summary = cmd_predict(&manifest, &predictor, &cfg, &out).unwrap();
    assert_eq!(summary.fallback_count, 0);
    for img in &ds.images {
        assert_eq!(summary.predictions[&img.id].bbox, img.bbox);
    }
    let loaded = load_predictions(out.join(PREDICTIONS_FILE)).unwrap();
    assert_eq!(loaded, summary.predictions);
    let report = cmd_eval(&manifest, &loaded, &cfg, &dir.path().join("e")).unwrap();
    assert_eq!(report.gt_known_loc, 100.0);
    assert!((report.mean_iou - 1.0).abs() < 1e-12);
}

#[test]
fn eval_rejects_mismatched_ids() {
    let (ds, manifest, dir) = dataset(3, 0.02);
    let cfg = quick_config();
    let mut preds: Predictions = ds
        .images
        .iter()
        .skip(1)
        .map(|img| {
            (
                img.id.clone(),
                Prediction {
                    bbox: img.bbox,
                    fallback: false,
                    foreground_cells: 1,
                },
            )
        })
        .collect();
    preds.insert("stranger".into(), preds.values().next().copied().unwrap());
    let err = cmd_eval(&manifest, &preds, &cfg, &dir.path().join("e")).unwrap_err().to_string();
    assert!(err.contains(&ds.images[0].id) && err.contains("stranger"), "{err}");
}

#[test]
fn diagnose_writes_consistent_artifacts() {
    let (_, manifest, dir) = dataset(2, 0.02);
    let out = dir.path().join("d");
    let (records, failures) = cmd_diagnose(&manifest, &quick_config(), &out).unwrap();
    assert!(failures.is_empty());
    for rec in &records {
        let sim = fs::read_to_string(out.join(format!("{}_similarity.csv", rec.id))).unwrap();
        let rows: Vec<Vec<f64>> = sim
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 24 * 24);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), rows.len());
            assert!((row[i] - 1.0).abs() < 1e-6);
        }
        let curve = fs::read_to_string(out.join(format!("{}_curve.csv", rec.id))).unwrap();
        assert_eq!(curve.lines().count(), 24 * 24);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("{}_metrics.json", rec.id))).unwrap()).unwrap();
        for key in ["d_ic", "d_r", "d_cc", "ratio_ic", "ratio_r", "ch_score"] {
            assert!(json["metrics"].get(key).is_some(), "missing {key} in {json}");
        }
        assert!(rec.class_token_affinity <= rec.metrics.d_r + 1e-9);
    }
}

#[test]
fn full_run_trains_phase_c_on_refined_targets() {
    let (ds, manifest, dir) = dataset(12, 0.02);
    let out = dir.path().join("run");
    let run = run_pipeline(&manifest, &quick_config(), &out).unwrap();
    assert_eq!(run.refine.written.len(), 12);
    assert_eq!(run.predict.predictions.len(), 12);
    for img in &ds.images {
        assert!(mask_path(&out.join("refined").join(MASK_DIR), &img.id).is_file());
    }
    assert!(out.join("atf2").join(MODEL_FILE).is_file());
    assert!(run.report.gt_known_loc >= 0.0 && run.report.gt_known_loc <= 100.0);
    // A saved manifest resolves paths relative to its own location.
    save_manifest(&manifest, dir.path().join("data").join("copy.json")).unwrap();
    let again = load_manifest(dir.path().join("data").join("copy.json")).unwrap();
    assert_eq!(again.images.len(), manifest.images.len());
}
