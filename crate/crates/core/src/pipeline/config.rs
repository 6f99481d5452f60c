use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atf::{AtfConfig, TrainConfig};
use crate::cluster::KMeansParams;
use crate::error::{Error, Result};
use crate::eval::default_curve_thresholds;
use crate::maskops::{BoxPolicy, FilterParams};
use crate::merge::MergeRatios;
use crate::rng::derive_seed;

/// Every knob of the batch pipeline. Missing JSON fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ratios: MergeRatios,
    /// `seed` is the base; image `i` clusters with `derive_seed(seed, i)`.
    pub kmeans: KMeansParams,
    pub filter: FilterParams,
    /// `dim` is taken from the data at training time.
    pub atf: AtfConfig,
    pub train: TrainConfig,
    pub box_policy: BoxPolicy,
    /// Smooth predicted masks before box extraction.
    pub denoise_predictions: bool,
    /// Threshold applied to the 2x2 block mean of refined masks.
    pub refine_threshold: f64,
    pub iou_threshold: f64,
    pub curve_thresholds: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ratios: MergeRatios::default(),
            kmeans: KMeansParams::default(),
            filter: FilterParams::default(),
            atf: AtfConfig::default(),
            train: TrainConfig::default(),
            box_policy: BoxPolicy::default(),
            denoise_predictions: true,
            refine_threshold: 0.5,
            iou_threshold: 0.5,
            curve_thresholds: default_curve_thresholds(),
        }
    }
}

impl PipelineConfig {
    /// Points every seeded component at streams derived from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.kmeans.seed = derive_seed(seed, 1);
        self.atf.seed = derive_seed(seed, 2);
        self.train.seed = derive_seed(seed, 3);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.ratios.validate()?;
        if self.kmeans.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.kmeans.tol >= 0.0) {
            return Err(Error::InvalidArgument("k-means tol must be nonnegative".into()));
        }
        let f = &self.filter;
        if !(f.sigma > 0.0 && f.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", f.sigma)));
        }
        for (name, t) in [("filter threshold", f.threshold), ("refine threshold", self.refine_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("{name} {t} not in [0, 1]")));
            }
        }
        AtfConfig { dim: 1, ..self.atf }.validate()?;
        self.train.validate()?;
        for &t in std::iter::once(&self.iou_threshold).chain(&self.curve_thresholds) {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("IoU threshold {t} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"kmeans": {"k": 4}, "box_policy": "all-foreground"}"#).unwrap();
        assert_eq!(cfg.kmeans.k, 4);
        assert_eq!(cfg.kmeans.restarts, 10);
        assert_eq!(cfg.box_policy, BoxPolicy::AllForeground);
        assert_eq!(cfg.filter, FilterParams::default());
    }

    #[test]
    fn seed_fans_out() {
        let a = PipelineConfig::default().with_seed(7);
        let b = PipelineConfig::default().with_seed(8);
        assert_ne!(a.kmeans.seed, b.kmeans.seed);
        assert_ne!(a.atf.seed, a.train.seed);
        assert_eq!(a, PipelineConfig::default().with_seed(7));
    }

    #[test]
    fn invalid_fields_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.filter.sigma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.iou_threshold = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.atf.first_kernel = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reports_json_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(Error::Json { .. })));
        fs::write(&p, r#"{"kmeans": {"k": 0}}"#).unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }
}
