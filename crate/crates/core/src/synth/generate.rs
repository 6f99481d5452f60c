use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::{mask_to_box, write_mask, BBox, BoxPolicy, Mask};
use crate::rng::rng_for;
use crate::token_io::{save_manifest, write_token_map, DatasetManifest, ImageEntry, TokenMap};

/// Pixels per token used for the manifests this module writes.
pub const SYNTH_PATCH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub n_images: usize,
    /// Allowed foreground area as a fraction of the grid, inclusive.
    pub rect_fraction: (f64, f64),
    /// Distance between the class means in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Per-token probability of being drawn from the other class.
    pub noise_flip_rate: f64,
    /// Spread of the per-image mean offset, orthogonal to the class axis.
    pub mean_jitter: f64,
    pub n_classes: u32,
    /// Probability that the simulated classifier ranks the true class first.
    pub top1_accuracy: f64,
    /// Probability that the true class is among the top five.
    pub top5_accuracy: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 24,
            width: 24,
            dim: 16,
            n_images: 200,
            rect_fraction: (0.1, 0.4),
            separation: 8.0,
            sigma: 1.0,
            noise_flip_rate: 0.02,
            mean_jitter: 1.0,
            n_classes: 10,
            top1_accuracy: 0.8,
            top5_accuracy: 0.95,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height < 2 || self.width < 2 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return bad(format!("grid {}x{} must have even sides >= 2", self.height, self.width));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        let (lo, hi) = self.rect_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("rectangle fractions ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("separation and sigma must be positive".into());
        }
        if !(0.0..0.5).contains(&self.noise_flip_rate) {
            return bad(format!("flip rate {} not in [0, 0.5)", self.noise_flip_rate));
        }
        if !(self.mean_jitter >= 0.0 && self.mean_jitter.is_finite()) {
            return bad("mean_jitter must be non-negative".into());
        }
        if self.n_classes < 5 {
            return bad("n_classes must be at least 5".into());
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.top1_accuracy) || !unit.contains(&self.top5_accuracy) || self.top5_accuracy < self.top1_accuracy {
            return bad("classifier accuracies must satisfy 0 <= top1 <= top5 <= 1".into());
        }
        if rect_shapes(self).is_empty() {
            return bad(format!(
                "no rectangle on a {}x{} grid has an area fraction in [{lo}, {hi}]",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub map: TokenMap,
    pub mask: Mask,
    pub bbox: BBox,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub quadrants: [TokenMap; 4],
    pub gt_class: u32,
    pub pred_classes: Vec<u32>,
    /// Class means the tokens were drawn around.
    pub fg_mean: Vec<f64>,
    pub bg_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn image_size(&self) -> (u32, u32) {
        (
            self.config.width as u32 * SYNTH_PATCH,
            self.config.height as u32 * SYNTH_PATCH,
        )
    }
}

fn rect_shapes(cfg: &SynthConfig) -> Vec<(usize, usize)> {
    let total = (cfg.height * cfg.width) as f64;
    let (lo, hi) = cfg.rect_fraction;
    (1..=cfg.height)
        .flat_map(|h| (1..=cfg.width).map(move |w| (h, w)))
        .filter(|&(h, w)| {
            let f = (h * w) as f64 / total;
            f >= lo - 1e-12 && f <= hi + 1e-12
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v[0] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Draws the whole dataset in memory.
///
/// A shared class axis `u` and base background mean are drawn once. Each
/// image then shifts the background mean by a jitter orthogonal to `u`
/// and puts the foreground mean `separation * sigma` further along `u`,
/// so the means move between images while one filter can still separate
/// every image.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, u64::MAX);
    let axis = unit(gaussian(&mut rng, cfg.dim));
    let base = gaussian(&mut rng, cfg.dim);
    let shapes = rect_shapes(cfg);
    let images = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| generate_image(cfg, i, &axis, &base, &shapes))
        .collect();
    Ok(SynthDataset { config: *cfg, images })
}

fn generate_image(cfg: &SynthConfig, index: usize, axis: &[f64], base: &[f64], shapes: &[(usize, usize)]) -> SynthImage {
    let (h, w, d) = (cfg.height, cfg.width, cfg.dim);
    let mut rng = rng_for(cfg.seed, index as u64);

    let jitter = gaussian(&mut rng, d);
    let along: f64 = jitter.iter().zip(axis).map(|(a, b)| a * b).sum();
    let mu_b: Vec<f64> = (0..d)
        .map(|j| base[j] + cfg.mean_jitter * (jitter[j] - along * axis[j]))
        .collect();
    let mu_f: Vec<f64> = (0..d).map(|j| mu_b[j] + cfg.separation * cfg.sigma * axis[j]).collect();

    let (rh, rw) = shapes[rng.random_range(0..shapes.len())];
    let (r0, c0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
    let mut mask = Mask::zeros(h, w);
    for r in r0..r0 + rh {
        for c in c0..c0 + rw {
            mask.set(r, c, true);
        }
    }

    let draw = |mean: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
        mean.iter()
            .map(|&m| (m + cfg.sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    };
    let mut layer = Vec::with_capacity(h * w * d);
    for &fg in &mask.bits {
        let flipped = rng.random_bool(cfg.noise_flip_rate);
        let mean = if fg != flipped { &mu_f } else { &mu_b };
        layer.extend(draw(mean, &mut rng));
    }
    let class_token = draw(&mu_f, &mut rng);

    let gt_class = rng.random_range(0..cfg.n_classes);
    let pred_classes = simulate_classifier(cfg, gt_class, &mut rng);

    let map = replicate(h, w, d, &layer, &class_token);
    let quadrants = std::array::from_fn(|q| {
        let (qr, qc) = ((q / 2) * h / 2, (q % 2) * w / 2);
        let mut sub = Vec::with_capacity(h * w * d);
        for r in 0..h {
            for c in 0..w {
                let src = ((qr + r / 2) * w + qc + c / 2) * d;
                sub.extend_from_slice(&layer[src..src + d]);
            }
        }
        replicate(h, w, d, &sub, &class_token)
    });
    let image_size = (w as u32 * SYNTH_PATCH, h as u32 * SYNTH_PATCH);
    SynthImage {
        id: format!("synth_{index:05}"),
        bbox: mask_to_box(&mask, SYNTH_PATCH, image_size, BoxPolicy::AllForeground),
        map,
        mask,
        quadrants,
        gt_class,
        pred_classes,
        fg_mean: mu_f,
        bg_mean: mu_b,
    }
}

/// Three identical layers and an all-zero positional grid.
fn replicate(h: usize, w: usize, d: usize, layer: &[f32], class_token: &[f32]) -> TokenMap {
    TokenMap {
        n_layers: 3,
        height: h,
        width: w,
        dim: d,
        grid: layer.repeat(3),
        class_tokens: class_token.repeat(3),
        pos_grid: Some(vec![0.0; h * w * d]),
        pos_class: Some(vec![0.0; d]),
    }
}

/// Five distinct class ids; the true class is first with probability
/// `top1_accuracy` and somewhere in the list with probability
/// `top5_accuracy`.
fn simulate_classifier(cfg: &SynthConfig, gt: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let u: f64 = rng.random();
    let others: Vec<u32> = sample(rng, cfg.n_classes as usize - 1, 5)
        .into_iter()
        .map(|i| if (i as u32) < gt { i as u32 } else { i as u32 + 1 })
        .collect();
    let mut preds = others;
    if u < cfg.top1_accuracy {
        preds[0] = gt;
    } else if u < cfg.top5_accuracy {
        let pos = rng.random_range(1..5);
        preds[pos] = gt;
    }
    preds
}

/// Writes CTM files, planted masks and `manifest.json` under `out_dir`.
///
/// Layout: `maps/<id>.ctm`, `maps/<id>_q<0..3>.ctm`, `planted/<id>.mask`.
pub fn write_synthetic(dataset: &SynthDataset, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    for sub in ["maps", "planted"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = DatasetManifest::new(SYNTH_PATCH, dataset.image_size());
    manifest.base_dir = out.to_path_buf();
    manifest.images = dataset
        .images
        .par_iter()
        .map(|img| -> Result<ImageEntry> {
            let rel = PathBuf::from("maps").join(format!("{}.ctm", img.id));
            write_token_map(&img.map, out.join(&rel))?;
            let mut quads = Vec::with_capacity(4);
            for (q, qm) in img.quadrants.iter().enumerate() {
                let qrel = PathBuf::from("maps").join(format!("{}_q{q}.ctm", img.id));
                write_token_map(qm, out.join(&qrel))?;
                quads.push(qrel);
            }
            write_mask(&img.mask, out.join("planted").join(format!("{}.mask", img.id)))?;
            Ok(ImageEntry {
                id: img.id.clone(),
                token_map: rel,
                quadrant_maps: Some(quads),
                gt_boxes: Some(vec![img.bbox]),
                gt_class: Some(img.gt_class),
                pred_classes: Some(img.pred_classes.clone()),
            })
        })
        .collect::<Result<_>>()?;
    save_manifest(&manifest, out.join("manifest.json"))?;
    Ok(manifest)
}
