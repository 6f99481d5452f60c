use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_token_map, TokenMap};
use crate::error::{Error, Result};
use crate::maskops::BBox;

pub const MANIFEST_VERSION: u32 = 1;

/// One image of a dataset. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub token_map: PathBuf,
    /// Top-left, top-right, bottom-left, bottom-right.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrant_maps: Option<Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_class: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_classes: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub patch_size: u32,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub images: Vec<ImageEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(patch_size: u32, image_size: (u32, u32)) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            patch_size,
            image_size,
            images: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Token-grid shape `(height, width)` implied by the image size.
    pub fn grid_shape(&self) -> (usize, usize) {
        let p = self.patch_size.max(1);
        ((self.image_size.1 / p) as usize, (self.image_size.0 / p) as usize)
    }

    fn check_shape(&self, map: &TokenMap, path: &Path) -> Result<()> {
        let p = self.patch_size as usize;
        let (w, h) = (self.image_size.0 as usize, self.image_size.1 as usize);
        if map.width * p != w || map.height * p != h {
            return Err(Error::Shape(format!(
                "{}: grid {}x{} with patch {} does not cover image {}x{}",
                path.display(),
                map.height,
                map.width,
                p,
                w,
                h
            )));
        }
        Ok(())
    }

    /// Loads and shape-checks the full-image map of `entry`.
    pub fn load_map(&self, entry: &ImageEntry) -> Result<TokenMap> {
        let path = self.resolve(&entry.token_map);
        let map = read_token_map(&path)?;
        self.check_shape(&map, &path)?;
        Ok(map)
    }

    /// Loads the four quadrant maps; `None` when the entry has none.
    pub fn load_quadrants(&self, entry: &ImageEntry) -> Result<Option<[TokenMap; 4]>> {
        let Some(paths) = &entry.quadrant_maps else {
            return Ok(None);
        };
        let mut maps = Vec::with_capacity(4);
        for p in paths {
            let path = self.resolve(p);
            let map = read_token_map(&path)?;
            self.check_shape(&map, &path)?;
            maps.push(map);
        }
        let first = &maps[0];
        for (i, m) in maps.iter().enumerate().skip(1) {
            if (m.height, m.width, m.dim) != (first.height, first.width, first.dim) {
                return Err(Error::Shape(format!(
                    "{}: quadrant {i} shape ({}, {}, {}) differs from quadrant 0 ({}, {}, {})",
                    entry.id, m.height, m.width, m.dim, first.height, first.width, first.dim
                )));
            }
        }
        Ok(Some(maps.try_into().expect("four quadrants")))
    }
}

/// Parses a manifest and verifies that every referenced file exists.
///
/// Shape consistency between the manifest and each map is checked when the
/// map is loaded.
pub fn load_manifest(source: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = source.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    if manifest.patch_size == 0 {
        return Err(Error::Manifest("patch_size must be positive".into()));
    }
    let (w, h) = manifest.image_size;
    if w % manifest.patch_size != 0 || h % manifest.patch_size != 0 || w == 0 || h == 0 {
        return Err(Error::Manifest(format!(
            "image_size ({w}, {h}) is not a positive multiple of patch_size {}",
            manifest.patch_size
        )));
    }

    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    for entry in &manifest.images {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::Manifest(format!("duplicate image id {:?}", entry.id)));
        }
        if let Some(q) = &entry.quadrant_maps {
            if q.len() != 4 {
                return Err(Error::Manifest(format!(
                    "{}: quadrant_maps must have length 4 (found {})",
                    entry.id,
                    q.len()
                )));
            }
        }
        if let Some(p) = &entry.pred_classes {
            if p.is_empty() {
                return Err(Error::Manifest(format!(
                    "{}: pred_classes must not be empty",
                    entry.id
                )));
            }
        }
        let paths = std::iter::once(&entry.token_map).chain(entry.quadrant_maps.iter().flatten());
        for p in paths {
            let resolved = manifest.resolve(p);
            if !resolved.is_file() {
                missing.push(resolved.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Manifest(format!(
            "missing token map files: {}",
            missing.join(", ")
        )));
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_io::write_token_map;

    fn map(h: usize, w: usize) -> TokenMap {
        TokenMap {
            n_layers: 1,
            height: h,
            width: w,
            dim: 2,
            grid: vec![0.5; h * w * 2],
            class_tokens: vec![1.0, 1.0],
            pos_grid: None,
            pos_class: None,
        }
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn vit_resolution_map_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        write_token_map(&map(24, 24), dir.path().join("a.ctm")).unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"version":1,"patch_size":16,"image_size":[384,384],
               "images":[{"id":"a","token_map":"a.ctm","gt_boxes":[[0,0,16,32]]}]}"#,
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.grid_shape(), (24, 24));
        let tm = m.load_map(&m.images[0]).unwrap();
        assert_eq!((tm.height, tm.width), (24, 24));
        assert_eq!(m.images[0].gt_boxes.as_ref().unwrap()[0], BBox::new(0, 0, 16, 32));
    }

    #[test]
    fn missing_map_path_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"version":1,"patch_size":16,"image_size":[384,384],
               "images":[{"id":"a","token_map":"nope.ctm"}]}"#,
        );
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("nope.ctm"), "{err}");
    }

    #[test]
    fn three_quadrants_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_token_map(&map(24, 24), dir.path().join("a.ctm")).unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"version":1,"patch_size":16,"image_size":[384,384],
               "images":[{"id":"a","token_map":"a.ctm","quadrant_maps":["a.ctm","a.ctm","a.ctm"]}]}"#,
        );
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("quadrant_maps must have length 4"), "{err}");
    }

    #[test]
    fn shape_mismatch_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_token_map(&map(12, 12), dir.path().join("a.ctm")).unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"version":1,"patch_size":16,"image_size":[384,384],
               "images":[{"id":"a","token_map":"a.ctm"}]}"#,
        );
        let m = load_manifest(&p).unwrap();
        assert!(matches!(m.load_map(&m.images[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn malformed_json_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "{ not json");
        assert!(matches!(load_manifest(&p), Err(Error::Json { .. })));
    }

    #[test]
    fn save_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        write_token_map(&map(2, 3), dir.path().join("a.ctm")).unwrap();
        let mut m = DatasetManifest::new(8, (24, 16));
        m.images.push(ImageEntry {
            id: "a".into(),
            token_map: "a.ctm".into(),
            quadrant_maps: None,
            gt_boxes: Some(vec![BBox::new(1, 2, 3, 4)]),
            gt_class: Some(3),
            pred_classes: Some(vec![3, 1]),
        });
        let p = dir.path().join("m.json");
        save_manifest(&m, &p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.images, m.images);
        assert_eq!(back.base_dir, dir.path());
    }
}
