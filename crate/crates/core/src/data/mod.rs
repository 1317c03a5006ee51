//! Sample formats, the synthetic scene generator, disk I/O and the
//! tiling/reassembly path for fixed-size model inputs.

pub mod formats;
pub mod synth;
pub mod tiles;

pub use formats::{
    disparity_to_depth, read_dmap, read_pgm, read_pgm16, read_ppm, write_dmap, write_pgm,
    write_pgm16, write_ppm,
};
pub use synth::{synth_scene, synth_scene_with_objects, GenConfig, SceneObject};
pub use tiles::{assemble_tiles, extract_tiles, make_tile_layout, Blend, TileLayout};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{config_err, data_err, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Name of the id listing inside a dataset directory.
pub const MANIFEST_NAME: &str = "manifest.txt";

/// One (RGB, ground-truth depth, ground-truth labels) triplet. Depth uses
/// 0 for invalid pixels and is strictly positive elsewhere.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub id: String,
    /// `3×H×W`, values in [0,1].
    pub rgb: Tensor,
    /// `1×H×W`, `> 0` on valid pixels, 0 marks invalid.
    pub depth_gt: Tensor,
    pub labels_gt: LabelMap,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.rgb.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.dims()[2]
    }

    /// Checks the cross-raster invariants: shared extent, rgb range,
    /// non-negative depth, labels in range.
    pub fn validate(&self, num_classes: usize, ignore_label: u32) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb.dims() != [3, h, w] {
            return Err(data_err!("rgb raster must be 3×H×W, got {:?}", self.rgb.dims()));
        }
        if self.depth_gt.dims() != [1, h, w] {
            return Err(data_err!(
                "depth raster {:?} does not match rgb {h}×{w}",
                self.depth_gt.dims()
            ));
        }
        if self.labels_gt.height() != h || self.labels_gt.width() != w {
            return Err(data_err!("label raster does not match rgb extent"));
        }
        if self.rgb.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(data_err!("rgb values must lie in [0,1]"));
        }
        if self.depth_gt.data().iter().any(|&v| v < 0.0) {
            return Err(data_err!("depth values must be non-negative"));
        }
        self.labels_gt.check_range(num_classes, ignore_label)?;
        Ok(())
    }
}

/// File paths of one sample id inside a dataset directory.
pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{id}.ppm")),
        dir.join(format!("{id}_labels.pgm")),
        dir.join(format!("{id}_depth.dmap")),
    )
}

pub fn save_sample(dir: &Path, sample: &SceneSample) -> Result<()> {
    let (rgb, labels, depth) = sample_paths(dir, &sample.id);
    write_ppm(&rgb, &sample.rgb)?;
    write_pgm(&labels, &sample.labels_gt)?;
    write_dmap(&depth, &sample.depth_gt)?;
    Ok(())
}

pub fn load_sample(dir: &Path, id: &str) -> Result<SceneSample> {
    let (rgb, labels, depth) = sample_paths(dir, id);
    Ok(SceneSample {
        id: id.to_string(),
        rgb: read_ppm(&rgb)?,
        labels_gt: read_pgm(&labels)?,
        depth_gt: read_dmap(&depth)?,
    })
}

/// Writes the manifest: newline-separated ids, UTF-8.
pub fn write_manifest(dir: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !ids.is_empty() {
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(config_err!("no {MANIFEST_NAME} in {}", dir.display()));
    }
    let text = fs::read_to_string(&path)?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Loads every sample named by the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let ids = read_manifest(dir)?;
    ids.iter().map(|id| load_sample(dir, id)).collect()
}

/// Writes samples plus manifest into `dir` (created if missing).
pub fn save_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for sample in samples {
        save_sample(dir, sample)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    write_manifest(dir, &ids)
}
