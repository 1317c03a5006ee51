//! Dataset evaluation: per-image tiled inference, averaged reassembly of
//! depth and class-score maps, then pixel-pooled depth metrics and an
//! accumulated confusion matrix.

use crate::data::{assemble_tiles, extract_tiles, make_tile_layout, Blend, SceneSample};
use crate::error::{config_err, data_err, Result};
use crate::metrics::{seg_metrics, ConfusionMatrix, DepthAccumulator, DepthMetricsReport, SegMetricsReport};
use crate::net::HybridNet;
use crate::params::ParamSet;
use crate::raster::{LabelMap, ValidMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EvalReports {
    pub depth: DepthMetricsReport,
    pub seg: SegMetricsReport,
    pub images: usize,
    pub depth_pixels: u64,
}

/// Per-pixel argmax over a `K×H×W` score map; ties go to the lowest class
/// index.
pub fn predicted_labels(scores: &Tensor) -> Result<LabelMap> {
    let dims = scores.dims();
    let (k, h, w) = match dims {
        [k, h, w] => (*k, *h, *w),
        _ => return Err(data_err!("argmax expects K×H×W scores, got {:?}", dims)),
    };
    let plane = h * w;
    let data = scores.data();
    let mut labels = vec![0u32; plane];
    for (px, label) in labels.iter_mut().enumerate() {
        let mut best = data[px];
        for class in 1..k {
            let v = data[class * plane + px];
            if v > best {
                best = v;
                *label = class as u32;
            }
        }
    }
    LabelMap::new(h, w, labels)
}

/// Runs the model over one image, optionally tiled. With tiling, the tile
/// extent must equal the model's configured input size; predictions are
/// re-assembled by averaging (scores before any argmax).
pub fn predict_image(
    net: &HybridNet,
    params: &ParamSet,
    rgb: &Tensor,
    tiling: Option<(usize, usize)>,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = match rgb.dims() {
        [3, h, w] => (*h, *w),
        other => return Err(data_err!("expected a 3×H×W image, got {:?}", other)),
    };
    let cfg = net.config();
    match tiling {
        None => {
            if (h, w) != (cfg.input_h, cfg.input_w) {
                return Err(config_err!(
                    "image {h}×{w} does not match the model input {}×{} (use tiling)",
                    cfg.input_h,
                    cfg.input_w
                ));
            }
            let out = net.hybrid_forward(params, rgb)?;
            Ok((out.depth, out.class_scores))
        }
        Some((rows, cols)) => {
            let layout = make_tile_layout(h, w, rows, cols)?;
            if (layout.tile_h, layout.tile_w) != (cfg.input_h, cfg.input_w) {
                return Err(config_err!(
                    "a {rows}×{cols} grid over {h}×{w} yields {}×{} tiles, but the model takes {}×{} inputs",
                    layout.tile_h,
                    layout.tile_w,
                    cfg.input_h,
                    cfg.input_w
                ));
            }
            let tiles = extract_tiles(rgb, &layout)?;
            let mut depth_tiles = Vec::with_capacity(tiles.len());
            let mut score_tiles = Vec::with_capacity(tiles.len());
            for tile in &tiles {
                let out = net.hybrid_forward(params, tile)?;
                depth_tiles.push(out.depth);
                score_tiles.push(out.class_scores);
            }
            let depth = assemble_tiles(&depth_tiles, &layout, Blend::Average)?;
            let scores = assemble_tiles(&score_tiles, &layout, Blend::Average)?;
            Ok((depth, scores))
        }
    }
}

/// Evaluates a checkpointed model over a dataset. Depth metrics pool all
/// valid pixels across the set; segmentation metrics come from one
/// accumulated confusion matrix.
pub fn evaluate(
    net: &HybridNet,
    params: &ParamSet,
    dataset: &[SceneSample],
    tiling: Option<(usize, usize)>,
    ignore_label: u32,
) -> Result<EvalReports> {
    if dataset.is_empty() {
        return Err(config_err!("evaluation needs a non-empty dataset"));
    }
    let mut depth_acc = DepthAccumulator::new();
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for sample in dataset {
        let (depth, scores) = predict_image(net, params, &sample.rgb, tiling)?;
        let labels = predicted_labels(&scores)?;
        cm.accumulate(&labels, &sample.labels_gt, ignore_label)?;
        let valid = ValidMask::from_depth_gt(&sample.depth_gt)?;
        depth_acc.add_map(&depth, &sample.depth_gt, &valid)?;
    }
    Ok(EvalReports {
        depth: depth_acc.finalize()?,
        seg: seg_metrics(&cm)?,
        images: dataset.len(),
        depth_pixels: depth_acc.pixel_count(),
    })
}

/// Harness sanity path: scores the ground truth against itself, bypassing
/// the model entirely. Every measure comes out perfect.
pub fn evaluate_oracle(
    dataset: &[SceneSample],
    num_classes: usize,
    ignore_label: u32,
) -> Result<EvalReports> {
    if dataset.is_empty() {
        return Err(config_err!("evaluation needs a non-empty dataset"));
    }
    let mut depth_acc = DepthAccumulator::new();
    let mut cm = ConfusionMatrix::new(num_classes);
    for sample in dataset {
        cm.accumulate(&sample.labels_gt, &sample.labels_gt, ignore_label)?;
        let valid = ValidMask::from_depth_gt(&sample.depth_gt)?;
        depth_acc.add_map(&sample.depth_gt, &sample.depth_gt, &valid)?;
    }
    Ok(EvalReports {
        depth: depth_acc.finalize()?,
        seg: seg_metrics(&cm)?,
        images: dataset.len(),
        depth_pixels: depth_acc.pixel_count(),
    })
}
