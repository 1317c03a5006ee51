//! Non-differentiable raster maps: integer label images and per-pixel
//! validity masks.

use crate::error::{data_err, shape_err, Result};
use crate::tensor::Tensor;

/// H×W map of class labels. Values are either a class id in
/// `0..num_classes` or an ignore label; range checking happens at the
/// operations that consume the map, which know both bounds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<LabelMap> {
        if data.len() != h * w {
            return Err(shape_err!(
                "label map data length {} does not match {h}×{w}",
                data.len()
            ));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u32) -> LabelMap {
        LabelMap {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u32) {
        self.data[y * self.w + x] = value;
    }

    /// Ensures every label is a class id below `num_classes` or equals
    /// `ignore_label`.
    pub fn check_range(&self, num_classes: usize, ignore_label: u32) -> Result<()> {
        for (idx, &label) in self.data.iter().enumerate() {
            if label != ignore_label && label as usize >= num_classes {
                return Err(data_err!(
                    "label {label} at pixel {idx} out of range for {num_classes} classes (ignore {ignore_label})"
                ));
            }
        }
        Ok(())
    }
}

/// H×W boolean mask marking which pixels participate in losses/metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl ValidMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<ValidMask> {
        if data.len() != h * w {
            return Err(shape_err!(
                "mask data length {} does not match {h}×{w}",
                data.len()
            ));
        }
        Ok(ValidMask { h, w, data })
    }

    pub fn all_valid(h: usize, w: usize) -> ValidMask {
        ValidMask {
            h,
            w,
            data: vec![true; h * w],
        }
    }

    /// Depth ground truth convention: pixels with value > 0 are valid.
    /// Accepts `1×H×W` or `H×W` tensors.
    pub fn from_depth_gt(depth: &Tensor) -> Result<ValidMask> {
        let (h, w) = plane_dims(depth)?;
        Ok(ValidMask {
            h,
            w,
            data: depth.data().iter().map(|&v| v > 0.0).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Extracts (H, W) from a `1×H×W` or `H×W` tensor.
pub(crate) fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        other => Err(shape_err!("expected 1×H×W or H×W map, got {:?}", other)),
    }
}
