//! Evaluation measures: ratio-threshold accuracies, relative and RMS depth
//! errors, the scale-invariant log-depth error, and confusion-matrix
//! segmentation scores.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, shape_err, Result};
use crate::raster::{plane_dims, LabelMap, ValidMask};
use crate::tensor::Tensor;

/// The eight depth measures, pixel-pooled over every valid pixel seen.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub delta1: f64,
    /// ... < 1.25².
    pub delta2: f64,
    /// ... < 1.25³.
    pub delta3: f64,
    /// Absolute relative difference, mean of |pred - gt| / gt.
    pub ard: f64,
    /// Square relative difference, mean of (pred - gt)² / gt.
    pub srd: f64,
    pub rmse_linear: f64,
    pub rmse_log: f64,
    /// Scale-invariant error: the variance of ln(pred) - ln(gt).
    pub sie: f64,
}

impl DepthMetricsReport {
    /// Report rows in table order with their printed names.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("γ < 1.25", self.delta1),
            ("γ < 1.25^2", self.delta2),
            ("γ < 1.25^3", self.delta3),
            ("ARD", self.ard),
            ("SRD", self.srd),
            ("RMSE-linear", self.rmse_linear),
            ("RMSE-log", self.rmse_log),
            ("SIE", self.sie),
        ]
    }
}

/// Running sums for the depth measures; mergeable across images so a
/// dataset evaluation pools all valid pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct DepthAccumulator {
    count: u64,
    delta1: u64,
    delta2: u64,
    delta3: u64,
    sum_abs_rel: f64,
    sum_sq_rel: f64,
    sum_sq: f64,
    sum_sq_log: f64,
    sum_log: f64,
}

const GAMMA: f64 = 1.25;

impl DepthAccumulator {
    pub fn new() -> DepthAccumulator {
        DepthAccumulator::default()
    }

    /// Adds every valid pixel of one prediction/ground-truth pair.
    /// Both maps must be strictly positive on valid pixels.
    pub fn add_map(&mut self, pred: &Tensor, gt: &Tensor, valid: &ValidMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(shape_err!(
                "depth metric dims mismatch: pred {:?} vs gt {:?}",
                pred.dims(),
                gt.dims()
            ));
        }
        let (h, w) = plane_dims(pred)?;
        if valid.height() != h || valid.width() != w {
            return Err(shape_err!("mask does not match depth maps"));
        }
        for ((&p, &g), &ok) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
            if !ok {
                continue;
            }
            if p <= 0.0 || g <= 0.0 {
                return Err(data_err!(
                    "non-positive depth on a valid pixel (pred {p}, gt {g})"
                ));
            }
            self.add_pixel(p, g);
        }
        Ok(())
    }

    fn add_pixel(&mut self, pred: f64, gt: f64) {
        self.count += 1;
        let ratio = f64::max(pred / gt, gt / pred);
        if ratio < GAMMA {
            self.delta1 += 1;
        }
        if ratio < GAMMA * GAMMA {
            self.delta2 += 1;
        }
        if ratio < GAMMA * GAMMA * GAMMA {
            self.delta3 += 1;
        }
        let diff = pred - gt;
        self.sum_abs_rel += diff.abs() / gt;
        self.sum_sq_rel += diff * diff / gt;
        self.sum_sq += diff * diff;
        let log_diff = pred.ln() - gt.ln();
        self.sum_sq_log += log_diff * log_diff;
        self.sum_log += log_diff;
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.count += other.count;
        self.delta1 += other.delta1;
        self.delta2 += other.delta2;
        self.delta3 += other.delta3;
        self.sum_abs_rel += other.sum_abs_rel;
        self.sum_sq_rel += other.sum_sq_rel;
        self.sum_sq += other.sum_sq;
        self.sum_sq_log += other.sum_sq_log;
        self.sum_log += other.sum_log;
    }

    pub fn pixel_count(&self) -> u64 {
        self.count
    }

    pub fn finalize(&self) -> Result<DepthMetricsReport> {
        if self.count == 0 {
            return Err(data_err!("depth metrics need at least one valid pixel"));
        }
        let n = self.count as f64;
        let mean_sq_log = self.sum_sq_log / n;
        let mean_log = self.sum_log / n;
        Ok(DepthMetricsReport {
            delta1: self.delta1 as f64 / n,
            delta2: self.delta2 as f64 / n,
            delta3: self.delta3 as f64 / n,
            ard: self.sum_abs_rel / n,
            srd: self.sum_sq_rel / n,
            rmse_linear: (self.sum_sq / n).sqrt(),
            rmse_log: mean_sq_log.sqrt(),
            // A variance; clamp the last-ulp negatives roundoff can produce.
            sie: (mean_sq_log - mean_log * mean_log).max(0.0),
        })
    }
}

/// One-shot depth metrics over a single map pair.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, valid: &ValidMask) -> Result<DepthMetricsReport> {
    let mut acc = DepthAccumulator::new();
    acc.add_map(pred, gt, valid)?;
    acc.finalize()
}

/// K×K confusion counts; rows index the ground-truth class, columns the
/// predicted class. Mergeable by addition across images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labelled pair of maps, skipping ignore-label ground truth.
    pub fn accumulate(
        &mut self,
        pred_labels: &LabelMap,
        gt_labels: &LabelMap,
        ignore_label: u32,
    ) -> Result<()> {
        if pred_labels.height() != gt_labels.height() || pred_labels.width() != gt_labels.width() {
            return Err(shape_err!("prediction and ground-truth label maps differ in size"));
        }
        gt_labels.check_range(self.num_classes, ignore_label)?;
        pred_labels.check_range(self.num_classes, ignore_label)?;
        for (&pred, &gt) in pred_labels.data().iter().zip(gt_labels.data()) {
            if gt == ignore_label {
                continue;
            }
            if pred == ignore_label {
                return Err(data_err!("prediction contains the ignore label on an evaluated pixel"));
            }
            self.counts[gt as usize * self.num_classes + pred as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(shape_err!(
                "cannot merge confusion matrices of {} and {} classes",
                self.num_classes,
                other.num_classes
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Builds a confusion matrix from a single prediction/ground-truth pair.
pub fn confusion_accumulate(
    pred_labels: &LabelMap,
    gt_labels: &LabelMap,
    num_classes: usize,
    ignore_label: u32,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred_labels, gt_labels, ignore_label)?;
    Ok(cm)
}

/// Global accuracy, class-average accuracy and mean intersection over
/// union. Classes absent from both ground truth and prediction are
/// excluded rather than scored zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegMetricsReport {
    pub global_acc: f64,
    pub class_acc: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl SegMetricsReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("G", self.global_acc),
            ("C", self.class_acc),
            ("IoUclass", self.mean_iou),
        ]
    }
}

pub fn seg_metrics(cm: &ConfusionMatrix) -> Result<SegMetricsReport> {
    let k = cm.num_classes();
    let total = cm.total();
    if total == 0 {
        return Err(data_err!("segmentation metrics need a non-empty confusion matrix"));
    }

    let mut trace = 0u64;
    let mut class_acc_sum = 0.0;
    let mut class_acc_n = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    let mut per_class_iou = Vec::with_capacity(k);
    for class in 0..k {
        let diag = cm.count(class, class);
        trace += diag;
        let row: u64 = (0..k).map(|p| cm.count(class, p)).sum();
        let col: u64 = (0..k).map(|g| cm.count(g, class)).sum();
        if row > 0 {
            class_acc_sum += diag as f64 / row as f64;
            class_acc_n += 1;
        }
        let union = row + col - diag;
        if union > 0 {
            let iou = diag as f64 / union as f64;
            iou_sum += iou;
            iou_n += 1;
            per_class_iou.push(Some(iou));
        } else {
            per_class_iou.push(None);
        }
    }
    if class_acc_n == 0 {
        return Err(data_err!("confusion matrix has no populated ground-truth class"));
    }
    Ok(SegMetricsReport {
        global_acc: trace as f64 / total as f64,
        class_acc: class_acc_sum / class_acc_n as f64,
        mean_iou: iou_sum / iou_n as f64,
        per_class_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask(h: usize, w: usize) -> ValidMask {
        ValidMask::all_valid(h, w)
    }

    #[test]
    fn perfect_prediction_maxes_every_measure() {
        let gt = Tensor::new(vec![1, 2, 2], vec![1.0, 2.5, 4.0, 8.0]).unwrap();
        let r = depth_metrics(&gt, &gt, &full_mask(2, 2)).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.ard, 0.0);
        assert_eq!(r.srd, 0.0);
        assert_eq!(r.rmse_linear, 0.0);
        assert_eq!(r.rmse_log, 0.0);
        assert_eq!(r.sie, 0.0);
    }

    #[test]
    fn doubled_constant_depth_hand_values() {
        // gt = 4, pred = 8: ratio 2 beats every gamma threshold;
        // ARD = 1, SRD = 4, RMSE-linear = 4, RMSE-log = ln 2, SIE = 0.
        let gt = Tensor::full(vec![1, 3, 3], 4.0).unwrap();
        let pred = Tensor::full(vec![1, 3, 3], 8.0).unwrap();
        let r = depth_metrics(&pred, &gt, &full_mask(3, 3)).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
        assert!((r.ard - 1.0).abs() < 1e-15);
        assert!((r.srd - 4.0).abs() < 1e-15);
        assert!((r.rmse_linear - 4.0).abs() < 1e-15);
        assert!((r.rmse_log - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(r.sie < 1e-12);
    }

    #[test]
    fn ratio_under_gamma_counts_fully() {
        let gt = Tensor::new(vec![1, 1, 3], vec![1.0, 3.0, 7.0]).unwrap();
        let pred = gt.map(|v| 1.2 * v);
        let r = depth_metrics(&pred, &gt, &full_mask(1, 3)).unwrap();
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn non_positive_valid_depth_is_data_error() {
        let gt = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let pred = Tensor::full(vec![1, 1, 2], 1.0).unwrap();
        assert!(depth_metrics(&pred, &gt, &full_mask(1, 2)).is_err());
        let masked = ValidMask::new(1, 2, vec![true, false]).unwrap();
        assert!(depth_metrics(&pred, &gt, &masked).is_ok());
    }

    #[test]
    fn empty_mask_is_data_error() {
        let gt = Tensor::full(vec![1, 1, 2], 1.0).unwrap();
        let mask = ValidMask::new(1, 2, vec![false, false]).unwrap();
        assert!(depth_metrics(&gt, &gt, &mask).is_err());
    }

    #[test]
    fn confusion_diagonal_for_equal_maps() {
        let labels = LabelMap::new(1, 4, vec![0, 1, 1, 2]).unwrap();
        let cm = confusion_accumulate(&labels, &labels, 3, 255).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn ignore_label_pixels_are_not_counted() {
        let gt = LabelMap::new(1, 2, vec![255, 0]).unwrap();
        let pred = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let cm = confusion_accumulate(&pred, &gt, 2, 255).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn hand_counted_confusion_entries() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let cm = confusion_accumulate(&pred, &gt, 2, 255).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.count(1, 1), 2);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let gt = LabelMap::new(1, 1, vec![9]).unwrap();
        let pred = LabelMap::new(1, 1, vec![0]).unwrap();
        assert!(confusion_accumulate(&pred, &gt, 2, 255).is_err());
    }

    #[test]
    fn diagonal_matrix_scores_one() {
        let labels = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let cm = confusion_accumulate(&labels, &labels, 3, 255).unwrap();
        let r = seg_metrics(&cm).unwrap();
        assert_eq!(r.global_acc, 1.0);
        assert_eq!(r.class_acc, 1.0);
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn hand_confusion_matrix_arithmetic() {
        // cm = [[1,1],[0,2]] -> G = 0.75, C = 0.75, IoU = 7/12
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let cm = confusion_accumulate(&pred, &gt, 2, 255).unwrap();
        let r = seg_metrics(&cm).unwrap();
        assert!((r.global_acc - 0.75).abs() < 1e-15);
        assert!((r.class_acc - 0.75).abs() < 1e-15);
        assert!((r.mean_iou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn empty_class_is_excluded_not_zeroed() {
        // 3-class matrix whose class 2 never appears must match the
        // 2-class reduction.
        let gt3 = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred3 = LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let r3 = seg_metrics(&confusion_accumulate(&pred3, &gt3, 3, 255).unwrap()).unwrap();
        let r2 = seg_metrics(&confusion_accumulate(&pred3, &gt3, 2, 255).unwrap()).unwrap();
        assert_eq!(r3.class_acc, r2.class_acc);
        assert_eq!(r3.mean_iou, r2.mean_iou);
        assert_eq!(r3.per_class_iou[2], None);
    }

    #[test]
    fn empty_matrix_is_data_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(seg_metrics(&cm).is_err());
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt_a = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let pred_a = LabelMap::new(1, 3, vec![0, 2, 2]).unwrap();
        let gt_b = LabelMap::new(1, 3, vec![2, 2, 0]).unwrap();
        let pred_b = LabelMap::new(1, 3, vec![2, 1, 0]).unwrap();
        let mut merged = confusion_accumulate(&pred_a, &gt_a, 3, 255).unwrap();
        merged
            .merge(&confusion_accumulate(&pred_b, &gt_b, 3, 255).unwrap())
            .unwrap();
        let mut joint = ConfusionMatrix::new(3);
        joint.accumulate(&pred_a, &gt_a, 255).unwrap();
        joint.accumulate(&pred_b, &gt_b, 255).unwrap();
        assert_eq!(merged, joint);
    }
}
