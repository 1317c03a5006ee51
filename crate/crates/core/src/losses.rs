//! Task losses: per-pixel cross-entropy for segmentation, Euclidean depth
//! losses in linear and mean-variance-normalized space, and their weighted
//! hybrid combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tape, Var};
use crate::error::{data_err, shape_err, Result};
use crate::raster::{plane_dims, LabelMap, ValidMask};
use crate::tensor::Tensor;

/// Default stabilizer added to the standard deviation before dividing.
pub const DEFAULT_NORM_EPSILON: f64 = 1e-6;

/// How the per-pixel cross-entropy terms are reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain sum over non-ignored pixels.
    Sum,
    /// Sum divided by the count of non-ignored pixels.
    Mean,
}

/// Per-map standardization statistics over valid pixels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub epsilon: f64,
}

/// The four scalars of one training step. `l_h` always equals
/// `alpha * l_s + (l_dl + l_dn)` exactly as the forward graph computed it.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_dl: f64,
    pub l_dn: f64,
    pub l_h: f64,
}

/// The hybrid combination rule; shared by the forward graph and tests.
pub fn hybrid_combine(alpha: f64, l_s: f64, l_dl: f64, l_dn: f64) -> f64 {
    alpha * l_s + (l_dl + l_dn)
}

/// Softmax cross-entropy over a `K×H×W` score map against integer labels,
/// computed with the log-sum-exp max shift. Ignored pixels contribute zero
/// loss and zero gradient; `Mean` divides by the non-ignored pixel count
/// (zero such pixels yields loss 0 by definition).
pub fn seg_cross_entropy(
    tape: &Tape,
    scores: Var,
    labels: &LabelMap,
    ignore_label: u32,
    reduction: Reduction,
) -> Result<Var> {
    let s = tape.value(scores);
    let sd = s.dims();
    if sd.len() != 3 {
        return Err(shape_err!("seg_cross_entropy expects K×H×W scores, got {:?}", sd));
    }
    let (k, h, w) = (sd[0], sd[1], sd[2]);
    if labels.height() != h || labels.width() != w {
        return Err(shape_err!(
            "labels {}×{} do not match scores {h}×{w}",
            labels.height(),
            labels.width()
        ));
    }
    labels.check_range(k, ignore_label)?;

    let plane = h * w;
    let data = s.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for px in 0..plane {
        let label = labels.data()[px];
        if label == ignore_label {
            continue;
        }
        let (max, lse) = log_sum_exp(data, px, k, plane);
        total += max + lse - data[label as usize * plane + px];
        count += 1;
    }
    let value = match reduction {
        Reduction::Sum => total,
        Reduction::Mean => {
            if count == 0 {
                0.0
            } else {
                total / count as f64
            }
        }
    };

    let labels = labels.clone();
    Ok(tape.push_op(
        Tensor::from_op(vec![1], vec![value]),
        Box::new(move |gout| {
            let g = gout.data()[0];
            let weight = match reduction {
                Reduction::Sum => g,
                Reduction::Mean => {
                    if count == 0 {
                        0.0
                    } else {
                        g / count as f64
                    }
                }
            };
            let data = s.data();
            let mut grad = vec![0.0; k * plane];
            for px in 0..plane {
                let label = labels.data()[px];
                if label == ignore_label {
                    continue;
                }
                let (max, lse) = log_sum_exp(data, px, k, plane);
                let denom_log = max + lse;
                for class in 0..k {
                    let p = (data[class * plane + px] - denom_log).exp();
                    let indicator = if class as u32 == label { 1.0 } else { 0.0 };
                    grad[class * plane + px] = weight * (p - indicator);
                }
            }
            vec![(scores.0, Tensor::from_op(vec![k, h, w], grad))]
        }),
    ))
}

/// Returns `(max, ln Σ e^{s_k - max})` over the K scores of pixel `px`.
fn log_sum_exp(data: &[f64], px: usize, k: usize, plane: usize) -> (f64, f64) {
    let mut max = f64::NEG_INFINITY;
    for class in 0..k {
        max = max.max(data[class * plane + px]);
    }
    let mut sum = 0.0;
    for class in 0..k {
        sum += (data[class * plane + px] - max).exp();
    }
    (max, sum.ln())
}

/// Mean/std over valid pixels of a `1×H×W` (or `H×W`) map.
fn mask_stats(data: &[f64], valid: &ValidMask, epsilon: f64) -> Result<NormStats> {
    let n = valid.count_valid();
    if n == 0 {
        return Err(data_err!("mean-variance normalization needs at least one valid pixel"));
    }
    let mut sum = 0.0;
    for (v, &ok) in data.iter().zip(valid.data()) {
        if ok {
            sum += v;
        }
    }
    let mu = sum / n as f64;
    let mut var = 0.0;
    for (v, &ok) in data.iter().zip(valid.data()) {
        if ok {
            var += (v - mu) * (v - mu);
        }
    }
    let sigma = (var / n as f64).sqrt();
    Ok(NormStats { mu, sigma, epsilon })
}

fn check_map_dims(t: &Tensor, valid: &ValidMask, what: &str) -> Result<()> {
    let (h, w) = plane_dims(t)?;
    if valid.height() != h || valid.width() != w {
        return Err(shape_err!(
            "{what}: mask {}×{} does not match map {h}×{w}",
            valid.height(),
            valid.width()
        ));
    }
    Ok(())
}

/// Standardizes a plain depth map over its valid pixels:
/// `(x - mu) / (sigma + epsilon)`. Invalid pixels pass through unchanged.
pub fn mean_variance_normalize(
    depth: &Tensor,
    valid: &ValidMask,
    epsilon: f64,
) -> Result<(Tensor, NormStats)> {
    check_map_dims(depth, valid, "mean_variance_normalize")?;
    let stats = mask_stats(depth.data(), valid, epsilon)?;
    let denom = stats.sigma + stats.epsilon;
    let data = depth
        .data()
        .iter()
        .zip(valid.data())
        .map(|(&v, &ok)| if ok { (v - stats.mu) / denom } else { v })
        .collect();
    Ok((Tensor::from_op(depth.dims().to_vec(), data), stats))
}

/// Tape version of [`mean_variance_normalize`], differentiable through the
/// mean and standard deviation of the input.
pub fn mean_variance_normalize_var(
    tape: &Tape,
    depth: Var,
    valid: &ValidMask,
    epsilon: f64,
) -> Result<(Var, NormStats)> {
    let x = tape.value(depth);
    check_map_dims(&x, valid, "mean_variance_normalize")?;
    let stats = mask_stats(x.data(), valid, epsilon)?;
    let denom = stats.sigma + stats.epsilon;
    let out = x
        .data()
        .iter()
        .zip(valid.data())
        .map(|(&v, &ok)| if ok { (v - stats.mu) / denom } else { v })
        .collect();

    let valid = valid.clone();
    let dims = x.dims().to_vec();
    let n = valid.count_valid() as f64;
    let var = tape.push_op(
        Tensor::from_op(dims.clone(), out),
        Box::new(move |gout| {
            // For valid pixels: y_i = (x_i - mu)/s with s = sigma + eps.
            //   dL/dx_j = g_j/s - G/(N s) - (x_j - mu) T / (N sigma s^2)
            // where G = sum g_i and T = sum g_i (x_i - mu); the sigma term
            // is dropped at sigma == 0 (constant input, subgradient 0).
            // Invalid pixels pass gradients through unchanged.
            let g = gout.data();
            let xv = x.data();
            let mut g_sum = 0.0;
            let mut t_sum = 0.0;
            for (px, &ok) in valid.data().iter().enumerate() {
                if ok {
                    g_sum += g[px];
                    t_sum += g[px] * (xv[px] - stats.mu);
                }
            }
            let grad = (0..g.len())
                .map(|px| {
                    if !valid.data()[px] {
                        return g[px];
                    }
                    let mut out = g[px] / denom - g_sum / (n * denom);
                    if stats.sigma > 0.0 {
                        out -= (xv[px] - stats.mu) * t_sum / (n * stats.sigma * denom * denom);
                    }
                    out
                })
                .collect();
            vec![(depth.0, Tensor::from_op(dims.clone(), grad))]
        }),
    );
    Ok((var, stats))
}

/// Half-mean-squared error over valid pixels:
/// `1/(2N) · Σ_valid (pred - target)²`, differentiable in `pred`.
fn masked_half_mse(tape: &Tape, pred: Var, target: &Tensor, valid: &ValidMask) -> Result<Var> {
    let p = tape.value(pred);
    if p.dims() != target.dims() {
        return Err(shape_err!(
            "depth loss dims mismatch: pred {:?} vs gt {:?}",
            p.dims(),
            target.dims()
        ));
    }
    check_map_dims(&p, valid, "depth loss")?;
    let n = valid.count_valid();
    if n == 0 {
        return Err(data_err!("depth loss needs at least one valid pixel"));
    }

    let mut acc = 0.0;
    for ((&pv, &tv), &ok) in p.data().iter().zip(target.data()).zip(valid.data()) {
        if ok {
            let d = pv - tv;
            acc += d * d;
        }
    }
    let value = acc / (2.0 * n as f64);

    let target = target.clone();
    let valid = valid.clone();
    Ok(tape.push_op(
        Tensor::from_op(vec![1], vec![value]),
        Box::new(move |gout| {
            let g = gout.data()[0];
            let grad = p
                .data()
                .iter()
                .zip(target.data())
                .zip(valid.data())
                .map(|((&pv, &tv), &ok)| if ok { g * (pv - tv) / n as f64 } else { 0.0 })
                .collect();
            vec![(pred.0, Tensor::from_op(p.dims().to_vec(), grad))]
        }),
    ))
}

/// Euclidean depth loss in linear space.
pub fn depth_linear_loss(tape: &Tape, pred: Var, gt: &Tensor, valid: &ValidMask) -> Result<Var> {
    masked_half_mse(tape, pred, gt, valid)
}

/// Euclidean depth loss between the mean-variance-normalized prediction
/// and ground truth, each standardized with its own per-map statistics.
pub fn depth_normalized_loss(
    tape: &Tape,
    pred: Var,
    gt: &Tensor,
    valid: &ValidMask,
    epsilon: f64,
) -> Result<Var> {
    let (norm_pred, _) = mean_variance_normalize_var(tape, pred, valid, epsilon)?;
    let (norm_gt, _) = mean_variance_normalize(gt, valid, epsilon)?;
    masked_half_mse(tape, norm_pred, &norm_gt, valid)
}

/// All three losses on one graph plus their hybrid combination
/// `l_h = alpha·l_s + (l_dl + l_dn)`. Returns the differentiable hybrid
/// scalar and the reported breakdown.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss(
    tape: &Tape,
    scores: Var,
    labels: &LabelMap,
    pred_depth: Var,
    gt_depth: &Tensor,
    valid: &ValidMask,
    alpha: f64,
    ignore_label: u32,
    reduction: Reduction,
) -> Result<(Var, LossBreakdown)> {
    let l_s = seg_cross_entropy(tape, scores, labels, ignore_label, reduction)?;
    let l_dl = depth_linear_loss(tape, pred_depth, gt_depth, valid)?;
    let l_dn = depth_normalized_loss(tape, pred_depth, gt_depth, valid, DEFAULT_NORM_EPSILON)?;
    let weighted = ops::scale(tape, l_s, alpha);
    let depth_sum = ops::add(tape, l_dl, l_dn)?;
    let l_h = ops::add(tape, weighted, depth_sum)?;
    let breakdown = LossBreakdown {
        l_s: tape.value(l_s).item()?,
        l_dl: tape.value(l_dl).item()?,
        l_dn: tape.value(l_dn).item()?,
        l_h: tape.value(l_h).item()?,
    };
    debug_assert_eq!(
        breakdown.l_h,
        hybrid_combine(alpha, breakdown.l_s, breakdown.l_dl, breakdown.l_dn)
    );
    Ok((l_h, breakdown))
}
