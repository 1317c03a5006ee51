//! Named finite-difference verification suites over the ops, the losses,
//! and the assembled model. These back the `gradcheck` command and the
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_sampled, ops, ops::ConvSpec, GradCheckResult, Tape, Var};
use crate::data::{synth_scene, GenConfig};
use crate::error::Result;
use crate::losses::{self, Reduction};
use crate::net::{HybridNet, ModelConfig};
use crate::params::ParamSet;
use crate::raster::{LabelMap, ValidMask};
use crate::tensor::Tensor;

/// Step used by every suite.
pub const EPSILON: f64 = 1e-4;
/// Per-op and per-loss worst-case bound.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Whole-model bound through the hybrid loss.
pub const MODEL_TOLERANCE: f64 = 1e-4;

pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub result: GradCheckResult,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.result.max_rel_err < self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>, scale: f64) -> Tensor {
    let numel = dims.iter().product();
    Tensor::from_op(dims, (0..numel).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Sum of squares: turns any tensor into a scalar whose gradient depends
/// on every element.
fn sq_norm(tape: &Tape, v: Var) -> Result<Var> {
    let sq = ops::mul(tape, v, v)?;
    Ok(ops::sum_all(tape, sq))
}

fn check_named(
    name: &'static str,
    tolerance: f64,
    params: &mut ParamSet,
    build: impl Fn(&ParamSet, &Tape) -> Result<Var>,
) -> Result<SuiteEntry> {
    let result = grad_check(params, EPSILON, build)?;
    Ok(SuiteEntry {
        name,
        tolerance,
        result,
    })
}

/// Finite-difference checks of every primitive, each on a small random
/// problem with all operands treated as parameters.
pub fn ops_suite() -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1405);
    let mut entries = Vec::new();

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 2, 5, 6], 1.0))?;
        ps.insert("weight", random_tensor(&mut rng, vec![3, 2, 3, 3], 0.5))?;
        ps.insert("bias", random_tensor(&mut rng, vec![3], 0.5))?;
        entries.push(check_named("conv2d pad1", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let w = tape.param(ps, "weight")?;
            let b = tape.param(ps, "bias")?;
            let y = ops::conv2d(tape, x, w, b, &ConvSpec::new(1, 1, 1)?)?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 1, 7, 7], 1.0))?;
        ps.insert("weight", random_tensor(&mut rng, vec![2, 1, 3, 3], 0.5))?;
        ps.insert("bias", random_tensor(&mut rng, vec![2], 0.5))?;
        entries.push(check_named("conv2d stride2", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let w = tape.param(ps, "weight")?;
            let b = tape.param(ps, "bias")?;
            let y = ops::conv2d(tape, x, w, b, &ConvSpec::new(2, 0, 1)?)?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 2, 8, 9], 1.0))?;
        ps.insert("weight", random_tensor(&mut rng, vec![2, 2, 3, 3], 0.5))?;
        ps.insert("bias", random_tensor(&mut rng, vec![2], 0.5))?;
        entries.push(check_named("conv2d dilated", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let w = tape.param(ps, "weight")?;
            let b = tape.param(ps, "bias")?;
            let y = ops::conv2d(tape, x, w, b, &ConvSpec::new(1, 2, 2)?)?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 2, 6, 6], 1.0))?;
        entries.push(check_named("max_pool2d", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let y = ops::max_pool2d(tape, x, 2, 2)?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 2, 3, 4], 1.0))?;
        entries.push(check_named("bilinear upsample", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let y = ops::bilinear_resize(tape, x, 7, 9)?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 1, 5, 7], 1.0))?;
        entries.push(check_named("bilinear downsample", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let y = ops::bilinear_resize(tape, x, 3, 3)?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![2, 5], 1.0))?;
        ps.insert("weight", random_tensor(&mut rng, vec![4, 5], 0.5))?;
        ps.insert("bias", random_tensor(&mut rng, vec![4], 0.5))?;
        entries.push(check_named("linear", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let w = tape.param(ps, "weight")?;
            let b = tape.param(ps, "bias")?;
            let y = ops::linear(tape, x, w, b)?;
            sq_norm(tape, y)
        })?);
    }

    {
        // keep values away from the kink at zero
        let mut ps = ParamSet::new();
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        ps.insert("input", Tensor::from_op(vec![12], data))?;
        entries.push(check_named("relu", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let y = ops::relu(tape, x);
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![12], 2.0))?;
        entries.push(check_named("softplus", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let y = ops::softplus(tape, x);
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("a", random_tensor(&mut rng, vec![1, 2, 4, 4], 1.0))?;
        ps.insert("b", random_tensor(&mut rng, vec![1, 3, 4, 4], 1.0))?;
        entries.push(check_named("concat_channels", OP_TOLERANCE, &mut ps, |ps, tape| {
            let a = tape.param(ps, "a")?;
            let b = tape.param(ps, "b")?;
            let y = ops::concat_channels(tape, &[a, b])?;
            sq_norm(tape, y)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("a", random_tensor(&mut rng, vec![3, 4], 1.0))?;
        ps.insert("b", random_tensor(&mut rng, vec![3, 4], 1.0))?;
        entries.push(check_named("elementwise mix", OP_TOLERANCE, &mut ps, |ps, tape| {
            let a = tape.param(ps, "a")?;
            let b = tape.param(ps, "b")?;
            let s = ops::add(tape, a, b)?;
            let d = ops::sub(tape, a, b)?;
            let p = ops::mul(tape, s, d)?;
            let r = ops::reshape(tape, p, vec![12])?;
            let scaled = ops::scale(tape, r, 0.75);
            sq_norm(tape, scaled)
        })?);
    }

    {
        // chain through several ops the way the network composes them
        let mut ps = ParamSet::new();
        ps.insert("input", random_tensor(&mut rng, vec![1, 2, 8, 8], 1.0))?;
        ps.insert("w0", random_tensor(&mut rng, vec![3, 2, 3, 3], 0.4))?;
        ps.insert("b0", random_tensor(&mut rng, vec![3], 0.2))?;
        ps.insert("w1", random_tensor(&mut rng, vec![1, 3, 3, 3], 0.4))?;
        ps.insert("b1", random_tensor(&mut rng, vec![1], 0.2))?;
        entries.push(check_named("conv relu pool resize chain", OP_TOLERANCE, &mut ps, |ps, tape| {
            let x = tape.param(ps, "input")?;
            let w0 = tape.param(ps, "w0")?;
            let b0 = tape.param(ps, "b0")?;
            let w1 = tape.param(ps, "w1")?;
            let b1 = tape.param(ps, "b1")?;
            let mut y = ops::conv2d(tape, x, w0, b0, &ConvSpec::new(1, 1, 1)?)?;
            y = ops::relu(tape, y);
            y = ops::max_pool2d(tape, y, 2, 2)?;
            y = ops::bilinear_resize(tape, y, 6, 6)?;
            y = ops::conv2d(tape, y, w1, b1, &ConvSpec::new(1, 1, 1)?)?;
            y = ops::softplus(tape, y);
            sq_norm(tape, y)
        })?);
    }

    Ok(entries)
}

/// Finite-difference checks of every loss, including ignore labels and
/// invalid depth pixels.
pub fn losses_suite() -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(10553);
    let mut entries = Vec::new();

    let (k, h, w) = (4usize, 5usize, 6usize);
    let labels = LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|i| if i % 7 == 0 { 255 } else { rng.gen_range(0..k as u32) })
            .collect(),
    )?;
    let scores0 = random_tensor(&mut rng, vec![k, h, w], 1.5);

    for (name, reduction) in [
        ("seg_cross_entropy mean", Reduction::Mean),
        ("seg_cross_entropy sum", Reduction::Sum),
    ] {
        let mut ps = ParamSet::new();
        ps.insert("scores", scores0.clone())?;
        let labels = labels.clone();
        entries.push(check_named(name, OP_TOLERANCE, &mut ps, move |ps, tape| {
            let s = tape.param(ps, "scores")?;
            losses::seg_cross_entropy(tape, s, &labels, 255, reduction)
        })?);
    }

    let valid = ValidMask::new(
        h,
        w,
        (0..h * w).map(|i| i % 5 != 0).collect(),
    )?;

    {
        let mut ps = ParamSet::new();
        ps.insert("depth", random_tensor(&mut rng, vec![1, h, w], 2.0).map(|v| v + 4.0))?;
        let valid = valid.clone();
        entries.push(check_named("mean_variance_normalize", OP_TOLERANCE, &mut ps, move |ps, tape| {
            let d = tape.param(ps, "depth")?;
            let (norm, _) = losses::mean_variance_normalize_var(tape, d, &valid, 1e-6)?;
            sq_norm(tape, norm)
        })?);
    }

    let gt = random_tensor(&mut rng, vec![1, h, w], 2.0).map(|v| v + 5.0);

    {
        let mut ps = ParamSet::new();
        ps.insert("pred", random_tensor(&mut rng, vec![1, h, w], 2.0).map(|v| v + 5.0))?;
        let (gt, valid) = (gt.clone(), valid.clone());
        entries.push(check_named("depth_linear_loss", OP_TOLERANCE, &mut ps, move |ps, tape| {
            let p = tape.param(ps, "pred")?;
            losses::depth_linear_loss(tape, p, &gt, &valid)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("pred", random_tensor(&mut rng, vec![1, h, w], 2.0).map(|v| v + 5.0))?;
        let (gt, valid) = (gt.clone(), valid.clone());
        entries.push(check_named("depth_normalized_loss", OP_TOLERANCE, &mut ps, move |ps, tape| {
            let p = tape.param(ps, "pred")?;
            losses::depth_normalized_loss(tape, p, &gt, &valid, 1e-6)
        })?);
    }

    {
        let mut ps = ParamSet::new();
        ps.insert("scores", scores0)?;
        ps.insert("pred", random_tensor(&mut rng, vec![1, h, w], 2.0).map(|v| v + 5.0))?;
        entries.push(check_named("hybrid_loss", OP_TOLERANCE, &mut ps, move |ps, tape| {
            let s = tape.param(ps, "scores")?;
            let p = tape.param(ps, "pred")?;
            let (l_h, _) = losses::hybrid_loss(
                tape,
                s,
                &labels,
                p,
                &gt,
                &valid,
                1000.0,
                255,
                Reduction::Mean,
            )?;
            Ok(l_h)
        })?);
    }

    Ok(entries)
}

/// The compact model used for the exhaustive whole-model check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        input_h: 32,
        input_w: 64,
        num_classes: 3,
        feature_channels: vec![3, 4, 6],
        aspp_rates: vec![1, 2],
        aspp_channels: 6,
        global_channels: vec![3, 4, 6, 6],
        global_fc_dim: 8,
        refine_channels: 6,
        seed: 21,
    }
}

fn model_scene(num_classes: usize, seed: u64) -> Result<crate::data::SceneSample> {
    synth_scene(&GenConfig {
        h: 32,
        w: 64,
        num_classes,
        objects_min: 2,
        objects_max: 3,
        grid_snap: 8,
        ignore_border: 2,
        seed,
        ..GenConfig::default()
    })
}

fn model_loss_builder<'a>(
    net: &'a HybridNet,
    sample: &crate::data::SceneSample,
) -> impl Fn(&ParamSet, &Tape) -> Result<Var> + 'a {
    let sample = sample.clone();
    move |ps: &ParamSet, tape: &Tape| {
        let out = net.hybrid_forward_vars(tape, ps, &sample.rgb)?;
        let valid = ValidMask::from_depth_gt(&sample.depth_gt)?;
        let (l_h, _) = losses::hybrid_loss(
            tape,
            out.class_scores,
            &sample.labels_gt,
            out.depth,
            &sample.depth_gt,
            &valid,
            1000.0,
            255,
            Reduction::Mean,
        )?;
        Ok(l_h)
    }
}

/// Whole-model checks through the hybrid loss on 32×64 inputs: an
/// exhaustive element sweep of a compact model, plus a seeded sample of
/// elements on the default-width model (whose half-million elementwise
/// evaluations would not fit any reasonable runtime budget).
pub fn model_suite() -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();

    {
        let net = HybridNet::new(gradcheck_model_config())?;
        let mut params = net.init_params()?;
        let sample = model_scene(net.config().num_classes, 101)?;
        let result = grad_check(&mut params, EPSILON, model_loss_builder(&net, &sample))?;
        entries.push(SuiteEntry {
            name: "hybrid model, compact widths, every element",
            tolerance: MODEL_TOLERANCE,
            result,
        });
    }

    {
        let cfg = ModelConfig {
            input_h: 32,
            input_w: 64,
            seed: 22,
            ..ModelConfig::default()
        };
        let net = HybridNet::new(cfg)?;
        let mut params = net.init_params()?;
        let sample = model_scene(net.config().num_classes, 102)?;
        let result = grad_check_sampled(&mut params, EPSILON, 3, 202, model_loss_builder(&net, &sample))?;
        entries.push(SuiteEntry {
            name: "hybrid model, default widths, sampled elements",
            tolerance: MODEL_TOLERANCE,
            result,
        });
    }

    Ok(entries)
}
