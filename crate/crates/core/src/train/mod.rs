//! Staged training: SGD with momentum and weight decay over the stage's
//! parameter groups, deterministic sample ordering, and loss logging.

mod checkpoint;
mod eval;

pub use checkpoint::{load_checkpoint, merge_checkpoints, save_checkpoint, Checkpoint};
pub use eval::{evaluate, evaluate_oracle, predicted_labels, EvalReports};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tape};
use crate::data::SceneSample;
use crate::error::{config_err, Result};
use crate::losses::{self, LossBreakdown, Reduction};
use crate::net::{HybridNet, ASPP_PREFIX, DEPTH_PREFIXES, FEATURES_PREFIX};
use crate::params::ParamSet;
use crate::raster::ValidMask;
use crate::tensor::Tensor;

/// Which protocol stage is running, i.e. which loss is optimized and
/// which parameter groups move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// `L_DL + L_DN`; updates trunk + global + refinement.
    Depth,
    /// `L_S`; updates trunk + pyramid head.
    Seg,
    /// `L_H = α·L_S + (L_DL + L_DN)`; updates everything.
    Hybrid,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Depth => "depth",
            Stage::Seg => "seg",
            Stage::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "depth" => Ok(Stage::Depth),
            "seg" => Ok(Stage::Seg),
            "hybrid" => Ok(Stage::Hybrid),
            other => Err(config_err!("unknown stage {other:?} (expected depth|seg|hybrid)")),
        }
    }

    /// Parameter-name prefixes this stage is allowed to update.
    fn updated_prefixes(&self) -> Vec<&'static str> {
        match self {
            Stage::Depth => {
                let mut v = vec![FEATURES_PREFIX];
                v.extend(DEPTH_PREFIXES);
                v
            }
            Stage::Seg => vec![FEATURES_PREFIX, ASPP_PREFIX],
            Stage::Hybrid => vec![FEATURES_PREFIX, ASPP_PREFIX, DEPTH_PREFIXES[0], DEPTH_PREFIXES[1]],
        }
    }

    pub fn updates_param(&self, name: &str) -> bool {
        self.updated_prefixes().iter().any(|p| name.starts_with(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Loss balance between the segmentation and depth terms.
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    pub seed: u64,
    pub stage: Stage,
    pub reduction: Reduction,
    pub log_every: u64,
    pub ignore_label: u32,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            alpha: 1000.0,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 500,
            seed: 0,
            stage: Stage::Hybrid,
            reduction: Reduction::Mean,
            log_every: 50,
            ignore_label: 255,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(config_err!("alpha must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err!("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err!("weight_decay must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(config_err!("iterations must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(config_err!("log_every must be >= 1"));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers of SGD with momentum.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> SgdState {
        SgdState::default()
    }
}

/// One optimizer step over the parameters selected by `stage`:
/// `v ← momentum·v + grad + weight_decay·w`, then `w ← w − lr·v`.
/// All gradients are reset to zero afterwards.
pub fn sgd_step(
    params: &mut ParamSet,
    state: &mut SgdState,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<()> {
    let names: Vec<String> = params
        .names()
        .filter(|n| stage.updates_param(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let param = params.get(&name)?;
        let dims = param.value.dims().to_vec();
        let numel = param.value.numel();
        let velocity = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; numel]);
        let mut next = param.value.data().to_vec();
        let grad = param.grad.data();
        for i in 0..numel {
            velocity[i] =
                cfg.momentum * velocity[i] + grad[i] + cfg.weight_decay * next[i];
            next[i] -= cfg.lr * velocity[i];
        }
        params.set_value(&name, Tensor::new(dims, next)?)?;
    }
    params.zero_grads();
    Ok(())
}

/// One logged step of a training run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: u64,
    pub loss: LossBreakdown,
}

/// The loss-log line format; stable so logs can be parsed back.
pub fn format_log_line(entry: &LogEntry) -> String {
    format!(
        "iter {} l_s {} l_dl {} l_dn {} l_h {}",
        entry.iter, entry.loss.l_s, entry.loss.l_dl, entry.loss.l_dn, entry.loss.l_h
    )
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Runs one stage over the dataset: samples cycle in a seeded shuffled
/// order (reshuffled each epoch), every iteration performs exactly one
/// forward/backward/SGD step, and the loss breakdown is logged at the
/// first iteration, every `log_every`-th, and the last.
pub fn train_stage(
    net: &HybridNet,
    params: &mut ParamSet,
    dataset: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(config_err!("training needs a non-empty dataset"));
    }
    for sample in dataset {
        sample.validate(net.config().num_classes, cfg.ignore_label)?;
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::new();
    let mut log = Vec::new();

    for iter in 1..=cfg.iterations {
        let pos = ((iter - 1) % dataset.len() as u64) as usize;
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let sample = &dataset[order[pos]];

        let tape = Tape::new();
        let breakdown = match cfg.stage {
            Stage::Hybrid => {
                let out = net.hybrid_forward_vars(&tape, params, &sample.rgb)?;
                let valid = ValidMask::from_depth_gt(&sample.depth_gt)?;
                let (l_h, breakdown) = losses::hybrid_loss(
                    &tape,
                    out.class_scores,
                    &sample.labels_gt,
                    out.depth,
                    &sample.depth_gt,
                    &valid,
                    cfg.alpha,
                    cfg.ignore_label,
                    cfg.reduction,
                )?;
                tape.backward(l_h, params)?;
                breakdown
            }
            Stage::Depth => {
                let (h, w) = (sample.height(), sample.width());
                let image = tape.leaf(sample.rgb.reshaped(vec![1, 3, h, w])?);
                let features = net.features_forward(&tape, params, image)?;
                let coarse = net.global_depth_forward(&tape, params, image)?;
                let depth4 = net.refine_depth_forward(&tape, params, image, features, coarse)?;
                let depth = ops::reshape(&tape, depth4, vec![1, h, w])?;
                let valid = ValidMask::from_depth_gt(&sample.depth_gt)?;
                let l_dl = losses::depth_linear_loss(&tape, depth, &sample.depth_gt, &valid)?;
                let l_dn = losses::depth_normalized_loss(
                    &tape,
                    depth,
                    &sample.depth_gt,
                    &valid,
                    losses::DEFAULT_NORM_EPSILON,
                )?;
                let total = ops::add(&tape, l_dl, l_dn)?;
                tape.backward(total, params)?;
                let (l_dl, l_dn) = (tape.value(l_dl).item()?, tape.value(l_dn).item()?);
                LossBreakdown {
                    l_s: 0.0,
                    l_dl,
                    l_dn,
                    l_h: losses::hybrid_combine(cfg.alpha, 0.0, l_dl, l_dn),
                }
            }
            Stage::Seg => {
                let (h, w) = (sample.height(), sample.width());
                let image = tape.leaf(sample.rgb.reshaped(vec![1, 3, h, w])?);
                let features = net.features_forward(&tape, params, image)?;
                let scores4 = net.aspp_forward(&tape, params, features)?;
                let k = net.config().num_classes;
                let scores = ops::reshape(&tape, scores4, vec![k, h, w])?;
                let l_s = losses::seg_cross_entropy(
                    &tape,
                    scores,
                    &sample.labels_gt,
                    cfg.ignore_label,
                    cfg.reduction,
                )?;
                tape.backward(l_s, params)?;
                let l_s = tape.value(l_s).item()?;
                LossBreakdown {
                    l_s,
                    l_dl: 0.0,
                    l_dn: 0.0,
                    l_h: losses::hybrid_combine(cfg.alpha, l_s, 0.0, 0.0),
                }
            }
        };

        sgd_step(params, &mut state, cfg, cfg.stage)?;

        if iter == 1 || iter % cfg.log_every == 0 || iter == cfg.iterations {
            if log.last().map(|e: &LogEntry| e.iter) != Some(iter) {
                log.push(LogEntry {
                    iter,
                    loss: breakdown,
                });
            }
        }
    }

    let checkpoint = Checkpoint::from_params(
        net.config().clone(),
        cfg.iterations,
        cfg.stage,
        params,
    );
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, GenConfig};
    use crate::net::ModelConfig;

    fn lean_model() -> (HybridNet, ParamSet) {
        let cfg = ModelConfig {
            input_h: 32,
            input_w: 32,
            num_classes: 3,
            feature_channels: vec![4, 6, 6],
            aspp_rates: vec![1, 2],
            aspp_channels: 4,
            global_channels: vec![4, 4, 6, 6],
            global_fc_dim: 8,
            refine_channels: 6,
            seed: 3,
        };
        let net = HybridNet::new(cfg).unwrap();
        let params = net.init_params().unwrap();
        (net, params)
    }

    fn tiny_dataset(n: u64) -> Vec<SceneSample> {
        (0..n)
            .map(|seed| {
                synth_scene(&GenConfig {
                    h: 32,
                    w: 32,
                    num_classes: 3,
                    objects_min: 1,
                    objects_max: 2,
                    grid_snap: 8,
                    seed,
                    ..GenConfig::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn sgd_plain_step() {
        let mut ps = ParamSet::new();
        ps.insert("features.w", Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        ps.accumulate_grad("features.w", &Tensor::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new();
        sgd_step(&mut ps, &mut state, &cfg, Stage::Hybrid).unwrap();
        assert!((ps.get("features.w").unwrap().value.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(ps.get("features.w").unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn sgd_momentum_two_steps_hand_iterated() {
        // v1 = 1 -> w = -0.1; v2 = 0.9 + 1 = 1.9 -> w = -0.29
        let mut ps = ParamSet::new();
        ps.insert("features.w", Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new();
        for _ in 0..2 {
            ps.accumulate_grad("features.w", &Tensor::new(vec![1], vec![1.0]).unwrap())
                .unwrap();
            sgd_step(&mut ps, &mut state, &cfg, Stage::Hybrid).unwrap();
        }
        assert!((ps.get("features.w").unwrap().value.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut ps = ParamSet::new();
        ps.insert("features.w", Tensor::new(vec![1], vec![2.0]).unwrap())
            .unwrap();
        ps.accumulate_grad("features.w", &Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        // lr = 0 is rejected by validate; emulate by taking the update rule
        // directly with lr approaching zero is pointless — instead check
        // the validation contract.
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_filters_parameter_groups() {
        assert!(Stage::Depth.updates_param("features.block0.conv0.weight"));
        assert!(Stage::Depth.updates_param("global.fc0.weight"));
        assert!(Stage::Depth.updates_param("refine.conv1.bias"));
        assert!(!Stage::Depth.updates_param("aspp.branch0.dilated.weight"));
        assert!(Stage::Seg.updates_param("aspp.branch0.dilated.weight"));
        assert!(!Stage::Seg.updates_param("global.fc0.weight"));
        assert!(Stage::Hybrid.updates_param("global.fc0.weight"));
        assert!(Stage::Hybrid.updates_param("aspp.branch0.project.bias"));
    }

    #[test]
    fn zero_iterations_rejected_one_iteration_steps_once() {
        let (net, mut params) = lean_model();
        let data = tiny_dataset(2);
        let bad = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(train_stage(&net, &mut params, &data, &bad).is_err());

        let initial = params.clone();
        let cfg = TrainConfig {
            iterations: 1,
            lr: 0.01,
            weight_decay: 0.0,
            stage: Stage::Hybrid,
            ..TrainConfig::default()
        };
        let outcome = train_stage(&net, &mut params, &data, &cfg).unwrap();
        assert_eq!(outcome.log.len(), 1);
        assert!(!params.bitwise_eq(&initial), "one step must move parameters");
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let (net, mut params) = lean_model();
        let cfg = TrainConfig::default();
        assert!(train_stage(&net, &mut params, &[], &cfg).is_err());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (net, params0) = lean_model();
        let data = tiny_dataset(3);
        let cfg = TrainConfig {
            iterations: 5,
            lr: 0.01,
            stage: Stage::Hybrid,
            ..TrainConfig::default()
        };
        let mut a = params0.clone();
        let mut b = params0;
        train_stage(&net, &mut a, &data, &cfg).unwrap();
        train_stage(&net, &mut b, &data, &cfg).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn stage_isolation_depth_leaves_aspp_untouched() {
        let (net, mut params) = lean_model();
        let initial = params.clone();
        let data = tiny_dataset(2);
        let cfg = TrainConfig {
            iterations: 3,
            lr: 0.01,
            stage: Stage::Depth,
            ..TrainConfig::default()
        };
        train_stage(&net, &mut params, &data, &cfg).unwrap();
        for p in params.iter() {
            let before = initial.get(&p.name).unwrap();
            if p.name.starts_with("aspp.") {
                assert!(p.value.bitwise_eq(&before.value), "{} moved in depth stage", p.name);
            }
        }
        // and the depth path did move
        assert!(!params
            .get("global.fc0.weight")
            .unwrap()
            .value
            .bitwise_eq(&initial.get("global.fc0.weight").unwrap().value));
    }

    #[test]
    fn stage_isolation_seg_leaves_depth_path_untouched() {
        let (net, mut params) = lean_model();
        let initial = params.clone();
        let data = tiny_dataset(2);
        let cfg = TrainConfig {
            iterations: 3,
            lr: 0.01,
            stage: Stage::Seg,
            ..TrainConfig::default()
        };
        train_stage(&net, &mut params, &data, &cfg).unwrap();
        for p in params.iter() {
            let before = initial.get(&p.name).unwrap();
            if p.name.starts_with("global.") || p.name.starts_with("refine.") {
                assert!(p.value.bitwise_eq(&before.value), "{} moved in seg stage", p.name);
            }
        }
        assert!(!params
            .get("aspp.branch0.dilated.weight")
            .unwrap()
            .value
            .bitwise_eq(&initial.get("aspp.branch0.dilated.weight").unwrap().value));
    }

    #[test]
    fn hybrid_stage_moves_the_shared_trunk() {
        let (net, mut params) = lean_model();
        let initial = params.clone();
        let data = tiny_dataset(2);
        let cfg = TrainConfig {
            iterations: 2,
            lr: 0.01,
            stage: Stage::Hybrid,
            ..TrainConfig::default()
        };
        train_stage(&net, &mut params, &data, &cfg).unwrap();
        assert!(!params
            .get("features.block0.conv0.weight")
            .unwrap()
            .value
            .bitwise_eq(&initial.get("features.block0.conv0.weight").unwrap().value));
    }

    #[test]
    fn log_line_format_is_stable() {
        let entry = LogEntry {
            iter: 42,
            loss: LossBreakdown {
                l_s: 0.5,
                l_dl: 1.0,
                l_dn: 2.0,
                l_h: 503.0,
            },
        };
        assert_eq!(format_log_line(&entry), "iter 42 l_s 0.5 l_dl 1 l_dn 2 l_h 503");
    }
}
