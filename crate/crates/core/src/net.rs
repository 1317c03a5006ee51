//! The HybridNet blocks: a shared VGG-style features trunk, a coarse
//! global depth predictor with a fully connected stage, a full-resolution
//! depth refinement block, and an atrous-pyramid segmentation head.
//!
//! The features trunk is the only component whose parameters both task
//! paths consume; the depth path never touches the pyramid head's
//! parameters and vice versa.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, ops::ConvSpec, Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Topology and initialization settings.
///
/// Every width and rate is configurable; the defaults give the small
/// CPU-trainable reference model. `feature_channels` has one entry per
/// trunk block (two 3×3 convs then a 2×2 pool), `global_channels` one
/// entry per conv+pool stage of the coarse tower.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
    pub feature_channels: Vec<usize>,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub global_channels: Vec<usize>,
    pub global_fc_dim: usize,
    pub refine_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            input_h: 64,
            input_w: 128,
            num_classes: 5,
            feature_channels: vec![16, 32, 64],
            aspp_rates: vec![1, 2, 4],
            aspp_channels: 32,
            global_channels: vec![8, 16, 32, 64],
            global_fc_dim: 128,
            refine_channels: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Downsampling factor of the features trunk (2 per block).
    pub fn feature_stride(&self) -> usize {
        1 << self.feature_channels.len()
    }

    /// Downsampling factor of the global tower (2 per stage).
    pub fn global_stride(&self) -> usize {
        1 << self.global_channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.feature_channels.is_empty() || self.feature_channels.contains(&0) {
            return Err(config_err!("feature_channels must be non-empty positive widths"));
        }
        if self.global_channels.is_empty() || self.global_channels.contains(&0) {
            return Err(config_err!("global_channels must be non-empty positive widths"));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(config_err!("aspp_rates must be non-empty rates >= 1"));
        }
        if self.aspp_channels == 0 || self.global_fc_dim == 0 || self.refine_channels == 0 {
            return Err(config_err!("layer widths must be positive"));
        }
        let stride = self.feature_stride().max(self.global_stride());
        if self.input_h == 0 || self.input_w == 0 {
            return Err(config_err!("input size must be positive"));
        }
        if self.input_h % stride != 0 || self.input_w % stride != 0 {
            return Err(config_err!(
                "input {}×{} must be divisible by {stride} (trunk stride {}, global stride {})",
                self.input_h,
                self.input_w,
                self.feature_stride(),
                self.global_stride()
            ));
        }
        Ok(())
    }
}

/// One forward pass worth of outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct HybridOutput {
    /// `1×H×W`, strictly positive.
    pub depth: Tensor,
    /// `K×H×W` raw logits.
    pub class_scores: Tensor,
}

/// Tape handles of one forward pass, for building losses on top.
#[derive(Clone, Copy, Debug)]
pub struct HybridVars {
    /// `1×H×W`.
    pub depth: Var,
    /// `K×H×W`.
    pub class_scores: Var,
}

pub struct HybridNet {
    cfg: ModelConfig,
}

impl HybridNet {
    pub fn new(cfg: ModelConfig) -> Result<HybridNet> {
        cfg.validate()?;
        Ok(HybridNet { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Coarse map extent: the input downsampled by the trunk stride.
    pub fn coarse_hw(&self) -> (usize, usize) {
        (
            self.cfg.input_h / self.cfg.feature_stride(),
            self.cfg.input_w / self.cfg.feature_stride(),
        )
    }

    /// Draws all weights from a fan-in-scaled normal distribution
    /// (std = sqrt(2/fan_in)) with zero biases, deterministically from
    /// `config.seed`.
    pub fn init_params(&self) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut params = ParamSet::new();
        for layer in self.layers() {
            let fan_in = layer.fan_in();
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std)
                .map_err(|e| config_err!("invalid init distribution: {e}"))?;
            let numel: usize = layer.weight_dims.iter().product();
            let weight: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
            params.insert(&format!("{}.weight", layer.name), Tensor::new(layer.weight_dims.clone(), weight)?)?;
            params.insert(&format!("{}.bias", layer.name), Tensor::zeros(vec![layer.bias_len]))?;
        }
        Ok(params)
    }

    /// Total learnable scalars, straight from the layer table.
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight_dims.iter().product::<usize>() + l.bias_len)
            .sum()
    }

    /// The layer table in registration order; the single source of truth
    /// for parameter names and shapes.
    fn layers(&self) -> Vec<LayerDecl> {
        let cfg = &self.cfg;
        let mut layers = Vec::new();

        let mut in_c = 3;
        for (block, &out_c) in cfg.feature_channels.iter().enumerate() {
            layers.push(LayerDecl::conv(format!("features.block{block}.conv0"), out_c, in_c, 3));
            layers.push(LayerDecl::conv(format!("features.block{block}.conv1"), out_c, out_c, 3));
            in_c = out_c;
        }

        let mut in_c = 3;
        for (stage, &out_c) in cfg.global_channels.iter().enumerate() {
            layers.push(LayerDecl::conv(format!("global.conv{stage}"), out_c, in_c, 3));
            in_c = out_c;
        }
        let gs = cfg.global_stride();
        let flat = in_c * (cfg.input_h / gs) * (cfg.input_w / gs);
        let (ch, cw) = (
            cfg.input_h / cfg.feature_stride(),
            cfg.input_w / cfg.feature_stride(),
        );
        layers.push(LayerDecl::fc("global.fc0".into(), cfg.global_fc_dim, flat));
        layers.push(LayerDecl::fc("global.fc1".into(), ch * cw, cfg.global_fc_dim));

        let fused = 3 + cfg.feature_dim() + 1;
        layers.push(LayerDecl::conv("refine.conv0".into(), cfg.refine_channels, fused, 3));
        layers.push(LayerDecl::conv(
            "refine.conv1".into(),
            cfg.refine_channels,
            cfg.refine_channels,
            3,
        ));
        layers.push(LayerDecl::conv("refine.conv2".into(), 1, cfg.refine_channels, 3));

        for (branch, _) in cfg.aspp_rates.iter().enumerate() {
            layers.push(LayerDecl::conv(
                format!("aspp.branch{branch}.dilated"),
                cfg.aspp_channels,
                cfg.feature_dim(),
                3,
            ));
            layers.push(LayerDecl::conv(
                format!("aspp.branch{branch}.project"),
                cfg.num_classes,
                cfg.aspp_channels,
                1,
            ));
        }

        layers
    }

    fn conv_block(
        &self,
        tape: &Tape,
        params: &ParamSet,
        x: Var,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Var> {
        let w = tape.param(params, &format!("{name}.weight"))?;
        let b = tape.param(params, &format!("{name}.bias"))?;
        ops::conv2d(tape, x, w, b, &spec)
    }

    /// Shared trunk: per block two padded 3×3 convs with relu, then a 2×2
    /// max pool. Expects `1×3×H×W`, returns `1×C_f×(H/s)×(W/s)`.
    pub fn features_forward(&self, tape: &Tape, params: &ParamSet, image: Var) -> Result<Var> {
        let dims = tape.dims(image);
        self.check_image(&dims, self.cfg.feature_stride())?;
        let mut x = image;
        for block in 0..self.cfg.feature_channels.len() {
            for conv in 0..2 {
                x = self.conv_block(
                    tape,
                    params,
                    x,
                    &format!("features.block{block}.conv{conv}"),
                    ConvSpec::with_dilation(1, 1),
                )?;
                x = ops::relu(tape, x);
            }
            x = ops::max_pool2d(tape, x, 2, 2)?;
        }
        Ok(x)
    }

    /// Coarse depth path: conv/pool tower to the global stride, then two
    /// fully connected layers giving a whole-image receptive field, shaped
    /// back into a `1×1×(H/s)×(W/s)` map (unbounded values; the output
    /// activation lives in the refinement block).
    pub fn global_depth_forward(&self, tape: &Tape, params: &ParamSet, image: Var) -> Result<Var> {
        let dims = tape.dims(image);
        self.check_image(&dims, self.cfg.global_stride())?;
        if dims[2] != self.cfg.input_h || dims[3] != self.cfg.input_w {
            return Err(shape_err!(
                "global depth tower is sized for {}×{} inputs, got {}×{}",
                self.cfg.input_h,
                self.cfg.input_w,
                dims[2],
                dims[3]
            ));
        }
        let mut x = image;
        for stage in 0..self.cfg.global_channels.len() {
            x = self.conv_block(
                tape,
                params,
                x,
                &format!("global.conv{stage}"),
                ConvSpec::with_dilation(1, 1),
            )?;
            x = ops::relu(tape, x);
            x = ops::max_pool2d(tape, x, 2, 2)?;
        }
        let flat: usize = tape.dims(x).iter().product();
        x = ops::reshape(tape, x, vec![1, flat])?;
        let w0 = tape.param(params, "global.fc0.weight")?;
        let b0 = tape.param(params, "global.fc0.bias")?;
        x = ops::linear(tape, x, w0, b0)?;
        x = ops::relu(tape, x);
        let w1 = tape.param(params, "global.fc1.weight")?;
        let b1 = tape.param(params, "global.fc1.bias")?;
        x = ops::linear(tape, x, w1, b1)?;
        let (ch, cw) = self.coarse_hw();
        ops::reshape(tape, x, vec![1, 1, ch, cw])
    }

    /// Fuses image, upsampled trunk features and upsampled coarse depth,
    /// then refines through three 3×3 convs into a strictly positive
    /// full-resolution depth map (`1×1×H×W`).
    pub fn refine_depth_forward(
        &self,
        tape: &Tape,
        params: &ParamSet,
        image: Var,
        features: Var,
        coarse: Var,
    ) -> Result<Var> {
        let idims = tape.dims(image);
        self.check_image(&idims, 1)?;
        let (h, w) = (idims[2], idims[3]);
        let fdims = tape.dims(features);
        let cdims = tape.dims(coarse);
        if fdims.len() != 4 || cdims.len() != 4 || cdims[1] != 1 {
            return Err(shape_err!(
                "refinement inputs must be 4-d with a single coarse channel; got features {:?}, coarse {:?}",
                fdims,
                cdims
            ));
        }
        if fdims[2] != cdims[2] || fdims[3] != cdims[3] {
            return Err(shape_err!(
                "features {:?} and coarse map {:?} disagree spatially",
                fdims,
                cdims
            ));
        }
        if fdims[1] != self.cfg.feature_dim() {
            return Err(shape_err!(
                "features have {} channels, config expects {}",
                fdims[1],
                self.cfg.feature_dim()
            ));
        }

        let f_up = ops::bilinear_resize(tape, features, h, w)?;
        let c_up = ops::bilinear_resize(tape, coarse, h, w)?;
        let mut x = ops::concat_channels(tape, &[image, f_up, c_up])?;
        for conv in 0..2 {
            x = self.conv_block(
                tape,
                params,
                x,
                &format!("refine.conv{conv}"),
                ConvSpec::with_dilation(1, 1),
            )?;
            x = ops::relu(tape, x);
        }
        x = self.conv_block(tape, params, x, "refine.conv2", ConvSpec::with_dilation(1, 1))?;
        Ok(ops::softplus(tape, x))
    }

    /// Pyramid head: per rate a shape-preserving dilated 3×3 conv with
    /// relu and a 1×1 projection to class scores; branch outputs are
    /// summed and bilinearly upsampled back to input resolution
    /// (`1×K×(s·h)×(s·w)`).
    pub fn aspp_forward(&self, tape: &Tape, params: &ParamSet, features: Var) -> Result<Var> {
        let fdims = tape.dims(features);
        if fdims.len() != 4 || fdims[1] != self.cfg.feature_dim() {
            return Err(shape_err!(
                "aspp expects 1×{}×h×w features, got {:?}",
                self.cfg.feature_dim(),
                fdims
            ));
        }
        let mut acc: Option<Var> = None;
        for (branch, &rate) in self.cfg.aspp_rates.iter().enumerate() {
            let mut x = self.conv_block(
                tape,
                params,
                features,
                &format!("aspp.branch{branch}.dilated"),
                ConvSpec::with_dilation(rate, rate),
            )?;
            x = ops::relu(tape, x);
            x = self.conv_block(
                tape,
                params,
                x,
                &format!("aspp.branch{branch}.project"),
                ConvSpec::with_dilation(0, 1),
            )?;
            acc = Some(match acc {
                Some(prev) => ops::add(tape, prev, x)?,
                None => x,
            });
        }
        let summed = acc.expect("validated non-empty aspp_rates");
        let stride = self.cfg.feature_stride();
        ops::bilinear_resize(tape, summed, fdims[2] * stride, fdims[3] * stride)
    }

    /// Full forward pass on an existing tape. The trunk runs once and its
    /// output feeds both the refinement and the segmentation head.
    pub fn hybrid_forward_vars(
        &self,
        tape: &Tape,
        params: &ParamSet,
        image: &Tensor,
    ) -> Result<HybridVars> {
        let (h, w) = self.image_hw(image)?;
        if h != self.cfg.input_h || w != self.cfg.input_w {
            return Err(shape_err!(
                "model is configured for {}×{} inputs, got {h}×{w}",
                self.cfg.input_h,
                self.cfg.input_w
            ));
        }
        let image = tape.leaf(image.reshaped(vec![1, 3, h, w])?);
        let features = self.features_forward(tape, params, image)?;
        let coarse = self.global_depth_forward(tape, params, image)?;
        let depth4 = self.refine_depth_forward(tape, params, image, features, coarse)?;
        let scores4 = self.aspp_forward(tape, params, features)?;
        let depth = ops::reshape(tape, depth4, vec![1, h, w])?;
        let class_scores = ops::reshape(tape, scores4, vec![self.cfg.num_classes, h, w])?;
        Ok(HybridVars {
            depth,
            class_scores,
        })
    }

    /// Inference entry point: runs a throwaway tape and returns plain
    /// tensors.
    pub fn hybrid_forward(&self, params: &ParamSet, image: &Tensor) -> Result<HybridOutput> {
        let tape = Tape::new();
        let vars = self.hybrid_forward_vars(&tape, params, image)?;
        Ok(HybridOutput {
            depth: tape.value(vars.depth),
            class_scores: tape.value(vars.class_scores),
        })
    }

    fn image_hw(&self, image: &Tensor) -> Result<(usize, usize)> {
        match image.dims() {
            [3, h, w] => Ok((*h, *w)),
            other => Err(shape_err!("expected a 3×H×W image, got {:?}", other)),
        }
    }

    fn check_image(&self, dims: &[usize], stride: usize) -> Result<()> {
        if dims.len() != 4 || dims[0] != 1 || dims[1] != 3 {
            return Err(shape_err!("expected a 1×3×H×W image var, got {:?}", dims));
        }
        if dims[2] % stride != 0 || dims[3] % stride != 0 {
            return Err(shape_err!(
                "image {}×{} not divisible by stride {stride}",
                dims[2],
                dims[3]
            ));
        }
        Ok(())
    }
}

struct LayerDecl {
    name: String,
    weight_dims: Vec<usize>,
    bias_len: usize,
}

impl LayerDecl {
    fn conv(name: String, out_c: usize, in_c: usize, k: usize) -> LayerDecl {
        LayerDecl {
            name,
            weight_dims: vec![out_c, in_c, k, k],
            bias_len: out_c,
        }
    }

    fn fc(name: String, out_dim: usize, in_dim: usize) -> LayerDecl {
        LayerDecl {
            name,
            weight_dims: vec![out_dim, in_dim],
            bias_len: out_dim,
        }
    }

    fn fan_in(&self) -> usize {
        self.weight_dims[1..].iter().product()
    }
}

/// Parameter-name prefixes of the shared trunk.
pub const FEATURES_PREFIX: &str = "features.";
/// Prefixes of the two depth-only blocks.
pub const DEPTH_PREFIXES: [&str; 2] = ["global.", "refine."];
/// Prefix of the segmentation head.
pub const ASPP_PREFIX: &str = "aspp.";

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_h: 32,
            input_w: 64,
            num_classes: 3,
            feature_channels: vec![4, 6, 8],
            aspp_rates: vec![1, 2],
            aspp_channels: 6,
            global_channels: vec![4, 6, 6, 8],
            global_fc_dim: 16,
            refine_channels: 8,
            seed: 7,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.input_h = 60; // not divisible by 16
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.aspp_rates = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let net = HybridNet::new(tiny_config()).unwrap();
        let a = net.init_params().unwrap();
        let b = net.init_params().unwrap();
        assert!(a.bitwise_eq(&b));
        for p in a.iter() {
            if p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn different_seeds_give_different_weights() {
        let mut cfg = tiny_config();
        let net_a = HybridNet::new(cfg.clone()).unwrap();
        cfg.seed = 8;
        let net_b = HybridNet::new(cfg).unwrap();
        assert!(!net_a.init_params().unwrap().bitwise_eq(&net_b.init_params().unwrap()));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_config();
        let net = HybridNet::new(cfg.clone()).unwrap();
        let params = net.init_params().unwrap();

        // Hand-computed from the declared topology.
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let mut expect = 0usize;
        // trunk: two convs per block
        expect += conv(4, 3, 3) + conv(4, 4, 3);
        expect += conv(6, 4, 3) + conv(6, 6, 3);
        expect += conv(8, 6, 3) + conv(8, 8, 3);
        // global tower: stride 16 -> 2×4 spatial at 8 channels
        expect += conv(4, 3, 3) + conv(6, 4, 3) + conv(6, 6, 3) + conv(8, 6, 3);
        expect += 16 * (8 * 2 * 4) + 16; // fc0
        expect += (4 * 8) * 16 + 4 * 8; // fc1 to the 4×8 coarse map
        // refinement: 3 + 8 + 1 = 12 input channels
        expect += conv(8, 12, 3) + conv(8, 8, 3) + conv(1, 8, 3);
        // aspp: two branches
        expect += 2 * (conv(6, 8, 3) + conv(3, 6, 1));

        assert_eq!(net.param_count(), expect);
        assert_eq!(params.numel(), expect);
    }

    #[test]
    fn features_shape_contract() {
        let net = HybridNet::new(ModelConfig::default()).unwrap();
        let params = net.init_params().unwrap();
        let tape = Tape::new();
        let image = tape.leaf(random_image(64, 128, 1).reshaped(vec![1, 3, 64, 128]).unwrap());
        let feats = net.features_forward(&tape, &params, image).unwrap();
        assert_eq!(tape.dims(feats), &[1, 64, 8, 16]);
    }

    #[test]
    fn features_are_deterministic_and_non_degenerate() {
        let net = HybridNet::new(tiny_config()).unwrap();
        let params = net.init_params().unwrap();
        let img_a = random_image(32, 64, 2);
        let img_b = random_image(32, 64, 3);

        let run = |img: &Tensor| {
            let tape = Tape::new();
            let v = tape.leaf(img.reshaped(vec![1, 3, 32, 64]).unwrap());
            let f = net.features_forward(&tape, &params, v).unwrap();
            tape.value(f)
        };
        assert!(run(&img_a).bitwise_eq(&run(&img_a)));
        let fa = run(&img_a);
        let fb = run(&img_b);
        let differing = fa
            .data()
            .iter()
            .zip(fb.data())
            .filter(|(a, b)| a != b)
            .count();
        assert!(differing > 0, "two different images must give different features");
    }

    #[test]
    fn global_depth_shape_and_zero_params() {
        let cfg = tiny_config();
        let net = HybridNet::new(cfg.clone()).unwrap();
        let params = net.init_params().unwrap();
        let tape = Tape::new();
        let image = tape.leaf(random_image(32, 64, 4).reshaped(vec![1, 3, 32, 64]).unwrap());
        let coarse = net.global_depth_forward(&tape, &params, image).unwrap();
        assert_eq!(tape.dims(coarse), &[1, 1, 4, 8]);

        // Zero parameters produce a zero coarse map.
        let mut zeroed = params.clone();
        let names: Vec<String> = zeroed.names().map(str::to_string).collect();
        for name in names {
            let dims = zeroed.get(&name).unwrap().value.dims().to_vec();
            zeroed.set_value(&name, Tensor::zeros(dims)).unwrap();
        }
        let tape = Tape::new();
        let image = tape.leaf(random_image(32, 64, 4).reshaped(vec![1, 3, 32, 64]).unwrap());
        let coarse = net.global_depth_forward(&tape, &zeroed, image).unwrap();
        assert!(tape.value(coarse).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refinement_output_is_full_resolution_and_positive() {
        let net = HybridNet::new(tiny_config()).unwrap();
        let params = net.init_params().unwrap();
        let tape = Tape::new();
        let image = tape.leaf(random_image(32, 64, 5).reshaped(vec![1, 3, 32, 64]).unwrap());
        let feats = net.features_forward(&tape, &params, image).unwrap();
        let coarse = net.global_depth_forward(&tape, &params, image).unwrap();
        let depth = net
            .refine_depth_forward(&tape, &params, image, feats, coarse)
            .unwrap();
        let out = tape.value(depth);
        assert_eq!(out.dims(), &[1, 1, 32, 64]);
        assert!(out.data().iter().all(|&v| v > 0.0), "softplus output must be positive");
    }

    #[test]
    fn aspp_shape_contract() {
        let net = HybridNet::new(ModelConfig::default()).unwrap();
        let params = net.init_params().unwrap();
        let tape = Tape::new();
        let image = tape.leaf(random_image(64, 128, 6).reshaped(vec![1, 3, 64, 128]).unwrap());
        let feats = net.features_forward(&tape, &params, image).unwrap();
        let scores = net.aspp_forward(&tape, &params, feats).unwrap();
        assert_eq!(tape.dims(scores), &[1, 5, 64, 128]);
    }

    #[test]
    fn single_rate_aspp_equals_plain_conv_head() {
        let mut cfg = tiny_config();
        cfg.aspp_rates = vec![1];
        let net = HybridNet::new(cfg.clone()).unwrap();
        let params = net.init_params().unwrap();
        let image = random_image(32, 64, 8);

        let tape = Tape::new();
        let v = tape.leaf(image.reshaped(vec![1, 3, 32, 64]).unwrap());
        let feats = net.features_forward(&tape, &params, v).unwrap();
        let scores = net.aspp_forward(&tape, &params, feats).unwrap();

        // Direct construction: conv(pad 1, dil 1) + relu + 1×1 conv + resize.
        let w0 = tape.param(&params, "aspp.branch0.dilated.weight").unwrap();
        let b0 = tape.param(&params, "aspp.branch0.dilated.bias").unwrap();
        let w1 = tape.param(&params, "aspp.branch0.project.weight").unwrap();
        let b1 = tape.param(&params, "aspp.branch0.project.bias").unwrap();
        let mut direct = ops::conv2d(&tape, feats, w0, b0, &ConvSpec::with_dilation(1, 1)).unwrap();
        direct = ops::relu(&tape, direct);
        direct = ops::conv2d(&tape, direct, w1, b1, &ConvSpec::with_dilation(0, 1)).unwrap();
        direct = ops::bilinear_resize(&tape, direct, 32, 64).unwrap();

        assert!(tape.value(scores).bitwise_eq(&tape.value(direct)));
    }

    #[test]
    fn aspp_branches_sum() {
        // Zeroing all but one branch's parameters reproduces that branch.
        let cfg = tiny_config();
        let net = HybridNet::new(cfg.clone()).unwrap();
        let params = net.init_params().unwrap();
        let image = random_image(32, 64, 9);

        let scores_of = |ps: &ParamSet, branches: &[usize]| -> Tensor {
            let mut ps = ps.clone();
            for b in 0..cfg.aspp_rates.len() {
                if !branches.contains(&b) {
                    for suffix in ["dilated.weight", "dilated.bias", "project.weight", "project.bias"] {
                        let name = format!("aspp.branch{b}.{suffix}");
                        let dims = ps.get(&name).unwrap().value.dims().to_vec();
                        ps.set_value(&name, Tensor::zeros(dims)).unwrap();
                    }
                }
            }
            let tape = Tape::new();
            let v = tape.leaf(image.reshaped(vec![1, 3, 32, 64]).unwrap());
            let feats = net.features_forward(&tape, &ps, v).unwrap();
            let scores = net.aspp_forward(&tape, &ps, feats).unwrap();
            tape.value(scores)
        };

        let only0 = scores_of(&params, &[0]);
        let only1 = scores_of(&params, &[1]);
        let both = scores_of(&params, &[0, 1]);
        let summed = only0.add(&only1).unwrap();
        assert!(both.max_abs_diff(&summed).unwrap() < 1e-12);
    }

    #[test]
    fn hybrid_forward_shapes_and_positivity() {
        let net = HybridNet::new(tiny_config()).unwrap();
        let params = net.init_params().unwrap();
        let out = net.hybrid_forward(&params, &random_image(32, 64, 10)).unwrap();
        assert_eq!(out.depth.dims(), &[1, 32, 64]);
        assert_eq!(out.class_scores.dims(), &[3, 32, 64]);
        assert!(out.depth.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let net = HybridNet::new(tiny_config()).unwrap();
        let params = net.init_params().unwrap();
        assert!(net.hybrid_forward(&params, &random_image(64, 64, 11)).is_err());
    }

    #[test]
    fn graph_separation_by_perturbation() {
        let net = HybridNet::new(tiny_config()).unwrap();
        let params = net.init_params().unwrap();
        let image = random_image(32, 64, 12);
        let base = net.hybrid_forward(&params, &image).unwrap();

        let perturbed = |name: &str| -> HybridOutput {
            let mut ps = params.clone();
            let value = ps.get(name).unwrap().value.clone();
            let mut data = value.data().to_vec();
            data[0] += 0.25;
            ps.set_value(name, Tensor::new(value.dims().to_vec(), data).unwrap())
                .unwrap();
            net.hybrid_forward(&ps, &image).unwrap()
        };

        // A pyramid-head weight touches the scores but never the depth.
        let aspp = perturbed("aspp.branch0.dilated.weight");
        assert!(aspp.depth.bitwise_eq(&base.depth));
        assert!(!aspp.class_scores.bitwise_eq(&base.class_scores));

        // A depth-path weight touches the depth but never the scores.
        let global = perturbed("global.fc0.weight");
        assert!(global.class_scores.bitwise_eq(&base.class_scores));
        assert!(!global.depth.bitwise_eq(&base.depth));

        let refine = perturbed("refine.conv0.weight");
        assert!(refine.class_scores.bitwise_eq(&base.class_scores));
        assert!(!refine.depth.bitwise_eq(&base.depth));

        // A trunk weight touches both outputs.
        let trunk = perturbed("features.block0.conv0.weight");
        assert!(!trunk.depth.bitwise_eq(&base.depth));
        assert!(!trunk.class_scores.bitwise_eq(&base.class_scores));
    }
}
