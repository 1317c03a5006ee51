//! Binary checkpoints: the full parameter set plus a JSON metadata block
//! (model config, iteration counter, stage tag). Save → load → save is
//! byte-identical, which is what makes checkpoints usable as the vehicle
//! for transplanting block parameters between training stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::net::{ModelConfig, ASPP_PREFIX, DEPTH_PREFIXES, FEATURES_PREFIX};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::Stage;

const MAGIC: &[u8; 4] = b"HYBN";
const VERSION: u16 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    iteration: u64,
    stage: Stage,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub iteration: u64,
    pub stage: Stage,
    /// Parameter tensors in canonical name order.
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(
        model: ModelConfig,
        iteration: u64,
        stage: Stage,
        params: &ParamSet,
    ) -> Checkpoint {
        Checkpoint {
            model,
            iteration,
            stage,
            params: params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds a parameter set (with zeroed gradients).
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        for (name, value) in &self.params {
            ps.insert(name, value.clone())?;
        }
        Ok(ps)
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.model == other.model
            && self.iteration == other.iteration
            && self.stage == other.stage
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((an, av), (bn, bv))| an == bn && av.bitwise_eq(bv))
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&Meta {
        model: ckpt.model.clone(),
        iteration: ckpt.iteration,
        stage: ckpt.stage,
    })
    .map_err(|e| config_err!("cannot serialize checkpoint meta: {e}"))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);
    bytes.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.params {
        let name_bytes = name.as_bytes();
        bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        bytes.push(tensor.dims().len() as u8);
        for &d in tensor.dims() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.bytes.len(),
                format!("checkpoint truncated while reading {what} at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad checkpoint magic, expected HYBN"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta_offset = r.pos;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "meta block")?)
        .map_err(|e| format_err(meta_offset, format!("bad meta block: {e}")))?;
    let entry_count = r.u32("entry count")? as usize;

    let mut params = BTreeMap::new();
    for _ in 0..entry_count {
        let name_len = r.u16("name length")? as usize;
        let name_offset = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format_err(name_offset, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(8 * numel, "tensor data")?;
        let data_offset = r.pos - 8 * numel;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| format_err(data_offset, format!("bad tensor for {name}: {e}")))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(format_err(name_offset, format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, "trailing bytes after last entry"));
    }
    Ok(Checkpoint {
        model: meta.model,
        iteration: meta.iteration,
        stage: meta.stage,
        params,
    })
}

/// Builds the end-to-end initialization: global + refinement parameters
/// from the depth-stage checkpoint, trunk + pyramid-head parameters from
/// the segmentation-stage checkpoint. Iteration resets to 0 and the stage
/// tag becomes `hybrid`.
pub fn merge_checkpoints(depth_ckpt: &Checkpoint, seg_ckpt: &Checkpoint) -> Result<Checkpoint> {
    let depth_names: Vec<&String> = depth_ckpt.params.keys().collect();
    let seg_names: Vec<&String> = seg_ckpt.params.keys().collect();
    if depth_names != seg_names {
        return Err(config_err!(
            "checkpoint parameter name sets differ ({} vs {} entries)",
            depth_names.len(),
            seg_names.len()
        ));
    }
    for (name, tensor) in &depth_ckpt.params {
        let other = &seg_ckpt.params[name];
        if tensor.dims() != other.dims() {
            return Err(config_err!(
                "parameter {name} has dims {:?} in one checkpoint and {:?} in the other",
                tensor.dims(),
                other.dims()
            ));
        }
    }

    let mut params = BTreeMap::new();
    for name in depth_ckpt.params.keys() {
        let from_depth = DEPTH_PREFIXES.iter().any(|p| name.starts_with(p));
        let source = if from_depth { depth_ckpt } else { seg_ckpt };
        debug_assert!(
            from_depth
                || name.starts_with(FEATURES_PREFIX)
                || name.starts_with(ASPP_PREFIX),
            "unclassified parameter {name}"
        );
        params.insert(name.clone(), source.params[name].clone());
    }
    Ok(Checkpoint {
        model: seg_ckpt.model.clone(),
        iteration: 0,
        stage: Stage::Hybrid,
        params,
    })
}
