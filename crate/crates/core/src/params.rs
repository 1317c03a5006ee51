use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// A named learnable tensor together with its accumulated gradient.
///
/// `grad` always has the same dims as `value`; it starts at zero and is
/// incremented by backward passes until explicitly reset.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// All parameters of a model, keyed by hierarchical name
/// (e.g. `features.block1.conv0.weight`).
///
/// Storage is a sorted map so every iteration over the set (updates,
/// serialization, gradient checks) happens in one canonical name order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Registers a parameter; names must be unique within the set.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(shape_err!("duplicate parameter name {name}"));
        }
        let grad = Tensor::zeros(value.dims().to_vec());
        self.entries.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| shape_err!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| shape_err!("unknown parameter {name}"))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self.get_mut(name)?;
        if value.dims() != param.value.dims() {
            return Err(shape_err!(
                "parameter {name} dims {:?} cannot be replaced by {:?}",
                param.value.dims(),
                value.dims()
            ));
        }
        param.value = value;
        Ok(())
    }

    /// Adds `delta` into the stored gradient of `name`.
    pub(crate) fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let param = self.get_mut(name)?;
        param.grad = param.grad.add(delta)?;
        Ok(())
    }

    /// Resets every gradient to zero.
    pub fn zero_grads(&mut self) {
        for param in self.entries.values_mut() {
            param.grad = Tensor::zeros(param.value.dims().to_vec());
        }
    }

    /// Parameters in canonical (sorted-name) order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// True iff both sets hold the same names with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|(a, b)| {
                a.name == b.name && a.value.bitwise_eq(&b.value)
            })
    }
}
