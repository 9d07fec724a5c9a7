use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::{digest, Real, Tensor};

/// Which optimizer (if any) owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Network weights, updated by SGD.
    Weight,
    /// Architecture logits, updated by Adam during search.
    Arch,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Flat, ordered store of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Mutable views of one group's tensors, in registration order.
    pub fn group_mut(&mut self, group: Group) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().filter(|p| p.group == group).map(|p| &mut p.value).collect()
    }

    /// Clears every gradient, then installs `grads`.
    pub fn set_grads(&mut self, grads: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        self.zero_grad();
        for (id, g) in grads {
            self.get_mut(id).set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Number of scalar entries in a group.
    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Hash of one group's current values.
    pub fn digest(&self, group: Group) -> u64 {
        digest(self.params.iter().filter(|p| p.group == group).map(|p| &p.value))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() })
                .collect(),
        }
    }

    /// Overwrites values from `other`, which must hold exactly the same
    /// names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        ensure_arg!(
            self.len() == other.len(),
            "parameter count mismatch: model has {}, source has {}",
            self.len(),
            other.len()
        );
        self.copy_matching(other)
    }

    /// Copies every parameter of `self` from the same-named entry in
    /// `source`, which may hold additional parameters.
    pub fn copy_matching(&mut self, source: &ParamSet<T>) -> Result<()> {
        for p in &mut self.params {
            let id = source
                .find(&p.name)
                .ok_or_else(|| Error::arg(format!("source has no parameter {}", p.name)))?;
            let src = source.get(id);
            ensure_arg!(src.shape() == p.value.shape(), "shape mismatch for {}", p.name);
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            p.value.check_finite(&p.name)?;
        }
        Ok(())
    }
}
