//! Named parameter store and per-step tape bindings.

use std::collections::BTreeMap;
use std::path::Path;

use super::checkpoint;
use super::tape::{Tape, Val};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// All parameters of a model, keyed by name. Names iterate in sorted order,
/// which fixes both the checkpoint layout and the optimizer's update order.
#[derive(Debug, Clone, Default)]
pub struct Params<T: Scalar> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>, DiffError> {
        self.map.get(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, DiffError> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<(), DiffError> {
        let p = self.map.get_mut(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), DiffError> {
        let p = self.map.get_mut(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    /// Sets the trainable flag on every parameter whose name matches.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, p) in self.map.iter_mut() {
            if pred(name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| true, false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.map.iter().filter(|(_, p)| !p.trainable).map(|(n, _)| n.clone()).collect()
    }

    /// Bit-level snapshot for freezing audits.
    pub fn snapshot(&self, pred: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor<T>> {
        self.map
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }

    /// Names whose current values differ bit-wise from a snapshot.
    pub fn diff_from_snapshot(&self, snapshot: &BTreeMap<String, Tensor<T>>) -> Vec<String> {
        snapshot
            .iter()
            .filter(|(name, old)| {
                self.map.get(*name).map(|p| !p.value.bits_eq(old)).unwrap_or(true)
            })
            .map(|(name, _)| name.clone())
            .collect()
    }
}

impl Params<f32> {
    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        let map: BTreeMap<String, Tensor<f32>> =
            self.map.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
        checkpoint::write_checkpoint_atomic(path, &map)
    }

    /// Loads a checkpoint as a fresh parameter set with a uniform trainable flag.
    pub fn load(path: &Path, trainable: bool) -> Result<Self, DiffError> {
        let map = checkpoint::read_checkpoint(path)?;
        let mut params = Self::new();
        for (name, value) in map {
            params.insert(name, value, trainable);
        }
        Ok(params)
    }
}

/// Map from parameter names to tape handles for one forward pass. Binding the
/// same name twice reuses the same leaf so fan-out gradients accumulate.
#[derive(Debug, Default)]
pub struct Bound {
    map: BTreeMap<String, Val>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        name: &str,
    ) -> Result<Val, DiffError> {
        if let Some(v) = self.map.get(name) {
            return Ok(*v);
        }
        let p = params.get(name)?;
        let v = tape.leaf(p.value.clone(), p.trainable)?;
        self.map.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn get(&self, name: &str) -> Option<Val> {
        self.map.get(name).copied()
    }

    /// Associates a name with a leaf that is already on the tape; later
    /// binds of that name reuse it instead of the parameter store's value.
    pub fn bind_existing(&mut self, name: &str, val: Val) {
        self.map.insert(name.to_string(), val);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Val)> {
        self.map.iter()
    }
}
