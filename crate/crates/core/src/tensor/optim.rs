use std::collections::{BTreeMap, HashMap};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor<f32>,
    pub momentum: Tensor<f32>,
    pub trainable: bool,
}

/// Named parameters with their momentum buffers, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let momentum = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Param {
                value,
                momentum,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: ParameterStore) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::contract(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + g + weight_decay * w`, `w <- w - lr * v`.
///
/// A zero learning rate is a no-op, momentum buffers included.
pub fn sgd_step(store: &mut ParameterStore, grads: &HashMap<String, Tensor<f32>>, cfg: SgdConfig) -> Result<()> {
    for (name, p) in store.entries.iter().filter(|(_, p)| p.trainable) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for trainable parameter `{name}`")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if cfg.lr == 0.0 {
        return Ok(());
    }
    for (name, p) in store.entries.iter_mut().filter(|(_, p)| p.trainable) {
        let g = &grads[name];
        let Param { value, momentum, .. } = p;
        for ((w, v), &gv) in value.data_mut().iter_mut().zip(momentum.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + gv + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
    }
    Ok(())
}
