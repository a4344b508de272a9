use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    first_moment: Tensor,
    second_moment: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
///
/// Backed by a `BTreeMap`, so every iteration (updates, hashing, checkpoint
/// writes) runs in lexicographic name order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
    grads_ready: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.insert(
            name,
            Parameter {
                grad: zeros.clone(),
                first_moment: zeros.clone(),
                second_moment: zeros,
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// trainable and freezes the rest.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = prefixes.iter().any(|pre| name.starts_with(pre));
        }
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if !p.trainable {
            return Ok(());
        }
        if p.grad.shape() != grad.shape() {
            return Err(Error::dim("accumulate", p.grad.shape(), grad.shape()));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_ready = false;
    }

    /// Divides every accumulated gradient by `n` (mean over a mini-batch).
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update over all trainable parameters, then clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::contract("adam_step called before backward"));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let g = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.second_moment.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.first_moment.data(), p.second_moment.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        for p in self.params.values() {
            if !p.value.is_finite() {
                return Err(Error::Divergence("non-finite parameter after update".into()));
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// SHA-256 over names, shapes and bit patterns of every parameter under
    /// `prefix` (all parameters for an empty prefix).
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint<C: Serialize>(&self, config: &C, stage: u8) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            stage,
            config: serde_json::to_value(config)?,
            params: self
                .params
                .iter()
                .map(|(name, p)| ParamRecord {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        let mut store = ParameterStore::new();
        for rec in &ckpt.params {
            store.insert(rec.name.clone(), Tensor::new(rec.shape.clone(), rec.values.clone())?)?;
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk parameter snapshot. Serialized as pretty JSON; struct fields keep
/// declaration order and parameters are written in name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: u8,
    pub config: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}
