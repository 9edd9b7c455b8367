use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: usize,
    pub tensor: Tensor,
}

/// Named set of parameters that are updated (or frozen) together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub trainable: bool,
}

/// Owns every learnable tensor of a model, partitioned into groups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    groups: Vec<ParameterGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of group `name`, creating it (trainable) if needed.
    pub fn group(&mut self, name: &str) -> usize {
        if let Some(i) = self.groups.iter().position(|g| g.name == name) {
            return i;
        }
        self.groups.push(ParameterGroup {
            name: name.to_string(),
            params: Vec::new(),
            trainable: true,
        });
        self.groups.len() - 1
    }

    pub fn add(&mut self, group: &str, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let g = self.group(group);
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group: g,
            tensor,
        });
        self.groups[g].params.push(id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn group_of(&self, id: ParamId) -> &ParameterGroup {
        &self.groups[self.params[id.0].group]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.group_of(id).trainable
    }

    pub fn set_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::invalid(format!("no parameter group `{group}`")))?;
        g.trainable = trainable;
        Ok(())
    }

    /// Makes exactly one group trainable.
    pub fn train_only(&mut self, group: &str) -> Result<()> {
        if !self.groups.iter().any(|g| g.name == group) {
            return Err(Error::invalid(format!("no parameter group `{group}`")));
        }
        for g in &mut self.groups {
            g.trainable = g.name == group;
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.groups.iter_mut().for_each(|g| g.trainable = trainable);
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn group_num_params(&self, name: &str) -> usize {
        self.groups
            .iter()
            .filter(|g| g.name == name)
            .flat_map(|g| g.params.iter())
            .map(|&id| self.params[id.0].tensor.numel())
            .sum()
    }

    /// Zeroes (and allocates) gradients of every trainable parameter.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if self.groups[p.group].trainable {
                p.tensor.zero_grad();
            } else {
                p.tensor.clear_grad();
            }
        }
    }

    /// Adds the tape's parameter-leaf gradients into the parameter tensors.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (id, var) in tape.param_leaves() {
            if let Some(g) = grads.get(var) {
                self.params[id.0].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Flat copy of all parameter values of one group, in id order.
    pub fn group_values(&self, name: &str) -> Vec<f64> {
        self.groups
            .iter()
            .filter(|g| g.name == name)
            .flat_map(|g| g.params.iter())
            .flat_map(|&id| self.params[id.0].tensor.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily for
/// the parameters that are actually stepped.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Moment buffers for `id`, if the parameter has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(id.0)
            .and_then(|m| m.as_ref())
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter in a trainable group. Frozen groups are
    /// not touched at all.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let trainable: Vec<ParamId> = store
            .groups()
            .iter()
            .filter(|g| g.trainable)
            .flat_map(|g| g.params.iter().copied())
            .collect();
        for &id in &trainable {
            if store.get(id).grad().is_none() {
                return Err(Error::MissingGradient(store.param(id).name.clone()));
            }
        }
        if self.moments.len() < store.params().len() {
            self.moments.resize(store.params().len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in trainable {
            let tensor = store.get_mut(id);
            let n = tensor.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] *= 1.0 - c.lr * c.weight_decay;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
