use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Suffixes marking non-trainable buffers (normalisation running statistics).
pub const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_trainable(name: &str) -> bool {
        !BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamSet, prefix: &str) {
        for (n, t) in other.iter() {
            if n.starts_with(prefix) {
                self.insert(n, t.clone());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed like the parameters they track.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&mut self, name: &str, n: usize) -> &mut (String, Vec<f64>, Vec<f64>) {
        let pos = match self.moments.iter().position(|(k, ..)| k == name) {
            Some(p) => p,
            None => {
                self.moments.push((name.to_string(), vec![0.0; n], vec![0.0; n]));
                self.moments.len() - 1
            }
        };
        &mut self.moments[pos]
    }
}

/// One Adam step with decoupled weight decay over every trainable parameter
/// that has an entry in `grads`.
pub fn adam_update(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at index {k}")));
        }
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads.iter() {
        if !ParamSet::is_trainable(name) {
            continue;
        }
        let (_, m, v) = state.slot(name, g.len());
        let p = params.get_mut(name).expect("checked above");
        for ((w, gv), (mk, vk)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mk = hyper.beta1 * *mk + (1.0 - hyper.beta1) * gv;
            *vk = hyper.beta2 * *vk + (1.0 - hyper.beta2) * gv * gv;
            let mhat = *mk / bc1;
            let vhat = *vk / bc2;
            let step = hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            if hyper.weight_decay != 0.0 {
                *w -= hyper.lr * hyper.weight_decay * *w;
            }
            *w -= step;
        }
    }
    Ok(())
}
