//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors. BTreeMap keeps iteration order stable so
/// optimizer updates and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.params.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Merge another store; duplicate names are a caller bug.
    pub fn absorb(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.insert(k, v);
        }
    }

    /// Bind every parameter into a graph: trainable names become leaves,
    /// the rest constants. Returns the name -> Var map.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> Binding {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable(name) {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Binding { vars }
    }
}

/// Name -> Var map for one graph built by [`ParamStore::bind`].
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, keyed like the store.
#[derive(Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction over the gradients present in
/// `grads`. Parameters without a gradient entry are left untouched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for (name, grad) in grads {
        let p = store
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("adam_step: unknown parameter `{name}`")))?;
        if p.data.len() != grad.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "parameter `{name}`: {} slots vs {} gradient slots",
                    p.data.len(),
                    grad.len()
                ),
            ));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for i in 0..grad.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Clip gradients to a maximum global L2 norm; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}
