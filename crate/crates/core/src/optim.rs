//! Named parameter storage and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by stable string names (the
//! names are also the checkpoint keys). Training loops build a fresh graph
//! per example, call `apply_leaf_grads` to accumulate into the store, then
//! hand the store to [`Adam::step`]. Groups carry their own learning rate;
//! a frozen group is skipped outright, so its parameters and moments stay
//! bitwise untouched no matter how many steps run.

use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {0:?} registered twice")]
    DuplicateName(String),
    #[error("no gradient for parameter {0:?}; run backward before step")]
    MissingGrad(String),
    #[error("optimizer group {0:?} declared twice")]
    DuplicateGroup(String),
    #[error("gradient shape {got:?} does not match parameter {name:?} shape {expected:?}")]
    GradShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Handle into a [`ParamStore`]; stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> ParamStore<S> {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId, OptimError> {
        if self.by_name.contains_key(name) {
            return Err(OptimError::DuplicateName(name.to_string()));
        }
        let idx = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: None,
            requires_grad: true,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set_value must preserve the shape of {:?}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, rg: bool) {
        self.entries[id.0].requires_grad = rg;
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.entries[id.0].grad.as_ref()
    }

    /// Add `g` into the accumulated gradient for `id` (mini-batch sums).
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<S>) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(entry.value.shape(), g.shape());
        let acc = entry
            .grad
            .get_or_insert_with(|| Tensor::zeros(entry.value.shape()));
        for (o, x) in acc.data_mut().iter_mut().zip(g.data()) {
            *o = o.add(*x);
        }
    }

    /// Scale all accumulated gradients, e.g. by 1/batch for a mean loss.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = S::from_f64(factor);
        for entry in &mut self.entries {
            if let Some(g) = entry.grad.as_mut() {
                for x in g.data_mut() {
                    *x = x.mul(f);
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad = None;
        }
    }

    /// Ids in registration order; the canonical iteration order everywhere
    /// (checkpoints, audits) so files and hashes are reproducible.
    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// One learning-rate group. Frozen groups never move.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub frozen: bool,
    pub params: Vec<ParamId>,
}

pub struct Adam<S> {
    groups: Vec<ParamGroup>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    // Moment pair per ParamId index, allocated on first use.
    moments: HashMap<usize, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(groups: Vec<ParamGroup>) -> Result<Adam<S>, OptimError> {
        let mut seen = HashMap::new();
        for g in &groups {
            if seen.insert(g.name.clone(), ()).is_some() {
                return Err(OptimError::DuplicateGroup(g.name.clone()));
            }
        }
        Ok(Adam {
            groups,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update with bias correction. Consumes the gradients currently
    /// accumulated in the store (and clears them).
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), OptimError> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let eps = S::from_f64(self.eps);

        for gi in 0..self.groups.len() {
            if self.groups[gi].frozen {
                continue;
            }
            let lr1 = S::from_f64(self.groups[gi].lr / bc1);
            let inv_bc2 = S::from_f64(1.0 / bc2);
            for &pid in &self.groups[gi].params.clone() {
                let name = store.name(pid).to_string();
                let grad = match store.grad(pid) {
                    Some(g) => g.clone(),
                    None => return Err(OptimError::MissingGrad(name)),
                };
                let shape = store.value(pid).shape().to_vec();
                if grad.shape() != shape {
                    return Err(OptimError::GradShape {
                        name,
                        expected: shape,
                        got: grad.shape().to_vec(),
                    });
                }
                let (m, v) = self
                    .moments
                    .entry(pid.0)
                    .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
                let entry_value = store.value(pid).clone();
                let mut new_value = entry_value;
                for j in 0..grad.data().len() {
                    let g = grad.data()[j];
                    let mj = m.data()[j].mul(b1).add(one_m_b1.mul(g));
                    let vj = v.data()[j].mul(b2).add(one_m_b2.mul(g).mul(g));
                    m.data_mut()[j] = mj;
                    v.data_mut()[j] = vj;
                    let denom = vj.mul(inv_bc2).sqrt().add(eps);
                    let upd = lr1.mul(mj).div(denom);
                    new_value.data_mut()[j] = new_value.data_mut()[j].sub(upd);
                }
                store.set_value(pid, new_value);
            }
        }
        store.clear_grads();
        Ok(())
    }

    /// Moments keyed by parameter name, for checkpointing. Only parameters
    /// that have actually been updated appear.
    pub fn export_moments(&self, store: &ParamStore<S>) -> Vec<(String, Tensor<S>, Tensor<S>)> {
        let mut out: Vec<(String, Tensor<S>, Tensor<S>)> = Vec::new();
        let mut idxs: Vec<usize> = self.moments.keys().copied().collect();
        idxs.sort_unstable();
        for idx in idxs {
            let (m, v) = &self.moments[&idx];
            out.push((store.name(ParamId(idx)).to_string(), m.clone(), v.clone()));
        }
        out
    }

    pub fn import_moments(
        &mut self,
        store: &ParamStore<S>,
        step: u64,
        moments: &[(String, Tensor<S>, Tensor<S>)],
    ) -> Result<(), OptimError> {
        self.step_count = step;
        self.moments.clear();
        for (name, m, v) in moments {
            let id = store
                .find(name)
                .ok_or_else(|| OptimError::MissingGrad(name.clone()))?;
            self.moments.insert(id.0, (m.clone(), v.clone()));
        }
        Ok(())
    }
}
