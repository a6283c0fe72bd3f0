use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-parameter gradient buffers, indexed like the store. `None` means the
/// parameter was frozen or not reached.
pub type ParamGrads<S> = Vec<Option<Vec<S>>>;

/// Ordered table of named learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    lookup: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Adds a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Marks every parameter whose name satisfies `pred` as trainable and the
    /// rest as frozen.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.requires_grad = pred(name);
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds `scale * grads[i]` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &ParamGrads<S>, scale: S) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Usage(format!(
                "gradient table has {} entries, store has {}",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !t.requires_grad {
                continue;
            }
            let n = t.numel();
            if g.len() != n {
                return Err(Error::Usage(format!(
                    "gradient length {} does not match parameter size {n}",
                    g.len()
                )));
            }
            let buf = t.grad.get_or_insert_with(|| vec![S::zero(); n]);
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += scale * v;
            }
        }
        Ok(())
    }

    /// Converts every tensor to another scalar type, keeping names and flags.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Sums per-sample gradient tables in order.
pub(crate) fn sum_grads<S: Scalar>(tables: Vec<ParamGrads<S>>, n: usize) -> ParamGrads<S> {
    let mut out: ParamGrads<S> = vec![None; n];
    for table in tables {
        for (slot, g) in out.iter_mut().zip(table) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += *v;
                    }
                }
                None => *slot = Some(g),
            }
        }
    }
    out
}
