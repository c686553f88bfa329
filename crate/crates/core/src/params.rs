//! Named parameter tensors with per-tensor freeze flags.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Result, TapError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    pub frozen: bool,
}

/// Every trainable tensor of a network, keyed by dotted name. Iteration
/// order is the lexicographic name order, which keeps optimizer updates and
/// serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(
            name.into(),
            Param {
                value: Arc::new(t),
                frozen: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| TapError::config(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    /// Mutable access; copies the tensor if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| TapError::config(format!("unknown parameter {name}")))
    }

    /// Replace a tensor, keeping its freeze flag; shapes must agree.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TapError::config(format!("unknown parameter {name}")))?;
        if p.value.shape() != t.shape() {
            return Err(TapError::shape(format!(
                "parameter {name}: stored {:?}, replacement {:?}",
                p.value.shape(),
                t.shape()
            )));
        }
        p.value = Arc::new(t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| TapError::config(format!("unknown parameter {name}")))
    }

    /// Freeze every tensor, then unfreeze those matching `trainable`.
    pub fn freeze_except(&mut self, trainable: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.frozen = !trainable(name);
        }
    }

    pub fn frozen_flags(&self) -> BTreeMap<String, bool> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.frozen))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Kaiming-uniform style initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init<T: Real, R: Rng>(rng: &mut R, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass. Unfrozen
/// parameters become gradient leaves on a recording tape; everything else
/// enters as a shared constant without copying.
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<BTreeMap<String, Var<T>>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            params,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn p(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let p = self
            .params
            .param(name)
            .ok_or_else(|| TapError::config(format!("unknown parameter {name}")))?;
        let v = if self.tape.is_recording() && !p.frozen {
            self.tape.leaf_shared(p.value.clone())
        } else {
            self.tape.constant_shared(p.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients of every parameter that was used as a leaf.
    pub fn gradients(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
