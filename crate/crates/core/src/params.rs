//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, t) in self.iter_mut() {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
                n += 1;
            }
        }
        n
    }

    /// Bind all parameters as the first leaves of `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) {
        tape.bind_params(self.tensors.iter());
    }

    /// Copy gradients of bound parameters out of `grads`.
    pub fn collect_grads(&mut self, tape: &Tape<S>, grads: &Gradients<S>) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if t.requires_grad {
                let g = grads
                    .get(tape.param(i))
                    .expect("trainable leaf has a gradient");
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => t.grad = Some(g.to_vec()),
                }
            } else {
                t.grad = None;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replace the data of parameter `name`, keeping shape.
    pub fn load(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Mismatch(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::Mismatch(format!(
                "parameter {name}: shape {:?} vs checkpoint {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        let trainable = slot.requires_grad;
        *slot = tensor;
        slot.requires_grad = trainable;
        slot.grad = None;
        Ok(())
    }
}

/// Builds parameters under a dotted name prefix.
pub struct ParamBuilder<'a, S, R> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, S: Scalar, R: Rng> ParamBuilder<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, S, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| S::from_f64(dist.sample(self.rng))).collect();
        let t = Tensor::new(shape, data).expect("shape matches");
        let full = self.full_name(name);
        self.store.add(full, t)
    }

    pub fn fill(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store
            .add(full, Tensor::full(shape, S::from_f64(value)))
    }
}
