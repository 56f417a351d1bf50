use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of tensors. Used both for trainable parameters
/// and for non-trainable buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hash of every name, shape and bit pattern, for exact-equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_usize(d);
            }
            let mut buf = Vec::with_capacity(t.numel() * S::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }

    /// Replace the contents with `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::Invalid("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(TensorError::Shape(format!(
                    "parameter shape {:?} != {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Put every tensor on the graph; as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound<S> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            observed: Vec::new(),
        }
    }
}

/// Graph handles for a [`ParamStore`], plus batch-norm statistics observed
/// during a training-mode forward pass.
pub struct Bound<S> {
    vars: Vec<Var>,
    observed: Vec<(ParamId, ParamId, Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Bound<S> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Record batch statistics destined for buffers `(mean_id, var_id)`.
    pub fn observe(&mut self, mean_id: ParamId, var_id: ParamId, mean: Vec<S>, var: Vec<S>) {
        self.observed.push((mean_id, var_id, mean, var));
    }

    pub fn take_observed(&mut self) -> Vec<(ParamId, ParamId, Vec<S>, Vec<S>)> {
        std::mem::take(&mut self.observed)
    }

    /// Gradient per parameter, zeros where none reached.
    pub fn grads(&self, store: &ParamStore<S>, grads: &Grads<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// He (fan-in) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z * std)
    })
}
