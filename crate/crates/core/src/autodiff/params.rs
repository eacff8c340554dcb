//! Named parameter storage with persistent gradient buffers, shared by all
//! models and by the checkpoint format.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};

/// Index of a parameter within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Ordered collection of named parameters. Gradients are accumulated here
/// across mini-batch chunks and consumed by the optimizer.
pub struct ParamSet<T: Scalar> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Registers every parameter as a graph leaf, in storage order.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Binding {
        let vars =
            self.entries.iter().map(|e| graph.leaf(e.value.clone(), trainable)).collect();
        Binding { vars }
    }

    /// Like [`bind`](Self::bind) with every parameter constant except one,
    /// which is substituted by an existing graph node. Used by gradient
    /// checks to differentiate with respect to a single parameter tensor.
    pub fn bind_replacing(&self, graph: &mut Graph<T>, replace: ParamId, with: Var) -> Binding {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if i == replace.0 {
                    with
                } else {
                    graph.constant(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Extracts the gradients a finished graph holds for `binding`'s leaves.
    pub fn export_grads(&self, graph: &Graph<T>, binding: &Binding) -> GradExport<T> {
        GradExport {
            grads: binding.vars.iter().map(|v| graph.grad(*v).cloned()).collect(),
        }
    }

    /// Adds `scale`·export into the persistent gradient buffers. Call in a
    /// fixed chunk order so training is deterministic regardless of how
    /// many worker threads produced the exports.
    pub fn accumulate(&mut self, export: &GradExport<T>, scale: T) {
        debug_assert_eq!(export.grads.len(), self.entries.len());
        for (entry, g) in self.entries.iter_mut().zip(export.grads.iter()) {
            if let Some(g) = g {
                entry.grad.scaled_add_assign(g, scale);
            }
        }
    }

    /// Values only, in storage order; used for best-epoch snapshots.
    pub fn snapshot_values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Tensor<T>]) -> crate::error::Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::InvalidConfig(format!(
                "snapshot holds {} tensors, parameter set has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (e, v) in self.entries.iter_mut().zip(values.iter()) {
            if e.value.shape() != v.shape() {
                return Err(Error::InvalidConfig(format!(
                    "snapshot shape mismatch for {}",
                    e.name
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Byte-exact parameter value comparison.
    pub fn values_equal(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data() == b.value.data()
            })
    }
}

/// Graph leaves for one [`ParamSet::bind`] call.
pub struct Binding {
    pub vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Per-chunk gradient snapshot, summed into a [`ParamSet`] on the
/// coordinating thread.
pub struct GradExport<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

/// Uniform init in [−1/√fan_in, +1/√fan_in], the convention for every
/// weight matrix and convolution kernel in this crate.
pub fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::of_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_accumulate_roundtrip() {
        let mut set = ParamSet::<f64>::new();
        let w = set.add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let binding = set.bind(&mut g, true);
        let s = g.sum(binding.var(w));
        g.backward(s).unwrap();
        let export = set.export_grads(&g, &binding);
        set.accumulate(&export, 0.5);
        assert_eq!(set.grad(w).data(), &[0.5, 0.5]);
        set.zero_grads();
        assert_eq!(set.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::<f32>::new();
        set.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(set.add("w", Tensor::zeros(&[1])).is_err());
    }
}
