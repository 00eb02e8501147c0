//! Named parameter storage with gradient slots and SGD momentum state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct Entry<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    velocity: Tensor<T>,
}

/// Ordered collection of named tensors. Insertion order is stable and
/// drives checkpoint layout and optimizer iteration, keeping runs with the
/// same construction sequence bit-for-bit reproducible.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let velocity = Tensor::zeros(value.shape().to_vec());
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: None,
            velocity,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
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

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if value.shape() != entry.value.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} has shape {:?}, replacement is {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Parameters in insertion order, as written to checkpoints.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    /// Add a gradient contribution for `id`, accumulating across calls.
    pub fn add_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if grad.len() != entry.value.numel() {
            return Err(Error::shape(format!(
                "gradient for {:?} has {} elements, parameter has {}",
                entry.name,
                grad.len(),
                entry.value.numel()
            )));
        }
        match &mut entry.grad {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad) {
                    *e = *e + *g;
                }
            }
            None => {
                entry.grad = Some(Tensor::new(entry.value.shape().to_vec(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Record a parameter as a gradient-carrying graph leaf, remembering the
    /// pairing so [`ParamStore::absorb_grads`] can route gradients back.
    pub fn bind(&self, graph: &mut Graph<T>, id: ParamId, bindings: &mut Vec<(ParamId, Var)>) -> Var {
        let var = graph.leaf(self.value(id).clone());
        bindings.push((id, var));
        var
    }

    /// Pull gradients produced by a backward pass into the store, following
    /// the bindings recorded by [`ParamStore::bind`]. Leaves the graph
    /// untouched; parameters whose leaves received no gradient keep `None`.
    pub fn absorb_grads(&mut self, graph: &Graph<T>, bindings: &[(ParamId, Var)]) -> Result<()> {
        for &(id, var) in bindings {
            if let Some(g) = graph.grad(var) {
                let g = g.to_vec();
                self.add_grad(id, &g)?;
            }
        }
        Ok(())
    }
}

/// SGD with classical momentum and L2 weight decay:
///
/// ```text
/// velocity <- momentum * velocity + grad + weight_decay * param
/// param    <- param - learning_rate * velocity
/// ```
///
/// Gradients are consumed by [`Sgd::step`]; stepping a parameter that has
/// no gradient is an error rather than a silent no-op.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let lr = T::from_f64(self.learning_rate);
        let momentum = T::from_f64(self.momentum);
        let weight_decay = T::from_f64(self.weight_decay);
        for entry in &mut store.entries {
            let grad = entry
                .grad
                .take()
                .ok_or_else(|| Error::UninitializedGradient(entry.name.clone()))?;
            let p = entry.value.data_mut();
            let v = entry.velocity.data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
                p[i] = p[i] - lr * v[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(value)).unwrap();
        (s, id)
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let (mut store, id) = scalar_store(1.0);
        let sgd = Sgd {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        store.add_grad(id, &[1.0]).unwrap();
        sgd.step(&mut store).unwrap();
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-12);
        store.add_grad(id, &[1.0]).unwrap();
        sgd.step(&mut store).unwrap();
        // velocity = 0.9 * 1.0 + 1.0 = 1.9, param = 0.9 - 0.19 = 0.71.
        assert!((store.value(id).data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient_signal() {
        let (mut store, id) = scalar_store(1.0);
        let sgd = Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        store.add_grad(id, &[0.0]).unwrap();
        sgd.step(&mut store).unwrap();
        assert!((store.value(id).data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn step_without_gradient_is_an_error() {
        let (mut store, _) = scalar_store(1.0);
        let sgd = Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(matches!(
            sgd.step(&mut store),
            Err(Error::UninitializedGradient(_))
        ));
    }

    #[test]
    fn gradients_are_cleared_after_step() {
        let (mut store, id) = scalar_store(1.0);
        let sgd = Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        store.add_grad(id, &[1.0]).unwrap();
        sgd.step(&mut store).unwrap();
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn add_grad_accumulates() {
        let (mut store, id) = scalar_store(0.0);
        store.add_grad(id, &[1.5]).unwrap();
        store.add_grad(id, &[2.5]).unwrap();
        assert_eq!(store.grad(id).unwrap().data(), &[4.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn bind_and_absorb_route_graph_gradients() {
        let (mut store, id) = scalar_store(3.0);
        let mut graph = Graph::new();
        let mut bindings = Vec::new();
        let x = store.bind(&mut graph, id, &mut bindings);
        let y = graph.scale(x, 2.0);
        graph.backward(y).unwrap();
        store.absorb_grads(&graph, &bindings).unwrap();
        assert_eq!(store.grad(id).unwrap().data(), &[2.0]);
    }
}
