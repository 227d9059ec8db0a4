//! Named parameter storage and graph binding.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::LEAKY_SLOPE;
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Ordered collection of named tensors. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

/// Weight initialization of a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Symmetric uniform with bound `gain * sqrt(6 / ((1 + slope^2) * fan_in))`.
    FanIn { gain: f64 },
    Zero,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Declares `{name}.weight` of shape `(cout, cin, k, k)` and, if requested, a zero `{name}.bias`.
    pub fn conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        let weight = match init {
            Init::FanIn { gain } => {
                let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
                Tensor::from_fn(vec![cout, cin, k, k], |_| T::of(rng.gen_range(-bound..=bound)))
            }
            Init::Zero => Tensor::zeros(vec![cout, cin, k, k]),
        };
        self.insert(format!("{name}.weight"), weight)?;
        if bias {
            self.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
        }
        Ok(())
    }

    /// Records every parameter on `graph`, as variables if `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| graph.leaf(t.clone(), trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
pub struct Bound<'g, T> {
    vars: Vec<Var<'g, T>>,
    index: HashMap<String, usize>,
    names: Vec<String>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g, T>> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Substitutes `var` for parameter `name`, e.g. to differentiate with respect to it alone.
    pub fn replace(&mut self, name: &str, var: Var<'g, T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if var.shape() != self.vars[i].shape() {
            return Err(Error::shape(
                "replace",
                "parameter",
                format!("{:?} for `{name}` of shape {:?}", var.shape(), self.vars[i].shape()),
            ));
        }
        self.vars[i] = var;
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Applies convolution `name` (weight plus optional bias).
    pub fn conv(&self, x: Var<'g, T>, name: &str, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let w = self.get(&format!("{name}.weight"))?;
        x.conv2d(w, self.try_get(&format!("{name}.bias")), stride, pad)
    }

    /// Gradients in store order; fails naming the first parameter that received none.
    pub fn gradients(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.vars
            .iter()
            .zip(&self.names)
            .map(|(&v, n)| grads.get(v).cloned().ok_or_else(|| Error::MissingGradient(n.clone())))
            .collect()
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn declare_bind_and_collect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        store.conv("a", 4, 3, 3, true, Init::FanIn { gain: 1.0 }, &mut rng).unwrap();
        store.conv("b", 1, 4, 1, false, Init::Zero, &mut rng).unwrap();
        assert_eq!(store.names().collect::<Vec<_>>(), ["a.weight", "a.bias", "b.weight"]);
        assert_eq!(store.numel(), 4 * 27 + 4 + 4);
        let bound = (6.0 / (1.04 * 27.0f64)).sqrt();
        assert!(store.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(store.conv("a", 1, 1, 1, false, Init::Zero, &mut rng).is_err());

        let g = Graph::new();
        let p = store.bind(&g, true);
        let x = g.constant(Tensor::ones(vec![1, 3, 4, 4]));
        let y = p.conv(x, "a", 1, 1).unwrap();
        let loss = y.sum();
        let grads = g.backward(loss).unwrap();
        match p.gradients(&grads) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "b.weight"),
            other => panic!("expected missing gradient, got {:?}", other.map(|v| v.len())),
        }
    }
}
