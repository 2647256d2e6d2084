use indexmap::IndexMap;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Param {
    value: Tensor,
    grad: Tensor,
}

/// Ordered collection of named trainable tensors with their accumulated
/// gradients. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.grad)
    }

    pub(crate) fn value_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub(crate) fn value_and_grad_mut(&mut self, index: usize) -> (&mut Tensor, &Tensor) {
        let p = &mut self.entries[index];
        (&mut p.value, &p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients computed by `graph` for the leaves in `bound`.
    /// Leaves the loss never reached contribute nothing.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &Bound) -> Result<()> {
        for (name, &var) in &bound.vars {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` not in set")))?;
            if let Some(g) = graph.grad(var) {
                p.grad.same_shape(g, name)?;
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Rounds every value through `f32`. Used before persisting so that the
    /// in-memory model equals what a checkpoint reload produces.
    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Graph handles for every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub(crate) fn new(vars: IndexMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl Graph {
    /// Adds every parameter as a gradient-tracking leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        self.bind_with(params, true)
    }

    /// Adds every parameter as a constant (no gradient).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        self.bind_with(params, false)
    }

    fn bind_with(&mut self, params: &ParamSet, requires_grad: bool) -> Bound {
        let vars = params
            .entries
            .iter()
            .map(|(name, p)| {
                let v = if requires_grad {
                    self.leaf(p.value.clone())
                } else {
                    self.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound::new(vars)
    }
}
