//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The [`Graph`] records every operation of one forward pass on a tape;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the leaves. Trainable parameters live outside the graph in a
//! [`ParamSet`] and are bound into each forward pass as leaves, so the tape
//! can be dropped after every optimizer step.

mod conv;
pub(crate) mod graph;
pub mod gradcheck;
mod optim;

#[cfg(test)]
mod tests;

pub use graph::{Graph, GraphT, Scalar, Var};
pub use optim::AdamW;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major f32 tensor with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::from_vec(vec![], vec![value])
    }

    /// Kaiming-uniform initialized weight: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f32).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = true;
        t
    }

    /// Zero-initialized trainable parameter (used for biases).
    pub fn zeros_param(shape: Vec<usize>) -> Self {
        let mut t = Tensor::zeros(shape);
        t.requires_grad = true;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Adds `contrib` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, contrib: &[f32]) {
        assert_eq!(contrib.len(), self.data.len(), "gradient length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Named parameter collection for one model.
///
/// Names are hierarchical paths like `student/encoder/conv0/weight`; the
/// first path segment is the model, the second the role. Iteration order is
/// the sorted name order, which keeps checkpoints and optimizer updates
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.entries.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over parameters whose name passes `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.count_where(|_| true)
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Binds every parameter into `g` as a leaf. With `trainable` false the
    /// leaves are recorded without gradient tracking (frozen model).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            let var = if trainable {
                g.leaf(t)
            } else {
                g.constant(t.data().to_vec(), t.shape().to_vec())
            };
            vars.insert(name.clone(), var);
        }
        Bound { vars }
    }

    /// Copies gradients accumulated in `g` back onto the parameters.
    pub fn harvest(&mut self, g: &Graph, bound: &Bound) {
        for (name, var) in &bound.vars {
            if let Some(grad) = g.grad(*var) {
                if let Some(t) = self.entries.get_mut(name) {
                    t.accumulate_grad(grad);
                }
            }
        }
    }

    /// Every parameter must carry a gradient; names the first one that does
    /// not.
    pub fn require_grads(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if t.grad().is_none() {
                return Err(Error::MissingGrad { name: name.clone() });
            }
        }
        Ok(())
    }
}

/// Graph variables for one bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }
}
