use rand::Rng;

use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` selects whether AdamW weight decay applies.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor.requiring_grad());
        self.decay.push(decay);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Linear weight `[fan_in, fan_out]`, uniform in `±1/sqrt(fan_in)`.
    pub fn add_linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        self.add_uniform(name, vec![fan_in, fan_out], bound, true, rng)
    }

    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f32, decay: bool, rng: &mut impl Rng) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data)?, decay)
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, value: f32) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value), false)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds gradients produced by [`super::Tape::param_grads`].
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f32>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f32 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
