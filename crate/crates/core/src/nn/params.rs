use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::Tensor;
use crate::error::{bail, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    gradient: Tensor,
    momentum: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            gradient,
            momentum,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn gradient(&self) -> &Tensor {
        &self.gradient
    }

    pub fn momentum(&self) -> &Tensor {
        &self.momentum
    }

    pub(crate) fn gradient_mut(&mut self) -> &mut Tensor {
        &mut self.gradient
    }

    pub(crate) fn momentum_mut(&mut self) -> &mut Tensor {
        &mut self.momentum
    }

    /// Replace the value, keeping the shape; resets optimizer state.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if !value.same_shape(&self.value) {
            bail!(
                Dimension,
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            );
        }
        self.value = value;
        self.gradient = Tensor::zeros(self.value.shape());
        self.momentum = Tensor::zeros(self.value.shape());
        Ok(())
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Affine layer with Glorot-uniform weights `[fan_in, fan_out]` and zero bias.
    pub fn add_affine<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> (ParamId, ParamId) {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let w = self.add(
            alloc::format!("{name}.weight"),
            Tensor::matrix(fan_in, fan_out, weights).expect("shape by construction"),
        );
        let b = self.add(
            alloc::format!("{name}.bias"),
            Tensor::zeros(&[fan_out]),
        );
        (w, b)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }
}
