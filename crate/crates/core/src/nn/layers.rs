use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{affine_forward, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Negative-side slope of every leaky-ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Affine layer `x·W + b` backed by two parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weights: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let (weights, bias) = store.add_affine(name, fan_in, fan_out, rng);
        Self { weights, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let w = tape.param(store, self.weights);
        let b = tape.param(store, self.bias);
        tape.affine(input, w, b)
    }

    pub fn apply(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        affine_forward(input, store.get(self.weights).value(), store.get(self.bias).value())
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.weights).value().rows()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.get(self.weights).value().cols()
    }
}

/// Stack of affine layers with leaky-ReLU between them.
///
/// With `activate_output` the last layer is activated too (used for the
/// backbone, whose output is the latent representation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Affine>,
    activate_output: bool,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first: `[in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activate_output: bool,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Affine::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activate_output }
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let mut x = input;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last || self.activate_output {
                x = tape.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out(store))
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in(store))
    }
}
