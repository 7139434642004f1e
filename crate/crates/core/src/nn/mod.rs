//! Minimal differentiable-computation layer.

mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{Affine, Mlp, LEAKY_SLOPE};
pub use optim::{sgd_step, OptimizerConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{
    affine_forward, binary_cross_entropy, sigmoid, sigmoid_scalar, softmax_cross_entropy_value,
    Tape, Var, BCE_CLIP,
};
pub use tensor::{argmax, softmax_rows, Tensor};

/// Mean softmax cross-entropy against class indices.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> crate::Result<f64> {
    let weights = alloc::vec![1.0; labels.len()];
    softmax_cross_entropy_value(logits, labels, &weights).map(|(loss, _)| loss)
}
