//! Dense numeric kernel: tensors, a reverse-mode tape, the layer building
//! blocks used by the model, and the optimizer.

mod adam;
mod dense;
mod gradcheck;
pub mod nn;
mod params;
mod rng;
mod sparse;
mod tape;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use dense::{matmul, Tensor};
pub use gradcheck::{analytic_gradients, grad_check, grad_check_against, GradCheckConfig, GradCheckReport};
pub use params::{Parameter, ParameterStore};
pub use rng::Rng;
pub use sparse::Csr;
pub use tape::{conv1d_output_len, elu, relu, sigmoid, softmax_last, Gradients, Tape, Var};

/// Row-wise softmax of a tensor over its last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_last(logits)
}

#[cfg(test)]
mod tests;
