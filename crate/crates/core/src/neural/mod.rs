//! Differentiable building blocks with hand-written gradients.
//!
//! Everything is `f64`. Layers keep their weights in a [`ParamSet`] and
//! accumulate gradients into it during `backward`; [`adam_step`] consumes
//! those gradients. [`finite_diff_grad`] is the independent reference used to
//! check every backward pass.

mod adam;
pub mod gradcheck;
mod gru;
mod ops;
mod params;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use gru::{Gru, GruGrads, GruStep};
pub use ops::{
    dense, dense_backward, maxpool_time, maxpool_time_backward, maxpool_time_forward, mse, relu,
    relu_backward, sigmoid, sigmoid_backward, tanh, tanh_backward, Dense, DenseGrads,
    MaxPoolCache,
};
pub use params::{init_uniform, Param, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("optimizer state does not match the parameter set")]
    UninitializedState,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;
