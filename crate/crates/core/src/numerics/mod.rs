//! Dense tensors, reverse-mode differentiation, layers and Adam.

pub mod adam;
pub mod autodiff;
pub mod instrument;
pub mod linalg;
pub mod nn;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{backward, Gradients, Var};
pub use instrument::{measure, Measurement};
pub use nn::{LayerNorm, Linear, Mlp, ParamTree, TensorLike};
pub use tensor::{logsumexp, softplus, Tensor};
