//! Minimal differentiable tensor engine: dense tensors, im2col convolutions,
//! a reverse-mode tape and the layer blocks the codec is built from.

pub mod conv;
pub mod factorized;
pub mod graph;
pub mod layers;
pub mod params;
pub mod special;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{derive_seed, Ctx, Init, ParamSpec, ParamStore};
pub use tensor::{Scalar, Tensor};
