//! Minimal `f64` neural-network toolkit: dense tensors, a tape autograd,
//! convolution kernels, batch norm, Adam, and a binary parameter format.
//!
//! Batch-level loops run on rayon when the `parallel` feature is enabled
//! (the default) and sequentially otherwise; both produce identical bits.

pub mod gradcheck;
mod graph;
pub mod layers;
pub mod linalg;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, BufferUpdate, Gradients, Graph, Var};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Init, Linear};
pub use optim::{clip_grad_norm, Adam};
pub use params::{ParamEntry, ParamId, ParamRole, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed parameter file: {0}")]
    Format(String),
}
