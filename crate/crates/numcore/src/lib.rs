//! Numeric kernel: dense `f64` tensors, a reverse-mode tape, neural layers,
//! Gaussian primitives, gradient checking and a tensor blob format.

pub mod blob;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prob;
pub mod tensor;

pub use error::{NumError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
