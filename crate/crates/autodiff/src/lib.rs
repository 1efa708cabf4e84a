//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! ```
//! use imitate_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckError, GradCheckReport, InputReport};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
