//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! computed eagerly on construction, and [`Graph::backward`] walks the tape
//! in reverse to accumulate vector-Jacobian products into every node that
//! requires a gradient.
//!
//! ```
//! use u2u_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param("x", Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backprop(y).unwrap();
//! assert_eq!(grads["x"].data(), &[6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, EntryFailure, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var, MASK_FILL};
pub use tensor::{Real, Tensor};
