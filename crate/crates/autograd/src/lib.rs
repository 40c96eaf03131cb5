//! Value-semantic f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations on [`Var`] handles. [`Graph::grad`] runs
//! the reverse sweep; with `create_graph = true` the produced gradients are
//! graph nodes themselves, so gradients of gradients (and deeper) work the
//! same way as first derivatives.
//!
//! ```
//! use dsv_autograd::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::scalar(2.0).unwrap());
//! let y = x.mul(x).unwrap().mul(x).unwrap(); // x³
//! let dy = g.grad(y, &[x], true).unwrap()[0];
//! let d2y = g.grad(dy, &[x], false).unwrap()[0];
//! assert_eq!(dy.item().unwrap(), 12.0);
//! assert_eq!(d2y.item().unwrap(), 12.0);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod ops;
pub mod sparse;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use ops::eval;
pub use tensor::Tensor;
