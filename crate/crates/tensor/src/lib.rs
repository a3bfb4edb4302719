//! Minimal reverse-mode automatic differentiation for small
//! convolutional networks.
//!
//! A [`Graph`] records primitive applications on [`Var`] handles and
//! differentiates a scalar loss in one reverse sweep. Values live in
//! `f64` storage; the graph's [`Precision`] decides whether outputs are
//! rounded to 32-bit (training) or kept at 64-bit (gradient checks).
//!
//! ```
//! use prunas_tensor::{Graph, Precision, Tensor};
//!
//! let mut g = Graph::new(Precision::F64);
//! let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod tensor;

pub use conv::{Conv2dAttrs, ConvAlgo, ConvGeometry};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, primitive_suite};
pub use graph::{softmax_in_place, Attrs, BatchStats, Gradients, Graph, NormMode, Primitive, Record, Var};
pub use optim::{Adam, LrSchedule, MomentumSgd, Optimizer, ParamUpdate};
pub use tensor::{Precision, Tensor};
