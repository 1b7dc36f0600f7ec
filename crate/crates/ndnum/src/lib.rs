//! Dense `f64` tensors and a minimal reverse-mode gradient engine.
//!
//! ```
//! use ndnum::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod composite;
pub mod error;
pub mod fragment;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_multi, GradCheckReport, Probes};
pub use graph::{Gradients, Graph, OpKind, SortPermutation, Var};
pub use tensor::Tensor;
