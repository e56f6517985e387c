//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Build a [`Graph`], create leaves with [`Graph::param`] (differentiable)
//! or [`Graph::constant`], apply operations, then call [`Graph::backward`]
//! on a scalar to obtain [`Gradients`] for every parameter leaf.
//!
//! ```
//! use caforge_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![0.0, 0.0]));
//! let s = g.sigmoid(x);
//! let loss = g.sum(s);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.25, 0.25]);
//! ```

mod error;
mod graph;
mod init;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use init::{glorot_bound, glorot_uniform};
pub use optim::Adam;
pub use params::{Manifest, ParamStore, TensorEntry};
pub use tensor::Tensor;
