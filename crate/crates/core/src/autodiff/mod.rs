//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is declared once with symbolic input shapes, closed over an
//! output node into a [`Tape`], and then evaluated any number of times.
//! Shapes are checked while the graph is built, so a failing op reports the
//! node it would have become.
//!
//! ```
//! use epg_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(&[2]);
//! let sq = g.square(x).unwrap();
//! let y = g.sum(sq).unwrap();
//! let mut tape = g.finish(y);
//! let out = tape.forward(&[Tensor::vector(vec![1.0, 2.0])]).unwrap();
//! assert_eq!(out.item(), Some(5.0));
//! let grads = tape.backward(&Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads.get(0).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::{check_gradient, relative_error};
pub use graph::{Gradients, Graph, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
