//! Core engine for evolving differentiable policy-learning losses.
//!
//! Everything here is pure computation over `alloc` collections: tensors and
//! reverse-mode autodiff, the policy / memory / loss networks, optimizers,
//! toy task families, the inner training loop and the evolution-strategies
//! outer loop. File formats, configuration parsing and the command line live
//! in the `epg` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is the NaN-rejecting form used by every validator
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod envs;
pub mod error;
pub mod innerloop;
pub mod nets;
pub mod optim;
pub mod outerloop;
pub mod rng;
pub mod sensitivity;

pub use error::{Error, Result};
