//! Sequential SGD, conventional synchronous distributed SGD (CSGD) and Layered
//! SGD (LSGD) over a from-scratch MLP, with deterministic rank-addressed
//! collectives and an analytic scaling cost model.
//!
//! The three executors produce the same iterates `w_t` when fed the same
//! minibatch sequence: distributed runs partition one global minibatch into
//! equal shards, and every reduction sums in a fixed, documented order.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod executors;
pub mod numerics;
pub mod optimizer;
pub mod par;
pub mod simulator;
pub mod transport;

pub use error::{Error, Result};
