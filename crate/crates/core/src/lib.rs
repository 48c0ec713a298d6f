//! Heteroscedastic relevance vector machine.
//!
//! Sparse kernel regression `y = Φw + ε` with an ARD Gaussian prior on the
//! weights and input-dependent noise `ε ~ N(0, e^{g(x)})`, where `g` is a
//! latent Gaussian process. Two trainers are provided: a collapsed
//! variational bound optimized over a reduced diagonal parameter
//! ([`vi::fit_vi`]) and expectation propagation on `g` ([`ep::fit_ep`]).
//! The homoscedastic RVM ([`rvm::fit_rvm`]) is included as a baseline.

// `!(a > b)` comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod cli;
pub mod ep;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod predict;
pub mod rvm;
pub mod vi;

pub use error::{HrvmError, Result};
