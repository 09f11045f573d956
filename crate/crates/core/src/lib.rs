//! Hierarchical Bayesian relevance vector machine with global-local shrinkage
//! priors over kernel regression, plus Monte-Carlo tooling for checking its
//! posterior contraction behavior.

pub mod bench;
pub mod diagnostics;
pub mod error;
pub mod gibbs;
pub mod gig;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod oracle;
pub mod prior;
pub mod quadrature;
pub mod rng;
pub mod slice;
pub mod stats;

pub use error::{Result, RvmError};
