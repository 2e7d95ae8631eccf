//! Category-wise influence vectors, performance-ceiling diagnostics and
//! LP+GA sample reweighting for small differentiable classifiers.

pub mod ceiling;
pub mod datamodel;
pub mod error;
pub mod harness;
pub mod influence;
pub mod pareto;
pub mod trainer;

pub use error::{Error, Result};
