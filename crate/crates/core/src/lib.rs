//! Regularized p(x)-Laplacian solver with H² regularity diagnostics on
//! convex planar domains.

pub mod assembly;
pub mod error;
pub mod experiments;
pub mod expr;
pub mod geometry;
pub mod quadrature;
pub mod regularity;
pub mod solver;
pub mod varexp;

pub use error::{Error, NewtonFailure, Result};
