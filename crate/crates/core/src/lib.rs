//! Numerical laboratory for concavity properties of solutions to
//! anisotropic semilinear Dirichlet problems on convex planar domains.

pub mod concavity;
pub mod envelope;
pub mod error;
pub mod expr;
pub mod fields;
pub mod geometry;
pub mod harness;
pub mod hull;
pub mod solver;
pub mod verifier;

pub use error::{Error, Result};
