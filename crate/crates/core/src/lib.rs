//! Learning co-sparse analysis operators, optionally with separable
//! (Kronecker) structure, by geometric stochastic gradient descent on
//! products of oblique manifolds.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod io;
pub mod objective;
pub mod oblique;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod proptests;

pub use error::{Error, Result};
