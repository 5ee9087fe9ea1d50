//! Sensitivity analysis of models with dependent inputs: dependency models,
//! equivalent representations over independent variables, and pick-freeze
//! estimators of first-order and total dependent generalized indices.

pub mod cli;
pub mod depmodel;
pub mod empirical;
pub mod error;
pub mod linalg;
pub mod margins;
pub mod models;
pub mod representations;
pub mod sampling;
pub mod sensitivity;
pub mod special;

pub use error::{Error, Result};
