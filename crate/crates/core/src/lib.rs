//! Quasi-likelihood estimation and inference for high-dimensional linear
//! mixed-effects models.

pub mod cli;
pub mod debias;
pub mod error;
pub mod io;
pub mod lasso;
pub mod model;
pub mod proxy;
pub mod sim;
pub mod varcomp;

pub use error::{QlmmError, Result};
