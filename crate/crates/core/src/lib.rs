pub mod container;
pub mod data;
pub mod deepkkt;
pub mod eval;
mod error;
pub mod nn;
pub mod optim;
pub mod svm;

pub use error::{Error, Result};
