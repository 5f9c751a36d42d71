pub mod error;
pub mod seed;
pub mod sim;
pub mod flexibility;
pub mod env;
pub mod neural;
pub mod estimator;
pub mod policy;

pub use error::{Error, Result};
