pub mod autodiff;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod nbody;
pub mod network;
pub mod properties;

pub use error::{Error, Result};
