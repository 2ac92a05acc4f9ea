pub mod cli;
pub mod config;
pub mod conformal;
pub mod dslob;
pub mod encoder;
pub mod error;
pub mod physics;
pub mod numcore;
pub mod rng;
pub mod sde;
pub mod symbolic;
pub mod train;

pub use error::{Error, Result};
