pub mod attention;
pub mod dagger;
pub mod encoder;
pub mod env;
pub mod episode;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod policy;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
