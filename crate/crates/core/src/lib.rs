pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
