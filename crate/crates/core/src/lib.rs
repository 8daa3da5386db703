pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fsio;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Result, TabsError};
