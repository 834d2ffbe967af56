pub mod agent;
pub mod analysis;
pub mod config;
pub mod env;
pub mod error;
pub mod generator;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod synthesis;

pub use error::{Error, Result};
