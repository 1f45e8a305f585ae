pub mod chaos;
pub mod coercivity;
pub mod collision;
pub mod config;
pub mod experiment;
mod error;
pub mod kernel;
pub mod sg;

pub use error::{Error, Result};
