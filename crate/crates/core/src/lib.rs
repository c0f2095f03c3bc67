pub mod baseline;
pub mod cohort;
pub mod dataset;
pub mod dynamics;
pub mod evaluation;
mod error;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
