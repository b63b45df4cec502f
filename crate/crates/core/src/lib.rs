pub mod cli;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod phantom;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
