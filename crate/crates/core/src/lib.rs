pub mod autodiff;
pub mod compensation_head;
pub mod config;
pub mod dataset;
pub mod encoder_bank;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod mode_experts;
pub mod model;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
