//! Decoder-only sparse mixture-of-experts forecaster.
//!
//! Series are cut into patches, normalized per patch, embedded, run through
//! a causal transformer whose feed-forward layers are routed experts, and
//! projected to point and quantile forecasts for the next window.

pub mod backbone;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod input;
pub mod loss;
pub mod model;
pub mod output;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{FincastError, Result};
pub use model::FinCast;
