pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod residual;
pub mod seeding;
pub mod segmentation;
pub mod stats;

pub use error::{Error, Result};
