//! Memory-pinned video diffusion world model at desk scale.

pub mod backbone;
pub mod checkpoint;
pub mod clip;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod rollout;
pub mod stcm;
pub mod toyroad;
pub mod trainer;

pub use clip::Clip;
pub use error::{Error, Result};
