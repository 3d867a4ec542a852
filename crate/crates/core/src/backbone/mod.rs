mod condition;
mod embed;
mod model;
mod params;

pub use condition::{Command, ConditionSet};
pub use embed::{grid_embedding, patchify, sinusoid, unpatchify, SkipRopePlan};
pub use model::{Model, ModelConfig, ModelDenoiser, ModelOutput};
pub use params::{Bound, Init, ParamStore};
