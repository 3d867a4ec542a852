mod loss;
mod masking;
mod sampler;
mod schedule;

pub use loss::{
    frame_losses, memory_weight, mse_loss, normal_kl, posterior_params, total_loss, vb_loss, weighted_sum,
    DenoisePrediction, FrameLosses, LossWeights,
};
pub use masking::{noise_frames, sample_timesteps, FramePartition, MemoryMaskedBatch};
pub use sampler::{sample_clip, Denoiser, SamplerConfig};
pub use schedule::{strided_timesteps, NoiseSchedule};
