//! Autoregressive long-horizon generation. Each chunk pins the last `M`
//! generated frames as clean memory and samples `L - M` new ones after them.

use wmlab_tensor::{Element, Tensor};

use crate::backbone::{Command, ConditionSet, Model, ModelDenoiser, SkipRopePlan};
use crate::clip::Clip;
use crate::diffusion::{sample_clip, Denoiser, FramePartition, NoiseSchedule, SamplerConfig};
use crate::error::{contract_err, Result};
use crate::noise::NoiseStream;

/// The growing frame buffer of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState<T> {
    frames: Vec<T>,
    /// `(C, H, W)`.
    frame_shape: [usize; 3],
    memory: usize,
    window: usize,
    iteration: usize,
    fps: f64,
}

impl<T: Element> RolloutState<T> {
    /// Starts from `condition`, which must hold exactly `memory` frames.
    pub fn init(condition: &Clip<T>, memory: usize, window: usize) -> Result<Self> {
        if memory == 0 {
            return Err(contract_err!("image-conditioned rollout needs at least one memory frame"));
        }
        if window <= memory {
            return Err(contract_err!("window {window} leaves nothing to generate after {memory} memory frames"));
        }
        if condition.len() != memory {
            return Err(contract_err!(
                "condition has {} frames, rollout memory is {memory}",
                condition.len()
            ));
        }
        Ok(Self {
            frames: condition.frames.data().to_vec(),
            frame_shape: [condition.channels(), condition.height(), condition.width()],
            memory,
            window,
            iteration: 0,
            fps: condition.fps,
        })
    }

    /// Text-only start: the first chunk is sampled with no memory at all and
    /// counts as the first iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn bootstrap(
        denoiser: &impl Denoiser<T>,
        frame_shape: [usize; 3],
        memory: usize,
        window: usize,
        fps: f64,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
        noise: &NoiseStream,
    ) -> Result<Self> {
        if memory == 0 || window <= memory {
            return Err(contract_err!("rollout needs 0 < memory {memory} < window {window}"));
        }
        let [c, h, w] = frame_shape;
        let partition = FramePartition::new(window, 0)?;
        let empty = Tensor::new([0, c, h, w], Vec::new())?;
        let chunk = sample_clip(denoiser, &empty, &partition, schedule, sampler, noise, &[0])?;
        Ok(Self {
            frames: chunk.into_data(),
            frame_shape,
            memory,
            window,
            iteration: 1,
            fps,
        })
    }

    fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Index of the first frame the next chunk covers.
    pub fn next_chunk_start(&self) -> usize {
        self.len() - self.memory
    }

    /// The last `M` frames, which pin the next chunk.
    pub fn memory_window(&self) -> Result<Tensor<T>> {
        let [c, h, w] = self.frame_shape;
        let start = self.next_chunk_start() * self.frame_len();
        Ok(Tensor::new([self.memory, c, h, w], self.frames[start..].to_vec())?)
    }

    /// Samples one chunk behind the memory window and appends its new frames.
    /// Noise for iteration `k` comes from `noise` under stream key `[k]`.
    pub fn step(
        &mut self,
        denoiser: &impl Denoiser<T>,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
        noise: &NoiseStream,
    ) -> Result<()> {
        let partition = FramePartition::new(self.window, self.memory)?;
        let memory = self.memory_window()?;
        let chunk = sample_clip(
            denoiser,
            &memory,
            &partition,
            schedule,
            sampler,
            noise,
            &[self.iteration as u64],
        )?;
        let n = self.frame_len();
        self.frames.extend_from_slice(&chunk.data()[self.memory * n..]);
        self.iteration += 1;
        Ok(())
    }

    /// Runs `k` more chunks; `make` builds the denoiser for the chunk that
    /// starts at the given frame index.
    pub fn run<D: Denoiser<T>>(
        &mut self,
        k: usize,
        mut make: impl FnMut(usize) -> Result<D>,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
        noise: &NoiseStream,
    ) -> Result<Clip<T>> {
        for _ in 0..k {
            let d = make(self.next_chunk_start())?;
            self.step(&d, schedule, sampler, noise)?;
        }
        self.to_clip()
    }

    pub fn to_clip(&self) -> Result<Clip<T>> {
        let [c, h, w] = self.frame_shape;
        Clip::new(Tensor::new([self.len(), c, h, w], self.frames.clone())?, self.fps)
    }
}

/// `M + k (L - M)`.
pub fn rollout_frames(memory: usize, window: usize, iterations: usize) -> usize {
    memory + iterations * (window - memory)
}

/// Conditioning of a rollout: caption tokens plus a command per output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutCondition {
    pub text_tokens: Vec<usize>,
    /// Repeats its last entry when shorter than the rollout.
    pub commands: Vec<Command>,
    pub fps: f64,
}

impl RolloutCondition {
    /// The command for each of frames `start..start + n`.
    pub fn commands_at(&self, start: usize, n: usize) -> Vec<Command> {
        let last = self.commands.last().copied().unwrap_or(Command::Straight);
        (start..start + n)
            .map(|i| self.commands.get(i).copied().unwrap_or(last))
            .collect()
    }

    /// The model denoiser for the chunk starting at frame `start`.
    pub fn denoiser<'m, T: Element>(
        &self,
        model: &'m Model<T>,
        start: usize,
        window: usize,
        height: usize,
        width: usize,
    ) -> Result<ModelDenoiser<'m, T>> {
        Ok(ModelDenoiser {
            model,
            cond: ConditionSet {
                text_tokens: self.text_tokens.clone(),
                commands: self.commands_at(start, window),
                fps: self.fps,
                height,
                width,
                null: false,
            },
            plan: SkipRopePlan::contiguous(window, model.config().rope_base)?,
        })
    }
}

/// Full model rollout: from `condition` frames when given, else from a
/// text-only first chunk; `iterations` chunks in total for text-only starts
/// and `iterations` chunks after the condition otherwise.
#[allow(clippy::too_many_arguments)]
pub fn rollout_model<T: Element>(
    model: &Model<T>,
    condition: Option<&Clip<T>>,
    frame_shape: [usize; 3],
    memory: usize,
    window: usize,
    iterations: usize,
    cond: &RolloutCondition,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    noise: &NoiseStream,
) -> Result<Clip<T>> {
    if iterations == 0 {
        return Err(contract_err!("rollout needs at least one iteration"));
    }
    let [_, h, w] = frame_shape;
    let (mut state, remaining) = match condition {
        Some(c) => (RolloutState::init(c, memory, window)?, iterations),
        None => {
            let d = cond.denoiser(model, 0, window, h, w)?;
            let s = RolloutState::bootstrap(&d, frame_shape, memory, window, cond.fps, schedule, sampler, noise)?;
            (s, iterations - 1)
        }
    };
    state.run(
        remaining,
        |start| cond.denoiser(model, start, window, h, w),
        schedule,
        sampler,
        noise,
    )
}
