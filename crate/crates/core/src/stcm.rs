//! Information-density sampling and the expanding temporal-window curriculum.
//!
//! Each training example trades frames for pixels: at scale `alpha` the clip
//! is rendered `alpha` times larger per side and only every `alpha^2`-th frame
//! of the window is kept, so the token count and the covered time span stay
//! fixed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wmlab_tensor::Element;

use crate::backbone::{Command, SkipRopePlan};
use crate::clip::{bytes_to_unit, Clip};
use crate::diffusion::FramePartition;
use crate::error::{config_err, Error, Result};
use crate::noise::keyed_rng;
use crate::toyroad::{tokenize, ClipSource};

/// Base geometry and frame rate of the training clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMeta {
    pub fps: f64,
    pub base_h: usize,
    pub base_w: usize,
    /// Window length, in original-rate frames, that a draw covers.
    pub base_l: usize,
}

impl ClipMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) || self.base_h == 0 || self.base_w == 0 || self.base_l == 0 {
            return Err(config_err!("clip meta must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityDraw {
    pub alpha: usize,
    pub height: usize,
    pub width: usize,
    pub l_curr: usize,
    pub offset: usize,
    /// Original-rate indices within the window, stride `alpha^2`.
    pub indices: Vec<usize>,
}

impl DensityDraw {
    /// The draw for a fixed scale and offset.
    pub fn new(meta: &ClipMeta, alpha: usize, offset: usize) -> Result<Self> {
        meta.validate()?;
        let stride = alpha * alpha;
        if alpha == 0 || !meta.base_l.is_multiple_of(stride) {
            return Err(config_err!("window of {} frames is not divisible by alpha^2 = {stride}", meta.base_l));
        }
        if offset >= stride {
            return Err(config_err!("offset {offset} outside [0, {stride})"));
        }
        let l_curr = meta.base_l / stride;
        Ok(Self {
            alpha,
            height: meta.base_h * alpha,
            width: meta.base_w * alpha,
            l_curr,
            offset,
            indices: (0..l_curr).map(|k| offset + k * stride).collect(),
        })
    }

    pub fn stride(&self) -> usize {
        self.alpha * self.alpha
    }

    /// Frame rate of the kept frames.
    pub fn effective_fps(&self, meta: &ClipMeta) -> f64 {
        meta.fps / self.stride() as f64
    }

    /// Rotary positions are the kept frames' original indices.
    pub fn rope_plan(&self, rope_base: f64) -> Result<SkipRopePlan> {
        SkipRopePlan::new(self.indices.clone(), rope_base)
    }
}

/// Checks that every scale in `alpha_set` divides the window and is usable.
pub fn check_alpha_set(base_l: usize, alpha_set: &[usize]) -> Result<()> {
    if alpha_set.is_empty() {
        return Err(config_err!("alpha set is empty"));
    }
    for &a in alpha_set {
        if a == 0 || !base_l.is_multiple_of(a * a) {
            return Err(config_err!("alpha {a}: alpha^2 must divide the {base_l}-frame window"));
        }
    }
    Ok(())
}

/// Uniform scale from `alpha_set`, then uniform offset in `[0, alpha^2)`.
pub fn draw_density(rng: &mut impl Rng, meta: &ClipMeta, alpha_set: &[usize]) -> Result<DensityDraw> {
    check_alpha_set(meta.base_l, alpha_set)?;
    let alpha = alpha_set[rng.random_range(0..alpha_set.len())];
    let offset = rng.random_range(0..alpha * alpha);
    DensityDraw::new(meta, alpha, offset)
}

/// Memory frames at scale `alpha` for a memory span of `span` original frames.
pub fn memory_len(alpha: usize, span: usize) -> Result<usize> {
    let stride = alpha * alpha;
    if alpha == 0 || !span.is_multiple_of(stride) {
        return Err(config_err!("memory span {span} is not divisible by alpha^2 = {stride}"));
    }
    Ok(span / stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPhase {
    pub frames: usize,
    pub batch: usize,
    pub steps: usize,
}

/// One phase per target window. Batch size is `frame_budget / frames`, so
/// frames times batch is the same in every phase.
pub fn curriculum_schedule(targets: &[usize], frame_budget: usize, steps: &[usize]) -> Result<Vec<CurriculumPhase>> {
    if targets.is_empty() {
        return Err(config_err!("curriculum needs at least one phase"));
    }
    if steps.len() != targets.len() {
        return Err(config_err!("{} step budgets for {} phases", steps.len(), targets.len()));
    }
    if let Some(w) = targets.windows(2).find(|w| w[1] < w[0]) {
        return Err(config_err!("curriculum frames must not decrease: {} then {}", w[0], w[1]));
    }
    targets
        .iter()
        .zip(steps)
        .map(|(&frames, &steps)| {
            if frames == 0 || !frame_budget.is_multiple_of(frames) || frame_budget < frames {
                return Err(config_err!("frame budget {frame_budget} is not a multiple of {frames} frames"));
            }
            Ok(CurriculumPhase {
                frames,
                batch: frame_budget / frames,
                steps,
            })
        })
        .collect()
}

/// Phase index and step within it for global optimizer step `step`, or
/// `None` once every phase is exhausted.
pub fn phase_at(phases: &[CurriculumPhase], step: usize) -> Option<(usize, usize)> {
    let mut start = 0;
    for (i, p) in phases.iter().enumerate() {
        if step < start + p.steps {
            return Some((i, step - start));
        }
        start += p.steps;
    }
    None
}

/// Sampling parameters shared by every batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub alpha_set: Vec<usize>,
    /// Memory span in original-rate frames.
    pub memory_span: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    /// `(l_curr, C, H*alpha, W*alpha)` in `[-1, 1]` at the effective rate.
    pub clip: Clip<T>,
    pub draw: DensityDraw,
    pub partition: FramePartition,
    pub text_tokens: Vec<usize>,
    pub commands: Vec<Command>,
    pub clip_index: usize,
    /// First original-rate frame of the window.
    pub window_start: usize,
}

/// Prepares item `item` of step `step` in phase `phase_index`.
pub fn prepare_example<T: Element>(
    phase: &CurriculumPhase,
    phase_index: usize,
    step: usize,
    item: usize,
    source: &dyn ClipSource,
    plan: &BatchPlan,
) -> Result<TrainingExample<T>> {
    let (base_h, base_w, clip_l) = source.base_dims();
    if source.is_empty() {
        return Err(Error::Data("dataset has no clips".into()));
    }
    if clip_l < phase.frames {
        return Err(Error::Data(format!(
            "clips have {clip_l} frames, phase needs {}",
            phase.frames
        )));
    }
    let meta = ClipMeta {
        fps: source.fps(),
        base_h,
        base_w,
        base_l: phase.frames,
    };
    let mut rng = keyed_rng(plan.seed, &[phase_index as u64, step as u64, item as u64]);
    let draw = draw_density(&mut rng, &meta, &plan.alpha_set)?;
    let memory = memory_len(draw.alpha, plan.memory_span)?;
    let partition = FramePartition::new(draw.l_curr, memory)?;
    if partition.is_all_memory() {
        return Err(config_err!(
            "memory of {memory} frames leaves nothing to predict in {} frames",
            draw.l_curr
        ));
    }
    let clip_index = rng.random_range(0..source.len());
    let window_start = rng.random_range(0..=clip_l - phase.frames);
    let absolute: Vec<usize> = draw.indices.iter().map(|i| window_start + i).collect();
    let loaded = source.load(clip_index, draw.height, draw.width, &absolute)?;
    let data: Vec<T> = loaded.pixels.iter().map(|&b| bytes_to_unit(b)).collect();
    let frames = wmlab_tensor::Tensor::new(loaded.shape.to_vec(), data)?;
    Ok(TrainingExample {
        clip: Clip::new(frames, draw.effective_fps(&meta))?,
        text_tokens: tokenize(&loaded.caption)?,
        commands: loaded.commands,
        draw,
        partition,
        clip_index,
        window_start,
    })
}

/// Every item of one step. Items are independent, so they are prepared in
/// parallel; each has its own keyed stream.
pub fn next_batch<T: Element>(
    phase: &CurriculumPhase,
    phase_index: usize,
    step: usize,
    source: &dyn ClipSource,
    plan: &BatchPlan,
) -> Result<Vec<TrainingExample<T>>> {
    use rayon::prelude::*;
    (0..phase.batch)
        .into_par_iter()
        .map(|item| prepare_example(phase, phase_index, step, item, source, plan))
        .collect()
}
