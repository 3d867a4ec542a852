//! Curriculum training: density draws, memory-masked noising, the weighted
//! denoising loss, clipped Adam updates and per-phase checkpoints.

pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wmlab_tensor::{Element, Tape, TensorError};

use crate::backbone::{ConditionSet, Model};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::diffusion::{total_loss, DenoisePrediction, LossWeights, MemoryMaskedBatch, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::noise::{derive_seed, keyed_rng, NoiseStream};
use crate::stcm::{check_alpha_set, curriculum_schedule, memory_len, next_batch, BatchPlan, CurriculumPhase, TrainingExample};
use crate::toyroad::ClipSource;

pub use optim::{clip_grad_norm, global_norm, Adam, AdamConfig};

const TAG_STEP: u64 = 0x7_4A1_u64;
const TAG_NOISE: u64 = 0x7_0153_u64;
const TAG_DATA: u64 = 0x7_DA7A_u64;

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Window length of each curriculum phase, in original-rate frames.
    pub curriculum: Vec<usize>,
    /// Frames times batch size, shared by every phase.
    pub frame_budget: usize,
    pub phase_steps: Vec<usize>,
    pub alpha_set: Vec<usize>,
    /// Memory span in original-rate frames.
    pub memory_span: usize,
    /// Decay rate of the per-frame loss weights.
    pub lambda: f64,
    pub optimizer: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub cond_dropout: f64,
    /// Extra checkpoint every this many steps; 0 keeps only phase ends.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            curriculum: vec![8, 16, 32],
            // two clips per step in the 32-frame phase; with one, a single
            // near-clean timestep draw dominates the loss of that step
            frame_budget: 64,
            phase_steps: vec![200, 150, 150],
            alpha_set: vec![1, 2],
            memory_span: 4,
            lambda: 2.0,
            optimizer: AdamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            cond_dropout: 0.1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be finite and >= 0, got {}", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            out.push(format!("optimizer betas must lie in [0, 1), got {} and {}", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) {
            out.push(format!("optimizer eps must be positive, got {}", o.eps));
        }
        if !(self.grad_clip > 0.0) {
            out.push(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            out.push(format!("cond_dropout must lie in [0, 1), got {}", self.cond_dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if let Err(e) = curriculum_schedule(&self.curriculum, self.frame_budget, &self.phase_steps) {
            out.push(e.to_string());
        }
        for &frames in &self.curriculum {
            if let Err(e) = check_alpha_set(frames, &self.alpha_set) {
                out.push(format!("phase of {frames} frames: {e}"));
                continue;
            }
            for &a in &self.alpha_set {
                match memory_len(a, self.memory_span) {
                    Ok(m) if m == 0 || m >= frames / (a * a) => out.push(format!(
                        "memory span {} gives {m} memory frames of {} at alpha {a} in the {frames}-frame phase",
                        self.memory_span,
                        frames / (a * a)
                    )),
                    Ok(_) => {}
                    Err(e) => out.push(e.to_string()),
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(config_err!("{}", p.join("; ")))
        }
    }

    pub fn phases(&self) -> Result<Vec<CurriculumPhase>> {
        curriculum_schedule(&self.curriculum, self.frame_budget, &self.phase_steps)
    }

    pub fn total_steps(&self) -> usize {
        self.phase_steps.iter().sum()
    }

    fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            seed: derive_seed(self.seed, &[TAG_DATA]),
            alpha_set: self.alpha_set.clone(),
            memory_span: self.memory_span,
        }
    }
}

/// The schedule training and sampling share.
pub fn default_schedule(t_max: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_max, 1e-4, 0.02)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Mean over items of the weight-normalized loss, before the update.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub alphas: BTreeMap<usize, usize>,
}

/// Loss and parameter gradients for one example. The loss is the weighted
/// per-frame sum divided by the weight total. Non-finite values anywhere in
/// the forward or backward pass surface as [`Error::NonFiniteLoss`].
pub fn example_gradients(
    model: &Model<f32>,
    ex: &TrainingExample<f32>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    step: usize,
    item: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    example_gradients_inner(model, ex, cfg, schedule, step, item).map_err(|e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            phase: 0,
            alpha: ex.draw.alpha,
            detail: format!("{op} produced a non-finite value on clip {}", ex.clip_index),
        },
        other => other,
    })
}

fn example_gradients_inner(
    model: &Model<f32>,
    ex: &TrainingExample<f32>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    step: usize,
    item: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let mut rng = keyed_rng(cfg.seed, &[TAG_STEP, step as u64, item as u64]);
    let noise = NoiseStream::new(derive_seed(cfg.seed, &[TAG_NOISE]));
    let batch = MemoryMaskedBatch::sample(
        ex.clip.frames.clone(),
        ex.partition,
        schedule,
        &mut rng,
        &noise,
        &[step as u64, item as u64],
    )?;
    let cond = ConditionSet {
        text_tokens: ex.text_tokens.clone(),
        commands: ex.commands.clone(),
        fps: ex.clip.fps,
        height: ex.clip.height(),
        width: ex.clip.width(),
        null: rng.random::<f64>() < cfg.cond_dropout,
    };
    let plan = ex.draw.rope_plan(model.config().rope_base)?;
    let out = model.forward(&p, &batch.xt, &batch.t, &cond, &plan)?;
    let (m, f) = (ex.partition.memory(), ex.partition.future());
    let pred = DenoisePrediction {
        eps_hat: out.eps_hat.slice(0, m, f)?,
        v_hat: out.v_hat.slice(0, m, f)?,
    };
    let weights = LossWeights::new(&ex.partition, cfg.lambda)?;
    let loss = total_loss(&batch, &pred, &weights, schedule)?.scale(1.0 / weights.total())?;
    let value = loss.to_tensor().item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            phase: 0,
            alpha: ex.draw.alpha,
            detail: format!("loss {value} on clip {} at t {}", ex.clip_index, batch.t[m]),
        });
    }
    let grads = tape.backward(loss)?;
    let g = p.vars().iter().map(|v| grads.get_or_zero(*v).to_f64_vec()).collect();
    Ok((value, g))
}

/// One optimizer step over `batch`: per-item gradients, averaged in item
/// order, clipped, then applied.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam,
    batch: &[TrainingExample<f32>],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    step: usize,
    phase: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(config_err!("empty training batch"));
    }
    let shared: &Model<f32> = model;
    let per: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| example_gradients(shared, ex, cfg, schedule, step, i))
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::NonFiniteLoss { step, alpha, detail, .. } => Error::NonFiniteLoss {
                step,
                phase,
                alpha,
                detail,
            },
            other => other,
        })?;
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().expect("batch is nonempty");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            phase,
            alpha: batch[0].draw.alpha,
            detail: format!("gradient norm {grad_norm}"),
        });
    }
    adam.update(model.params_mut().tensors_mut(), &grads)?;
    let mut alphas = BTreeMap::new();
    for ex in batch {
        *alphas.entry(ex.draw.alpha).or_insert(0) += 1;
    }
    Ok(StepStats {
        loss: loss / n,
        grad_norm,
        alphas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        step: usize,
        phase: usize,
        frames: usize,
        /// Batch items per density scale, keyed by the scale in decimal.
        alphas: BTreeMap<String, usize>,
        loss: f64,
        grad_norm: f64,
        seconds: f64,
    },
    PhaseEnd {
        phase: usize,
        step: usize,
        frames: usize,
        checkpoint: Option<String>,
    },
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

fn checkpoint_meta(model: &Model<f32>, cfg: &TrainConfig, source: &dyn ClipSource, hash: &str, step: usize, phase: usize, frames: usize) -> CheckpointMeta {
    let (h, w, _) = source.base_dims();
    CheckpointMeta {
        model: model.config().clone(),
        config_hash: hash.to_owned(),
        step,
        phase,
        frames,
        memory_span: cfg.memory_span,
        height: h,
        width: w,
        fps: source.fps(),
    }
}

/// Runs every phase in order on the same weights and optimizer state. With
/// `output`, appends one log line per step and per phase end and writes a
/// checkpoint at each phase end. `on_event` sees each event with the model
/// as it stands at that point.
pub fn run_curriculum(
    model: &mut Model<f32>,
    source: &dyn ClipSource,
    cfg: &TrainConfig,
    output: Option<&RunOutput>,
    on_event: &mut dyn FnMut(&LogEvent, &Model<f32>),
) -> Result<RunSummary> {
    cfg.validate()?;
    let phases = cfg.phases()?;
    let schedule = default_schedule(model.config().t_max)?;
    let mut adam = Adam::new(cfg.optimizer, model.params().tensors());
    let plan = cfg.batch_plan();
    let mut log = match output {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.dir.join(LOG_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut emit = |event: &LogEvent, model: &Model<f32>| -> Result<()> {
        if let Some((file, path)) = log.as_mut() {
            let line = serde_json::to_string(event).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_event(event, model);
        Ok(())
    };
    let start = Instant::now();
    let mut summary = RunSummary {
        losses: Vec::new(),
        checkpoints: Vec::new(),
        seconds: 0.0,
    };
    let mut step = 0;
    for (pi, phase) in phases.iter().enumerate() {
        for local in 0..phase.steps {
            let batch = next_batch::<f32>(phase, pi, local, source, &plan)?;
            let stats = train_step(model, &mut adam, &batch, cfg, &schedule, step, pi)?;
            summary.losses.push(stats.loss);
            emit(
                &LogEvent::Step {
                    step,
                    phase: pi,
                    frames: phase.frames,
                    alphas: stats.alphas.iter().map(|(a, n)| (a.to_string(), *n)).collect(),
                    loss: stats.loss,
                    grad_norm: stats.grad_norm,
                    seconds: start.elapsed().as_secs_f64(),
                },
                model,
            )?;
            step += 1;
            if let (Some(o), true) = (output, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                let path = o.dir.join(format!("step{step:06}.idck"));
                save_checkpoint(&path, model, &checkpoint_meta(model, cfg, source, &o.config_hash, step, pi, phase.frames))?;
                summary.checkpoints.push(path);
            }
        }
        let checkpoint = match output {
            Some(o) => {
                let path = o.dir.join(format!("phase{pi}_frames{}.idck", phase.frames));
                save_checkpoint(&path, model, &checkpoint_meta(model, cfg, source, &o.config_hash, step, pi, phase.frames))?;
                summary.checkpoints.push(path.clone());
                Some(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            }
            None => None,
        };
        emit(
            &LogEvent::PhaseEnd {
                phase: pi,
                step,
                frames: phase.frames,
                checkpoint,
            },
            model,
        )?;
    }
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Trailing mean of `window` values ending at index `end` (inclusive).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let lo = (end + 1).saturating_sub(window);
    let s = &values[lo..=end];
    s.iter().sum::<f64>() / s.len() as f64
}

/// Path of the final phase checkpoint a run writes.
pub fn final_checkpoint(dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let last = cfg.curriculum.len().saturating_sub(1);
    dir.join(format!("phase{last}_frames{}.idck", cfg.curriculum.last().copied().unwrap_or(0)))
}
