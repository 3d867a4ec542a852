//! Memory/future partitioning and the memory-masked forward noising.

use rand::Rng;
use wmlab_tensor::{Element, Tensor};

use super::schedule::NoiseSchedule;
use crate::error::{contract_err, Result};
use crate::noise::NoiseStream;

/// Splits an `len`-frame clip into `memory` clean frames followed by
/// `len - memory` frames to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePartition {
    len: usize,
    memory: usize,
}

impl FramePartition {
    pub fn new(len: usize, memory: usize) -> Result<Self> {
        if len == 0 {
            return Err(contract_err!("partition needs at least one frame"));
        }
        if memory > len {
            return Err(contract_err!("memory length {memory} exceeds clip length {len}"));
        }
        Ok(Self { len, memory })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn future(&self) -> usize {
        self.len - self.memory
    }

    pub fn is_all_memory(&self) -> bool {
        self.memory == self.len
    }

    /// Zero-based frame index `i` is a memory frame.
    pub fn is_memory(&self, i: usize) -> bool {
        i < self.memory
    }

    /// Distance of future frame `k` (0-based within the future segment) from
    /// the memory segment, normalized to [0, 1].
    pub fn t_norm(&self, k: usize) -> f64 {
        let f = self.future();
        if f <= 1 {
            0.0
        } else {
            k as f64 / (f - 1) as f64
        }
    }
}

/// Per-frame timesteps: zero on memory frames, one shared uniform draw from
/// `[1, t_max]` on every future frame.
pub fn sample_timesteps(rng: &mut impl Rng, partition: &FramePartition, t_max: usize) -> Vec<usize> {
    let k = rng.random_range(1..=t_max);
    (0..partition.len())
        .map(|i| if partition.is_memory(i) { 0 } else { k })
        .collect()
}

fn check_timesteps(partition: &FramePartition, t: &[usize], schedule: &NoiseSchedule) -> Result<()> {
    if t.len() != partition.len() {
        return Err(contract_err!("{} timesteps for {} frames", t.len(), partition.len()));
    }
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_step(ti)?;
        if partition.is_memory(i) && ti != 0 {
            return Err(contract_err!("memory frame {i} carries timestep {ti}; memory frames must use t = 0"));
        }
    }
    Ok(())
}

/// Forward-noises the future frames of `x0` (`(L, C, H, W)`); memory frames
/// are copied through untouched. `eps` covers the future frames only.
pub fn noise_frames<T: Element>(
    x0: &Tensor<T>,
    partition: &FramePartition,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_timesteps(partition, t, schedule)?;
    let shape = x0.shape();
    if shape.len() != 4 || shape[0] != partition.len() {
        return Err(contract_err!("x0 shape {:?} does not match a {}-frame partition", shape, partition.len()));
    }
    let frame = shape[1] * shape[2] * shape[3];
    if eps.len() != partition.future() * frame {
        return Err(contract_err!(
            "noise has {} values, expected {} future frames of {frame}",
            eps.len(),
            partition.future()
        ));
    }
    let mut out = x0.data().to_vec();
    for i in partition.memory()..partition.len() {
        let ab = schedule.alpha_bar(t[i]);
        let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
        let k = i - partition.memory();
        let dst = &mut out[i * frame..(i + 1) * frame];
        let src = &eps.data()[k * frame..(k + 1) * frame];
        for (d, &e) in dst.iter_mut().zip(src) {
            *d = a * *d + b * e;
        }
    }
    Ok(Tensor::new(shape, out)?)
}

/// One training clip after memory-masked noising.
#[derive(Debug, Clone)]
pub struct MemoryMaskedBatch<T> {
    pub x0: Tensor<T>,
    pub partition: FramePartition,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
    pub xt: Tensor<T>,
}

impl<T: Element> MemoryMaskedBatch<T> {
    pub fn new(
        x0: Tensor<T>,
        partition: FramePartition,
        t: Vec<usize>,
        eps: Tensor<T>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let xt = noise_frames(&x0, &partition, &t, &eps, schedule)?;
        Ok(Self {
            x0,
            partition,
            t,
            eps,
            xt,
        })
    }

    /// Draws the shared timestep from `rng` and per-frame noise from `noise`
    /// keyed by `(key.., frame)`.
    pub fn sample(
        x0: Tensor<T>,
        partition: FramePartition,
        schedule: &NoiseSchedule,
        rng: &mut impl Rng,
        noise: &NoiseStream,
        key: &[u64],
    ) -> Result<Self> {
        let t = sample_timesteps(rng, &partition, schedule.t_max());
        let shape = x0.shape().to_vec();
        let frame: usize = shape[1..].iter().product();
        let mut eps = Vec::with_capacity(partition.future() * frame);
        for i in partition.memory()..partition.len() {
            let mut k = key.to_vec();
            k.push(i as u64);
            eps.extend(noise.normal(&k, frame).into_iter().map(T::from_f64_lossy));
        }
        let mut eps_shape = shape;
        eps_shape[0] = partition.future();
        let eps = Tensor::new(eps_shape, eps)?;
        Self::new(x0, partition, t, eps, schedule)
    }

    /// Future-frame slices of `x0` and `xt`.
    pub fn future_x0(&self) -> Result<Tensor<T>> {
        Ok(self.x0.slice(0, self.partition.memory(), self.partition.future())?)
    }

    pub fn future_xt(&self) -> Result<Tensor<T>> {
        Ok(self.xt.slice(0, self.partition.memory(), self.partition.future())?)
    }

    pub fn future_t(&self) -> &[usize] {
        &self.t[self.partition.memory()..]
    }
}
