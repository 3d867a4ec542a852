//! Memory-pinned ancestral sampling over a strided timestep subset.

use wmlab_tensor::{Element, Tensor};

use super::masking::FramePartition;
use super::schedule::{strided_timesteps, NoiseSchedule};
use crate::error::{config_err, contract_err, Result};
use crate::noise::NoiseStream;

/// Anything that predicts noise and the variance coefficient for a clip.
pub trait Denoiser<T: Element> {
    /// `xt` is `(L, C, H, W)` and `t` holds one timestep per frame. Returns
    /// `(eps_hat, v_hat)` for all `L` frames, `v_hat` already in [0, 1].
    fn predict(&self, xt: &Tensor<T>, t: &[usize], drop_condition: bool) -> Result<(Tensor<T>, Tensor<T>)>;
}

impl<T: Element, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn predict(&self, xt: &Tensor<T>, t: &[usize], drop_condition: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        (**self).predict(xt, t, drop_condition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 1.0,
            clip_denoised: true,
        }
    }
}

/// Generates the future segment of `partition` behind the memory frames in
/// `condition` (`(M, C, H, W)`). Memory frames are copied into the output and
/// never touched. Noise for frame `f` at reverse step `i` is drawn from
/// `noise` under key `(stream.., i, f)`; the initial draw uses `i = 0`.
pub fn sample_clip<T: Element>(
    model: &impl Denoiser<T>,
    condition: &Tensor<T>,
    partition: &FramePartition,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    noise: &NoiseStream,
    stream: &[u64],
) -> Result<Tensor<T>> {
    let cs = condition.shape();
    if cs.len() != 4 || cs[0] != partition.memory() {
        return Err(contract_err!(
            "condition shape {:?} must hold exactly {} memory frames",
            cs,
            partition.memory()
        ));
    }
    if partition.is_all_memory() {
        return Err(contract_err!("nothing to sample: every frame is memory"));
    }
    if !config.guidance.is_finite() {
        return Err(config_err!("guidance scale must be finite"));
    }
    let kept = strided_timesteps(schedule.t_max(), config.steps)?;
    let resp = schedule.respaced(&kept)?;
    let (m, len) = (partition.memory(), partition.len());
    let frame = cs[1] * cs[2] * cs[3];
    let shape = [len, cs[1], cs[2], cs[3]];

    let key = |step: usize, f: usize| {
        let mut k = stream.to_vec();
        k.extend([step as u64, f as u64]);
        k
    };
    let mut x: Vec<T> = condition.data().to_vec();
    for f in m..len {
        x.extend(noise.normal(&key(0, f), frame).into_iter().map(T::from_f64_lossy));
    }

    for i in (1..=kept.len()).rev() {
        let t_orig = kept[i - 1];
        let t: Vec<usize> = (0..len).map(|f| if f < m { 0 } else { t_orig }).collect();
        let xt = Tensor::new(shape, x.clone())?;
        let (eps, v) = if config.guidance == 1.0 {
            model.predict(&xt, &t, false)?
        } else {
            let (ec, vc) = model.predict(&xt, &t, false)?;
            let (eu, _) = model.predict(&xt, &t, true)?;
            let g = T::from_f64_lossy(config.guidance);
            (eu.zip_map(&ec, "guidance", |u, c| u + g * (c - u))?, vc)
        };
        if eps.shape() != shape || v.shape() != shape {
            return Err(contract_err!("denoiser returned {:?}/{:?}, expected {:?}", eps.shape(), v.shape(), shape));
        }
        let ab = resp.alpha_bar(i);
        let (rx, re) = (1.0 / ab.sqrt(), (1.0 / ab - 1.0).sqrt());
        let (c0, ct) = resp.posterior_mean_coefs(i)?;
        let (log_beta, log_post) = (resp.beta(i).ln(), resp.posterior_log_variance_clipped(i)?);
        for f in m..len {
            let z = if i > 1 {
                Some(noise.normal(&key(i, f), frame))
            } else {
                None
            };
            let range = f * frame..(f + 1) * frame;
            let (xs, es, vs) = (&mut x[range.clone()], &eps.data()[range.clone()], &v.data()[range]);
            for j in 0..frame {
                let xv = xs[j].as_f64();
                let mut x0 = rx * xv - re * es[j].as_f64();
                if config.clip_denoised {
                    x0 = x0.clamp(-1.0, 1.0);
                }
                let mut next = c0 * x0 + ct * xv;
                if let Some(z) = &z {
                    let vv = vs[j].as_f64();
                    let log_var = vv * log_beta + (1.0 - vv) * log_post;
                    next += (0.5 * log_var).exp() * z[j];
                }
                xs[j] = T::from_f64_lossy(next);
            }
        }
    }
    let out = Tensor::new(shape, x)?;
    if !out.is_finite() {
        return Err(contract_err!("sampler produced non-finite values"));
    }
    Ok(out)
}
