//! Per-frame denoising losses and the memory-decay weighting.

use wmlab_tensor::{Element, Tensor, Var};

use super::masking::{FramePartition, MemoryMaskedBatch};
use super::schedule::NoiseSchedule;
use crate::error::{contract_err, Result};

/// Model output for the future segment: predicted noise and the squashed
/// variance-interpolation coefficient, both `(F, C, H, W)`.
#[derive(Debug, Clone, Copy)]
pub struct DenoisePrediction<'t, T: Element> {
    pub eps_hat: Var<'t, T>,
    pub v_hat: Var<'t, T>,
}

/// `e^(-lambda * t_norm)`.
pub fn memory_weight(t_norm: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t_norm) {
        return Err(contract_err!("normalized frame distance {t_norm} outside [0, 1]"));
    }
    if !(lambda >= 0.0) {
        return Err(contract_err!("decay rate must be >= 0, got {lambda}"));
    }
    Ok((-lambda * t_norm).exp())
}

/// Weights for every future frame of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    lambda: f64,
    weights: Vec<f64>,
}

impl LossWeights {
    pub fn new(partition: &FramePartition, lambda: f64) -> Result<Self> {
        let weights = (0..partition.future())
            .map(|k| memory_weight(partition.t_norm(k), lambda))
            .collect::<Result<_>>()?;
        Ok(Self { lambda, weights })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Posterior `q(x_{t-1} | x_t, x_0)` mean and variance.
pub fn posterior_params<T: Element>(
    x0_hat: &Tensor<T>,
    xt: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor<T>, f64)> {
    let (c0, ct) = schedule.posterior_mean_coefs(t)?;
    let (c0, ct) = (T::from_f64_lossy(c0), T::from_f64_lossy(ct));
    let mu = x0_hat.zip_map(xt, "posterior_mean", |a, b| c0 * a + ct * b)?;
    Ok((mu, schedule.posterior_variance(t)?))
}

/// Elementwise KL between diagonal Gaussians given means and log variances.
pub fn normal_kl(mean_q: f64, logvar_q: f64, mean_p: f64, logvar_p: f64) -> f64 {
    0.5 * (-1.0 + logvar_p - logvar_q + (logvar_q - logvar_p).exp() + (mean_q - mean_p).powi(2) * (-logvar_p).exp())
}

fn frame_column<T: Element>(values: impl IntoIterator<Item = f64>) -> Result<Tensor<T>> {
    let v: Vec<f64> = values.into_iter().collect();
    Ok(Tensor::from_f64([v.len(), 1, 1, 1], &v)?)
}

fn check_future_shape<T: Element>(what: &str, v: &Var<'_, T>, want: &[usize]) -> Result<()> {
    if v.shape() != want {
        return Err(contract_err!("{what} shape {:?} does not match future segment {:?}", v.shape(), want));
    }
    Ok(())
}

/// Mean squared error per frame, `(F,)`.
pub fn mse_loss<'t, T: Element>(eps: &Var<'t, T>, eps_hat: &Var<'t, T>) -> Result<Var<'t, T>> {
    let d = eps.sub(eps_hat)?;
    if d.shape() != eps.shape() || eps.shape().len() != 4 {
        return Err(contract_err!("mse shapes {:?} vs {:?}", eps.shape(), eps_hat.shape()));
    }
    Ok(d.square()?.mean(&[1, 2, 3], false)?)
}

/// KL between the true posterior and the model's reverse step, averaged over
/// each frame's elements, `(F,)`. Gradients reach `v_hat` only.
pub fn vb_loss<'t, T: Element>(
    pred: &DenoisePrediction<'t, T>,
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    let tape = pred.eps_hat.tape();
    let shape = x0.shape().to_vec();
    if shape.len() != 4 || xt.shape() != shape.as_slice() || t.len() != shape[0] {
        return Err(contract_err!("vb inputs disagree: x0 {:?}, xt {:?}, {} timesteps", shape, xt.shape(), t.len()));
    }
    check_future_shape("eps_hat", &pred.eps_hat, &shape)?;
    check_future_shape("v_hat", &pred.v_hat, &shape)?;
    let mut c0 = Vec::with_capacity(t.len());
    let mut ct = Vec::with_capacity(t.len());
    let mut rx = Vec::with_capacity(t.len());
    let mut re = Vec::with_capacity(t.len());
    let mut log_beta = Vec::with_capacity(t.len());
    let mut log_post = Vec::with_capacity(t.len());
    for &ti in t {
        let (a, b) = schedule.posterior_mean_coefs(ti)?;
        let ab = schedule.alpha_bar(ti);
        c0.push(a);
        ct.push(b);
        rx.push(1.0 / ab.sqrt());
        re.push((1.0 / ab - 1.0).sqrt());
        log_beta.push(schedule.beta(ti).ln());
        log_post.push(schedule.posterior_log_variance_clipped(ti)?);
    }
    let c0 = frame_column::<T>(c0)?;
    let ct = frame_column::<T>(ct)?;
    let from_xt = xt.zip_map(&ct, "vb", |a, c| a * c)?;
    let mean_q = tape.constant(
        x0.zip_map(&c0, "vb", |a, c| a * c)?
            .zip_map(&from_xt, "vb", |a, b| a + b)?,
    );
    let xt_v = tape.constant(xt.clone());
    let x0_hat = xt_v
        .mul(&tape.constant(frame_column(rx)?))?
        .sub(&pred.eps_hat.detach().mul(&tape.constant(frame_column(re)?))?)?;
    let mean_p = x0_hat
        .mul(&tape.constant(c0))?
        .add(&xt_v.mul(&tape.constant(ct))?)?;
    let log_q = tape.constant(frame_column::<T>(log_post.iter().copied())?);
    let span = tape.constant(frame_column::<T>(log_beta.iter().zip(&log_post).map(|(b, p)| b - p))?);
    let log_p = pred.v_hat.mul(&span)?.add(&tape.constant(frame_column(log_post)?))?;
    // 0.5 (-1 + lp - lq + e^(lq - lp) + (mq - mp)^2 e^(-lp))
    let var_ratio = log_q.sub(&log_p)?.exp()?;
    let dist = mean_q.sub(&mean_p)?.square()?.mul(&log_p.neg()?.exp()?)?;
    let kl = log_p
        .sub(&log_q)?
        .add(&var_ratio)?
        .add(&dist)?
        .add_scalar(-1.0)?
        .scale(0.5)?;
    Ok(kl.mean(&[1, 2, 3], false)?)
}

/// Per-frame loss terms for the future segment of one clip.
#[derive(Debug, Clone, Copy)]
pub struct FrameLosses<'t, T: Element> {
    pub mse: Var<'t, T>,
    pub vb: Var<'t, T>,
}

pub fn frame_losses<'t, T: Element>(
    batch: &MemoryMaskedBatch<T>,
    pred: &DenoisePrediction<'t, T>,
    schedule: &NoiseSchedule,
) -> Result<FrameLosses<'t, T>> {
    if batch.partition.is_all_memory() {
        return Err(contract_err!("clip has no future frames to train on"));
    }
    let tape = pred.eps_hat.tape();
    let eps = tape.constant(batch.eps.clone());
    check_future_shape("eps_hat", &pred.eps_hat, batch.eps.shape())?;
    let mse = mse_loss(&eps, &pred.eps_hat)?;
    let vb = vb_loss(pred, &batch.future_x0()?, &batch.future_xt()?, batch.future_t(), schedule)?;
    Ok(FrameLosses { mse, vb })
}

/// Weighted sum over future frames of `mse + vb`.
pub fn total_loss<'t, T: Element>(
    batch: &MemoryMaskedBatch<T>,
    pred: &DenoisePrediction<'t, T>,
    weights: &LossWeights,
    schedule: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    let terms = frame_losses(batch, pred, schedule)?;
    weighted_sum(&terms, weights)
}

pub fn weighted_sum<'t, T: Element>(terms: &FrameLosses<'t, T>, weights: &LossWeights) -> Result<Var<'t, T>> {
    let tape = terms.mse.tape();
    if weights.weights().len() != terms.mse.shape()[0] {
        return Err(contract_err!(
            "{} weights for {} future frames",
            weights.weights().len(),
            terms.mse.shape()[0]
        ));
    }
    let w = tape.constant(Tensor::from_f64([weights.weights().len()], weights.weights())?);
    Ok(terms.mse.add(&terms.vb)?.mul(&w)?.sum_all()?)
}
