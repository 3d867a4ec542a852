use crate::error::{config_err, contract_err, Result};

/// Variance schedule tables indexed by timestep `0..=t_max`.
///
/// Index 0 is the identity step: `alpha_bar(0) = 1` and `beta(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(config_err!("t_max must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let betas = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds tables from `beta_1..beta_T`; each must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(config_err!("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(config_err!("beta {b} outside (0, 1)"));
        }
        let mut beta = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        beta.extend(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        alpha_bar.push(1.0);
        for &a in &alpha[1..] {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(contract_err!("timestep {t} outside [0, {}]", self.t_max()));
        }
        Ok(())
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.require_posterior(t)?;
        Ok(self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]))
    }

    /// Log posterior variance with the t = 1 value replaced by t = 2's, so the
    /// log stays finite. Single-step schedules fall back to `beta_1`.
    pub fn posterior_log_variance_clipped(&self, t: usize) -> Result<f64> {
        self.require_posterior(t)?;
        let v = if t == 1 {
            if self.t_max() >= 2 {
                self.posterior_variance(2)?
            } else {
                self.beta[1]
            }
        } else {
            self.posterior_variance(t)?
        };
        Ok(v.ln())
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.require_posterior(t)?;
        let denom = 1.0 - self.alpha_bar[t];
        Ok((
            self.alpha_bar[t - 1].sqrt() * self.beta[t] / denom,
            self.alpha[t].sqrt() * (1.0 - self.alpha_bar[t - 1]) / denom,
        ))
    }

    fn require_posterior(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(contract_err!("no posterior step exists at t = 0"));
        }
        self.check_step(t)
    }

    /// Schedule over a strictly increasing subset of timesteps, with betas
    /// recomputed so each kept step reproduces the original `alpha_bar`.
    pub fn respaced(&self, kept: &[usize]) -> Result<Self> {
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(kept.len());
        let mut last = 0;
        for &t in kept {
            if t <= last || t > self.t_max() {
                return Err(contract_err!("respacing steps must be increasing within [1, {}]", self.t_max()));
            }
            betas.push(1.0 - self.alpha_bar[t] / prev);
            prev = self.alpha_bar[t];
            last = t;
        }
        Self::from_betas(betas)
    }
}

/// `n` timesteps spread uniformly over `[1, t_max]`, in increasing order.
pub fn strided_timesteps(t_max: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(config_err!("sampling needs at least one step"));
    }
    if n > t_max {
        return Err(config_err!("cannot take {n} sampling steps from a {t_max}-step schedule"));
    }
    if n == 1 {
        return Ok(vec![t_max]);
    }
    let mut steps: Vec<usize> = (0..n)
        .map(|i| 1 + ((i * (t_max - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    steps.dedup();
    Ok(steps)
}
