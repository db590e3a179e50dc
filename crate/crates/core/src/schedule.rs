//! Noise schedule, forward (noising) process and generic reverse step.
//!
//! Timesteps are 1-indexed: `t` runs over `{1, ..., T}`. The reverse
//! transition variance is fixed (not learned) at `(1 - alpha_t) I`, hence
//! `sigma_t = sqrt(1 - alpha_t)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Which coefficient multiplies the noise-corrected mean.
///
/// `Standard` uses `1/sqrt(alpha_t)` (the usual DDPM posterior mean);
/// `AsPrinted` reproduces the `1/sqrt(1 - alpha_t)` variant that appears
/// in some algorithm listings, kept behind a flag for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanVariant {
    #[default]
    Standard,
    AsPrinted,
}

impl NoiseSchedule {
    /// Build a schedule from explicit per-step retention factors.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::config("schedule needs at least one step".to_string()));
        }
        if let Some(bad) = alpha.iter().find(|a| !(0.0 < **a && **a < 1.0)) {
            return Err(Error::config(format!("alpha {bad} outside (0,1)")));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = alpha.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(NoiseSchedule { alpha, alpha_bar, sigma })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        // construction rejects empty schedules
        false
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.alpha.len() {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.alpha.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }
}

/// Linear interpolation of `alpha_t` from `alpha_first` at `t = 1` down to
/// `alpha_last` at `t = T`, endpoints exact.
pub fn make_linear_schedule(t_len: usize, alpha_first: f64, alpha_last: f64) -> Result<NoiseSchedule> {
    if t_len == 0 {
        return Err(Error::config("chain length T must be at least 1".to_string()));
    }
    for a in [alpha_first, alpha_last] {
        if !(0.0 < a && a < 1.0) {
            return Err(Error::config(format!("alpha endpoint {a} outside (0,1)")));
        }
    }
    if alpha_last > alpha_first {
        return Err(Error::config(format!(
            "alpha_last {alpha_last} must not exceed alpha_first {alpha_first}"
        )));
    }
    let alphas = (1..=t_len)
        .map(|t| {
            if t == 1 {
                alpha_first
            } else if t == t_len {
                alpha_last
            } else {
                let frac = (t - 1) as f64 / (t_len - 1) as f64;
                alpha_first + frac * (alpha_last - alpha_first)
            }
        })
        .collect();
    NoiseSchedule::from_alphas(alphas)
}

/// Forward noising: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// Differentiable with respect to `x0` (and `eps`).
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let abar = sched.alpha_bar(t)?;
    x0.scale(abar.sqrt()).add(&eps.scale((1.0 - abar).sqrt()))
}

/// Reverse-transition mean given a noise prediction.
pub fn posterior_mean(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    posterior_mean_with(MeanVariant::Standard, x_t, eps_hat, t, sched)
}

pub fn posterior_mean_with(
    variant: MeanVariant,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let alpha = sched.alpha(t)?;
    let abar = sched.alpha_bar(t)?;
    let noise_coef = (1.0 - alpha) / (1.0 - abar).sqrt();
    let outer = match variant {
        MeanVariant::Standard => 1.0 / alpha.sqrt(),
        MeanVariant::AsPrinted => 1.0 / (1.0 - alpha).sqrt(),
    };
    Ok(x_t.sub(&eps_hat.scale(noise_coef))?.scale(outer))
}

/// One reverse-chain step: `posterior_mean + sigma_t z`.
///
/// The caller must pass `z = 0` at `t = 1` so the final step is
/// deterministic.
pub fn reverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    z: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    reverse_step_with(MeanVariant::Standard, x_t, eps_hat, z, t, sched)
}

pub fn reverse_step_with(
    variant: MeanVariant,
    x_t: &Tensor,
    eps_hat: &Tensor,
    z: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mean = posterior_mean_with(variant, x_t, eps_hat, t, sched)?;
    mean.add(&z.scale(sched.sigma(t)?))
}
