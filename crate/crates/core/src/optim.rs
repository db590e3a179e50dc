//! Bias-corrected Adam over sets of parameter arrays.

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-5, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} must lie in [0,1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("adam eps {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// Optimiser moments for one parameter set; moment arrays mirror the
/// parameter shapes exactly, one shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<Array>,
    pub second_moment: Vec<Array>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            first_moment: shapes.iter().map(|s| Array::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Array::zeros(s)).collect(),
            step_count: 0,
        }
    }

    pub fn for_params(params: &[Array]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        AdamState::new(&shapes)
    }
}

/// One bias-corrected Adam update across `params`; increments the step
/// counter even when the learning rate is zero.
pub fn adam_step(
    params: &mut [Array],
    grads: &[Array],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for i in 0..params.len() {
        params[i].check_same_shape(&grads[i], "adam_step grad")?;
        params[i].check_same_shape(&state.first_moment[i], "adam_step moment")?;
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params[i].data_mut();
        for e in 0..p.len() {
            m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
            v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            p[e] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
