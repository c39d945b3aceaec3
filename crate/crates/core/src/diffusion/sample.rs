//! Unconditional DDIM sampling.

use ndtape::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{gaussian, NoiseSchedule};
use crate::error::{NimbusError, Result};

/// Anything that predicts the added noise of a standardized latent.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor>;

    /// Tape version. The default treats the prediction as a constant, so
    /// gradients only see the explicit `θ_t` term of the clean estimate.
    fn predict_var(&self, x: &Var, t: usize) -> Result<Var> {
        Ok(x.tape().constant(self.predict(x.value(), t)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdimConfig {
    pub steps: usize,
    pub stride: usize,
    pub eta: f64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            stride: 10,
            eta: 0.0,
        }
    }
}

impl DdimConfig {
    /// Visited timesteps, descending, each paired with its successor
    /// (`0` at the end). Starts at `start` when given, else at `steps·stride`.
    pub fn timesteps(&self, sched: &NoiseSchedule, start: Option<usize>) -> Result<Vec<(usize, usize)>> {
        if self.steps == 0 || self.stride == 0 || self.steps * self.stride > sched.len() {
            return Err(NimbusError::Config(format!(
                "ddim steps {} x stride {} exceeds T = {}",
                self.steps,
                self.stride,
                sched.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(NimbusError::Config(format!("eta {} outside [0,1]", self.eta)));
        }
        let top = self.steps * self.stride;
        let k = start.unwrap_or(top);
        if k == 0 || k > sched.len() {
            return Err(NimbusError::Contract(format!("start level {k} outside 1..={}", sched.len())));
        }
        let mut out = Vec::new();
        let mut t = k;
        while t > 0 {
            let prev = t.saturating_sub(self.stride);
            out.push((t, prev));
            t = prev;
        }
        Ok(out)
    }
}

/// Reverse process from pure noise of `shape`, or from `start = (θ_k, k)`.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &DdimConfig,
    shape: &[usize],
    rng: &mut impl Rng,
    start: Option<(Tensor, usize)>,
) -> Result<Tensor> {
    let (mut x, k) = match start {
        Some((x, k)) => (x, Some(k)),
        None => (gaussian(shape, rng), None),
    };
    for (t, prev) in cfg.timesteps(sched, k)? {
        let eps = model.predict(&x, t)?;
        let x0 = sched.predict_x0(&x, t, &eps)?;
        let z = if cfg.eta > 0.0 {
            gaussian(x.shape(), rng)
        } else {
            Tensor::zeros(x.shape())
        };
        x = sched.ddim_step(&x0, &eps, t, prev, cfg.eta, &z);
        if !x.all_finite() {
            return Err(NimbusError::Numerical(format!("non-finite latent at t = {t}")));
        }
    }
    Ok(x)
}

/// Returns the exact noise that maps a known clean latent to any `θ_t`.
pub struct OracleDenoiser {
    pub x0: Tensor,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let a = self.schedule.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x
            .data()
            .iter()
            .zip(self.x0.data())
            .map(|(&xt, &x0)| ((xt as f64 - sa * x0 as f64) / sn) as f32)
            .collect();
        Ok(Tensor::new(x.shape(), data)?)
    }
}
