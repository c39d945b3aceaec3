//! Diffusion posterior sampling with residual-normalized guidance.

use ndtape::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::measure::{Measurement, Prior};
use crate::diffusion::{gaussian, DdimConfig, NoisePredictor};
use crate::error::{NimbusError, Result};
use crate::monoplanar::LatentCode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpsConfig {
    /// Base guidance weight `ζ`; the per-step weight is `ζ·scale/‖r‖`.
    pub zeta: f64,
    pub scale: f64,
    pub ddim: DdimConfig,
    /// Guidance update norm is capped at this multiple of the DDIM step.
    pub clip_factor: f64,
    /// Consecutive non-finite guidance gradients tolerated before aborting.
    pub max_nonfinite: usize,
    /// Extra diffuse-denoise rounds after the first, each restarting from
    /// `restart_level`.
    pub restarts: usize,
    pub restart_level: usize,
}

impl Default for DpsConfig {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            scale: 1.0,
            ddim: DdimConfig {
                eta: 1.0,
                ..Default::default()
            },
            clip_factor: 10.0,
            max_nonfinite: 3,
            restarts: 0,
            restart_level: 500,
        }
    }
}

impl DpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(NimbusError::Config(format!("zeta {} outside [0, 1]", self.zeta)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) || !(self.clip_factor > 0.0) || self.max_nonfinite == 0 {
            return Err(NimbusError::Config(format!("invalid dps config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpsStep {
    pub t: usize,
    pub residual: f64,
    pub update_norm: f64,
    pub clipped: bool,
    pub nonfinite: bool,
}

#[derive(Clone, Debug)]
pub struct DpsResult {
    /// Standardized latent.
    pub z: Tensor,
    pub latent: LatentCode,
    pub log: Vec<DpsStep>,
}

impl DpsResult {
    pub fn clipped_steps(&self) -> usize {
        self.log.iter().filter(|s| s.clipped).count()
    }

    pub fn nonfinite_steps(&self) -> usize {
        self.log.iter().filter(|s| s.nonfinite).count()
    }
}

/// One guided reverse step from `t` to `prev`.
pub struct GuidedStep {
    pub next: Tensor,
    pub x0: Tensor,
    pub record: DpsStep,
}

pub fn guided_step(
    prior: &Prior,
    meas: &Measurement,
    zt: &Tensor,
    t: usize,
    prev: usize,
    zeta: f64,
    cfg: &DpsConfig,
    rng: &mut impl Rng,
) -> Result<GuidedStep> {
    let sched = &prior.model.schedule;
    let guided = zeta > 0.0;
    let tape = Tape::new();
    let x = tape.leaf(zt.clone(), guided);
    let a = sched.alpha_bar(t);
    let (eps, x0, grad, residual) = if guided {
        let eps = prior.model.predict_var(&x, t)?;
        let x0 = x.sub(&eps.scale((1.0 - a).sqrt() as f32)?)?.scale((1.0 / a.sqrt()) as f32)?;
        let loss = meas.data_loss(prior, &x0)?;
        let residual = (loss.item() as f64).max(0.0).sqrt();
        let mut g = tape.backward(&loss)?;
        let grad = g.take(&x);
        (eps.value().clone(), x0.value().clone(), Some(grad), residual)
    } else {
        let eps = prior.model.predict(zt, t)?;
        let x0 = sched.predict_x0(zt, t, &eps)?;
        (eps, x0, None, f64::NAN)
    };
    let noise = if cfg.ddim.eta > 0.0 {
        gaussian(zt.shape(), rng)
    } else {
        Tensor::zeros(zt.shape())
    };
    let mut next = sched.ddim_step(&x0, &eps, t, prev, cfg.ddim.eta, &noise);
    let mut record = DpsStep {
        t,
        residual,
        update_norm: 0.0,
        clipped: false,
        nonfinite: false,
    };
    if let Some(grad) = grad {
        if !grad.all_finite() || !residual.is_finite() {
            record.nonfinite = true;
        } else if residual > 0.0 {
            let weight = zeta * cfg.scale / residual;
            let mut norm = weight * grad.norm();
            let step = next
                .data()
                .iter()
                .zip(zt.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let cap = cfg.clip_factor * step;
            let mut w = weight;
            if norm > cap {
                w *= cap / norm;
                norm = cap;
                record.clipped = true;
            }
            next.axpy(-(w as f32), &grad)?;
            record.update_norm = norm;
        }
    }
    if !next.all_finite() {
        return Err(NimbusError::Numerical(format!("non-finite latent at t = {t}")));
    }
    Ok(GuidedStep { next, x0, record })
}

/// Reverse process from pure noise, or from `start = (θ_k, k)` in
/// standardized units, with guidance toward `meas`.
pub fn dps_sample(
    prior: &Prior,
    meas: &Measurement,
    cfg: &DpsConfig,
    rng: &mut impl Rng,
    start: Option<(Tensor, usize)>,
) -> Result<DpsResult> {
    cfg.validate()?;
    let sched = &prior.model.schedule;
    let shape = prior.model.latent_shape;
    let (mut z, k) = match start {
        Some((z, k)) => (z, Some(k)),
        None => (gaussian(&shape, rng), None),
    };
    if z.shape() != shape {
        return Err(NimbusError::Contract(format!("start latent {:?} is not {shape:?}", z.shape())));
    }
    let mut log = Vec::new();
    let mut rounds = vec![cfg.ddim.timesteps(sched, k)?];
    for _ in 0..cfg.restarts {
        rounds.push(cfg.ddim.timesteps(sched, Some(cfg.restart_level))?);
    }
    for (round, steps) in rounds.iter().enumerate() {
        if round > 0 {
            z = sched.forward_noise(&z, cfg.restart_level, rng)?.0;
        }
        let mut streak = 0;
        for &(t, prev) in steps {
            let s = guided_step(prior, meas, &z, t, prev, cfg.zeta, cfg, rng)?;
            if s.record.nonfinite {
                streak += 1;
                if streak >= cfg.max_nonfinite {
                    return Err(NimbusError::Numerical(format!(
                        "{streak} consecutive non-finite guidance gradients at t = {t}"
                    )));
                }
            } else {
                streak = 0;
            }
            log.push(s.record);
            z = s.next;
        }
    }
    let latent = prior.to_latent(&z)?;
    Ok(DpsResult { z, latent, log })
}
