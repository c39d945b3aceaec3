//! Variance schedule and the closed-form forward/reverse algebra.

use ndtape::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-β DDPM schedule. Index `t` runs over `0..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let big_t = config.steps;
        if big_t < 2 || !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(NimbusError::Config(format!("invalid noise schedule {config:?}")));
        }
        let betas: Vec<f64> = (0..big_t)
            .map(|i| config.beta_start + (config.beta_end - config.beta_start) * i as f64 / (big_t - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(big_t + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(Self {
            config,
            betas,
            alpha_bar,
        })
    }

    pub fn linear() -> Self {
        Self::new(ScheduleConfig::default()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.config.steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// DDIM noise level for the jump `t -> t_prev`.
    pub fn ddim_sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        let (a, ap) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        eta * ((1.0 - ap) / (1.0 - a) * (1.0 - a / ap)).max(0.0).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.steps {
            return Err(NimbusError::Contract(format!("timestep {t} outside 1..={}", self.config.steps)));
        }
        Ok(())
    }

    /// `√ᾱ_t θ0 + √(1-ᾱ_t) ε`.
    pub fn noise_with(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| (sa * x as f64 + sn * e as f64) as f32)
            .collect();
        Ok(Tensor::new(x0.shape(), data)?)
    }

    /// Draws ε and returns `(θ_t, ε)`.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        let eps = gaussian(x0.shape(), rng);
        Ok((self.noise_with(x0, t, &eps)?, eps))
    }

    /// `(θ_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
    pub fn predict_x0(&self, xt: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = xt
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| ((x as f64 - sn * e as f64) / sa) as f32)
            .collect();
        Ok(Tensor::new(xt.shape(), data)?)
    }

    /// One DDIM update from `t` to `t_prev` given the clean estimate, the
    /// predicted noise and fresh noise `z` (ignored when `σ = 0`).
    pub fn ddim_step(&self, x0: &Tensor, eps: &Tensor, t: usize, t_prev: usize, eta: f64, z: &Tensor) -> Tensor {
        let ap = self.alpha_bar(t_prev);
        let sigma = self.ddim_sigma(t, t_prev, eta);
        let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
        let sap = ap.sqrt();
        let data = (0..x0.len())
            .map(|i| {
                let mut v = sap * x0.data()[i] as f64 + dir * eps.data()[i] as f64;
                if sigma > 0.0 {
                    v += sigma * z.data()[i] as f64;
                }
                v as f32
            })
            .collect();
        Tensor::new(x0.shape(), data).unwrap()
    }
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Per-channel affine map between raw latents `[C,H,W]` and the unit-scale
/// space the diffusion model works in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(latents: &[Tensor]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| NimbusError::Contract("no latents to standardize".into()))?;
        let c = first.shape()[0];
        let hw = first.len() / c;
        let mut s1 = vec![0.0f64; c];
        let mut s2 = vec![0.0f64; c];
        for l in latents {
            if l.shape() != first.shape() {
                return Err(NimbusError::Contract("latents differ in shape".into()));
            }
            for (ch, plane) in l.data().chunks_exact(hw).enumerate() {
                for &v in plane {
                    s1[ch] += v as f64;
                    s2[ch] += (v as f64).powi(2);
                }
            }
        }
        let n = (latents.len() * hw) as f64;
        let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
        let std = (0..c)
            .map(|ch| ((s2[ch] / n - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    fn map(&self, x: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Tensor {
        let c = self.mean.len();
        let hw = x.len() / c;
        Tensor::from_fn(x.shape(), |i| {
            let ch = (i / hw) % c;
            f(x.data()[i], self.mean[ch], self.std[ch])
        })
    }

    pub fn forward(&self, raw: &Tensor) -> Tensor {
        self.map(raw, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, z: &Tensor) -> Tensor {
        self.map(z, |v, m, s| v * s + m)
    }
}
