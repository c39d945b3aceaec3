use ndtape::{Adam, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderParams, MonoplanarConfig};
use super::latent::LatentCode;
use crate::error::{NimbusError, Result};
use crate::rng;
use crate::volume::DenseGrid3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    /// Sample points per volume per step.
    pub batch: usize,
    pub lr_latent: f32,
    pub lr_decoder: f32,
    /// Cosine decay floor as a fraction of the initial learning rates.
    pub lr_floor: f32,
    /// Points per volume in the fixed evaluation set.
    pub eval_points: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 4096,
            lr_latent: 1e-2,
            lr_decoder: 1e-3,
            lr_floor: 0.05,
            eval_points: 128 * 1024,
            log_every: 500,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn lr_scale(&self, step: usize) -> f32 {
        let t = step as f32 / self.steps.max(1) as f32;
        self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitLogEntry {
    pub step: usize,
    /// Mean squared error on the fixed evaluation points, averaged over volumes.
    pub eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub decoder: DecoderParams,
    pub latents: Vec<LatentCode>,
    pub log: Vec<FitLogEntry>,
}

impl FitResult {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |e| e.eval_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.eval_loss)
    }
}

/// Per-voxel sampling weights concentrated on spatial detail of an initial field.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    extents: [usize; 3],
    weights: Vec<f64>,
    cdf: Vec<f64>,
}

impl SaliencyMap {
    /// Gradient magnitude of `field`, blurred by a 3³ box, normalized and
    /// mixed 50/50 with the uniform distribution.
    pub fn from_field(field: &DenseGrid3) -> Self {
        let e = field.extents();
        let [nx, ny, nz] = e;
        let at = |i: isize, j: isize, k: isize| {
            let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
            field.get(c(i, nx), c(j, ny), c(k, nz)) as f64
        };
        let mut grad = vec![0.0f64; field.len()];
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                for k in 0..nz as isize {
                    let gx = at(i + 1, j, k) - at(i - 1, j, k);
                    let gy = at(i, j + 1, k) - at(i, j - 1, k);
                    let gz = at(i, j, k + 1) - at(i, j, k - 1);
                    grad[field.index(i as usize, j as usize, k as usize)] =
                        0.5 * (gx * gx + gy * gy + gz * gz).sqrt();
                }
            }
        }
        let mut blur = vec![0.0f64; field.len()];
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let (mut s, mut n) = (0.0, 0.0);
                    for di in i.saturating_sub(1)..(i + 2).min(nx) {
                        for dj in j.saturating_sub(1)..(j + 2).min(ny) {
                            for dk in k.saturating_sub(1)..(k + 2).min(nz) {
                                s += grad[(di * ny + dj) * nz + dk];
                                n += 1.0;
                            }
                        }
                    }
                    blur[(i * ny + j) * nz + k] = s / n;
                }
            }
        }
        let total: f64 = blur.iter().sum();
        let uni = 1.0 / field.len() as f64;
        let weights: Vec<f64> = blur
            .iter()
            .map(|&b| if total > 0.0 { 0.5 * b / total + 0.5 * uni } else { uni })
            .collect();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { extents: e, weights, cdf }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    /// Draws a voxel by weight and jitters uniformly within its cell.
    pub fn sample(&self, r: &mut impl Rng) -> [f32; 3] {
        let u = r.random::<f64>() * self.cdf[self.cdf.len() - 1];
        let idx = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let [_, ny, nz] = self.extents;
        let ijk = [idx / (ny * nz), (idx / nz) % ny, idx % nz];
        std::array::from_fn(|a| {
            let n = self.extents[a];
            let h = 1.0 / (n - 1) as f32;
            (-1.0 + 2.0 * ijk[a] as f32 * h + r.random_range(-h..h)).clamp(-1.0, 1.0)
        })
    }
}

#[derive(Clone, Debug)]
pub enum Sampler {
    Uniform,
    Saliency(SaliencyMap),
}

impl Sampler {
    pub fn sample(&self, r: &mut impl Rng) -> [f32; 3] {
        match self {
            Sampler::Uniform => std::array::from_fn(|_| r.random_range(-1.0f32..=1.0)),
            Sampler::Saliency(m) => m.sample(r),
        }
    }
}

pub(crate) fn uniform_points(n: usize, keys: &[u64]) -> Vec<[f32; 3]> {
    let mut r = rng::stream(keys);
    (0..n).map(|_| Sampler::Uniform.sample(&mut r)).collect()
}

fn targets(v: &DenseGrid3, pts: &[[f32; 3]]) -> Tensor {
    Tensor::new(&[pts.len()], pts.iter().map(|&p| v.sample(p)).collect()).unwrap()
}

fn adam_with(lr: f32, n: usize) -> Vec<Adam> {
    (0..n).map(|_| Adam::new(lr)).collect()
}

/// MSE between decoded densities and trilinear samples of `v` at `pts`.
pub fn eval_loss(d: &DecoderParams, theta: &LatentCode, v: &DenseGrid3, pts: &[[f32; 3]]) -> Result<f64> {
    let mut se = 0.0f64;
    for chunk in pts.chunks(16 * 1024) {
        let pred = d.decode_points(theta, chunk)?;
        se += pred
            .iter()
            .zip(chunk)
            .map(|(&a, &p)| ((a - v.sample(p)) as f64).powi(2))
            .sum::<f64>();
    }
    Ok(se / pts.len() as f64)
}

fn check_finite(loss: f32, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NimbusError::Numerical(format!(
            "{what} diverged at step {step}: loss = {loss}"
        )))
    }
}

/// Jointly fits one shared decoder and a latent per volume.
pub fn fit_shared_decoder(
    volumes: &[DenseGrid3],
    config: &MonoplanarConfig,
    fit: &FitConfig,
) -> Result<FitResult> {
    if volumes.is_empty() {
        return Err(NimbusError::Contract("fit needs at least one volume".into()));
    }
    if let Some(v) = volumes.iter().find(|v| v.extents() != config.grid_extents) {
        return Err(NimbusError::Contract(format!(
            "volume extents {:?} differ from codec grid {:?}",
            v.extents(),
            config.grid_extents
        )));
    }
    let mut decoder = DecoderParams::init(config, fit.seed)?;
    let mut latents: Vec<LatentCode> = (0..volumes.len())
        .map(|i| config.random_latent(rng::mix(&[fit.seed, i as u64]), 0.1))
        .collect();
    let eval_pts: Vec<Vec<[f32; 3]>> = (0..volumes.len())
        .map(|i| uniform_points(fit.eval_points, &[fit.seed, i as u64, 0x4556]))
        .collect();
    let evaluate = |d: &DecoderParams, lats: &[LatentCode]| -> Result<f64> {
        let mut s = 0.0;
        for ((v, t), p) in volumes.iter().zip(lats).zip(&eval_pts) {
            s += eval_loss(d, t, v, p)?;
        }
        Ok(s / volumes.len() as f64)
    };
    let mut log = vec![FitLogEntry {
        step: 0,
        eval_loss: evaluate(&decoder, &latents)?,
    }];
    let n_dec = decoder.tensors_mut().len();
    let mut dec_opt = adam_with(fit.lr_decoder, 1).pop().unwrap();
    let mut lat_opt = adam_with(fit.lr_latent, volumes.len());
    for step in 0..fit.steps {
        let tape = Tape::new();
        let dv = decoder.on_tape(&tape, true)?;
        let thetas: Vec<_> = latents.iter().map(|l| tape.param(l.plane.clone())).collect();
        let mut total = None;
        for (vi, (v, th)) in volumes.iter().zip(&thetas).enumerate() {
            let pts = uniform_points(fit.batch, &[fit.seed, step as u64, vi as u64, 0x5452]);
            let plane = dv.upsample(th)?;
            let pred = dv.decode_points(&plane, &pts)?;
            let l = pred.mse(&targets(v, &pts))?;
            total = Some(match total {
                None => l,
                Some(t) => l.add(&t)?,
            });
        }
        let loss = total.unwrap().scale(1.0 / volumes.len() as f32)?;
        check_finite(loss.item(), step, "shared decoder fit")?;
        let grads = tape.backward(&loss)?;
        let dgrads: Vec<Tensor> = dv.leaves().iter().map(|v| grads.wrt(v)).collect();
        debug_assert_eq!(dgrads.len(), n_dec);
        let s = fit.lr_scale(step);
        dec_opt.lr = fit.lr_decoder * s;
        dec_opt.step(&mut decoder.tensors_mut(), &dgrads)?;
        for ((lat, th), opt) in latents.iter_mut().zip(&thetas).zip(&mut lat_opt) {
            opt.lr = fit.lr_latent * s;
            opt.step(&mut [&mut lat.plane], &[grads.wrt(th)])?;
        }
        if (step + 1) % fit.log_every.max(1) == 0 || step + 1 == fit.steps {
            let l = evaluate(&decoder, &latents)?;
            if !l.is_finite() {
                return Err(NimbusError::Numerical(format!(
                    "shared decoder fit diverged at step {}: eval loss {l}",
                    step + 1
                )));
            }
            log.push(FitLogEntry {
                step: step + 1,
                eval_loss: l,
            });
        }
    }
    Ok(FitResult { decoder, latents, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub lr_floor: f32,
    pub eval_points: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4096,
            lr: 1e-2,
            lr_floor: 0.05,
            eval_points: 32 * 1024,
            log_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    pub latent: LatentCode,
    pub log: Vec<FitLogEntry>,
    /// Training-batch loss at every step.
    pub batch_losses: Vec<f32>,
}

/// Latent-only gradient descent against a frozen decoder.
pub fn encode_volume(
    v: &DenseGrid3,
    decoder: &DecoderParams,
    init: &LatentCode,
    sampler: &Sampler,
    cfg: &EncodeConfig,
) -> Result<EncodeResult> {
    let eval_pts = uniform_points(cfg.eval_points, &[cfg.seed, 0x454E_4556]);
    let mut theta = init.clone();
    let mut log = vec![FitLogEntry {
        step: 0,
        eval_loss: eval_loss(decoder, &theta, v, &eval_pts)?,
    }];
    let mut opt = Adam::new(cfg.lr);
    let mut batch_losses = Vec::with_capacity(cfg.steps);
    let sched = FitConfig {
        steps: cfg.steps,
        lr_floor: cfg.lr_floor,
        ..FitConfig::default()
    };
    let mut r = rng::stream(&[cfg.seed, 0x454E_4342]);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let dv = decoder.on_tape(&tape, false)?;
        let th = tape.param(theta.plane.clone());
        let pts: Vec<[f32; 3]> = (0..cfg.batch).map(|_| sampler.sample(&mut r)).collect();
        let plane = dv.upsample(&th)?;
        let loss = dv.decode_points(&plane, &pts)?.mse(&targets(v, &pts))?;
        check_finite(loss.item(), step, "latent encoding")?;
        batch_losses.push(loss.item());
        let g = tape.backward(&loss)?.wrt(&th);
        opt.lr = cfg.lr * sched.lr_scale(step);
        opt.step(&mut [&mut theta.plane], &[g])?;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log.push(FitLogEntry {
                step: step + 1,
                eval_loss: eval_loss(decoder, &theta, v, &eval_pts)?,
            });
        }
    }
    Ok(EncodeResult {
        latent: theta,
        log,
        batch_losses,
    })
}
