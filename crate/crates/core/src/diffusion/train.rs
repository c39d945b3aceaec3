//! ε-objective training.

use std::path::Path;

use ndtape::{Adam, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{gaussian, NoiseSchedule, Standardizer};
use super::unet::{random_t, DenoiserConfig, DenoiserParams, DiffusionModel};
use crate::cloudgen::Dihedral;
use crate::error::{NimbusError, Result};
use crate::monoplanar::LatentCode;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Cosine decay from `lr` to `lr·min_lr_ratio` over `steps`; 1 keeps it constant.
    pub min_lr_ratio: f32,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Stop once a logged running loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            lr: 2e-3,
            min_lr_ratio: 0.02,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.log_every == 0 || !(self.lr > 0.0 && self.lr.is_finite())
            || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(NimbusError::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Mean batch loss since the previous entry.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: DiffusionModel,
    pub log: Vec<TrainLogEntry>,
    pub steps_run: usize,
}

/// Every latent under all eight horizontal symmetries.
pub fn dihedral_augment(latents: &[LatentCode]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::with_capacity(latents.len() * 8);
    for l in latents {
        for d in Dihedral::all() {
            out.push(l.apply_dihedral(d)?);
        }
    }
    Ok(out)
}

fn stack(planes: &[&Tensor]) -> Result<Tensor> {
    let s = planes[0].shape();
    let mut data = Vec::with_capacity(planes.len() * planes[0].len());
    for p in planes {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[planes.len(), s[0], s[1], s[2]], data)?)
}

/// One optimizer over a denoiser; exposes raw steps with caller-chosen
/// inputs and targets.
pub struct Trainer {
    pub params: DenoiserParams,
    schedule: NoiseSchedule,
    opt: Adam,
}

impl Trainer {
    pub fn new(params: DenoiserParams, schedule: &NoiseSchedule, lr: f32) -> Self {
        Self {
            params,
            schedule: schedule.clone(),
            opt: Adam::new(lr),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.opt.lr = lr;
    }

    /// Mean squared error of the prediction on `x [B,C,H,W]` against
    /// `target`, followed by one Adam update.
    pub fn step(&mut self, x: &Tensor, ts: &[usize], target: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let vars = self.params.on_tape(&tape, true);
        let xv = tape.leaf(x.clone(), false);
        let loss = vars.forward(&xv, ts, &self.schedule)?.mse(target)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(NimbusError::Numerical("non-finite denoiser loss".into()));
        }
        let mut g = tape.backward(&loss)?;
        let grads: Vec<Tensor> = vars.leaves().into_iter().map(|v| g.take(v)).collect();
        let mut ps = self.params.tensors_mut();
        self.opt.step(&mut ps, &grads)?;
        Ok(value)
    }
}

/// Noised batch drawn from standardized planes: `(θ_t, t, ε)`.
pub fn noised_batch(
    data: &[Tensor],
    sched: &NoiseSchedule,
    batch: usize,
    r: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut xs = Vec::with_capacity(batch);
    let mut es = Vec::with_capacity(batch);
    let mut ts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let x0 = &data[r.random_range(0..data.len())];
        let t = random_t(sched, r);
        let (xt, e) = sched.forward_noise(x0, t, r)?;
        xs.push(xt);
        es.push(e);
        ts.push(t);
    }
    let xr: Vec<&Tensor> = xs.iter().collect();
    let er: Vec<&Tensor> = es.iter().collect();
    Ok((stack(&xr)?, ts, stack(&er)?))
}

pub fn train_denoiser(
    dataset: &[LatentCode],
    schedule: &NoiseSchedule,
    denoiser: &DenoiserConfig,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| NimbusError::Contract("empty latent dataset".into()))?;
    let shape = first.dims();
    denoiser.check_plane(&shape)?;
    let raw: Vec<Tensor> = dataset.iter().map(|l| l.plane.clone()).collect();
    let standardizer = Standardizer::fit(&raw)?;
    let data: Vec<Tensor> = raw.iter().map(|t| standardizer.forward(t)).collect();
    let mut trainer = Trainer::new(DenoiserParams::init(denoiser, cfg.seed)?, schedule, cfg.lr);
    let mut r = rng::stream(&[cfg.seed, 0x5452_4149]);
    let mut log = Vec::new();
    let mut window = (0.0f64, 0usize);
    let mut steps_run = 0;
    let snapshot = |params: &DenoiserParams, steps: usize| -> Result<DiffusionModel> {
        let mut m = DiffusionModel::new(params.clone(), schedule.clone(), standardizer.clone(), shape)?;
        m.train_steps = steps;
        Ok(m)
    };
    for step in 1..=cfg.steps {
        let progress = (step - 1) as f32 / cfg.steps as f32;
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        trainer.set_lr(cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos));
        let (x, ts, eps) = noised_batch(&data, schedule, cfg.batch, &mut r)?;
        let loss = trainer.step(&x, &ts, &eps)?;
        window.0 += loss;
        window.1 += 1;
        steps_run = step;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let mean = window.0 / window.1 as f64;
            log.push(TrainLogEntry { step, loss: mean });
            window = (0.0, 0);
            if cfg.target_loss.is_some_and(|t| mean < t) {
                break;
            }
        }
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                snapshot(&trainer.params, step)?.save(path)?;
            }
        }
    }
    let model = snapshot(&trainer.params, steps_run)?;
    if let Some(path) = checkpoint {
        model.save(path)?;
    }
    Ok(TrainResult {
        model,
        log,
        steps_run,
    })
}

/// Mean ε-loss of `model` on raw latents, with `(t, ε)` drawn from `seed`
/// in a fixed order so that different latent sets see matched noise.
pub fn denoising_loss(model: &DiffusionModel, latents: &[LatentCode], draws: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, l) in latents.iter().enumerate() {
        let x0 = model.standardizer.forward(&l.plane);
        let mut r = rng::stream(&[seed, i as u64, 0x4C4F_5353]);
        let mut xs = Vec::with_capacity(draws);
        let mut es = Vec::with_capacity(draws);
        let mut ts = Vec::with_capacity(draws);
        for _ in 0..draws {
            let t = random_t(&model.schedule, &mut r);
            let e = gaussian(x0.shape(), &mut r);
            xs.push(model.schedule.noise_with(&x0, t, &e)?);
            es.push(e);
            ts.push(t);
        }
        let xr: Vec<&Tensor> = xs.iter().collect();
        let pred = model.predict_batch(&stack(&xr)?, &ts)?;
        let er: Vec<&Tensor> = es.iter().collect();
        let target = stack(&er)?;
        total += pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        n += target.len();
    }
    Ok(total / n as f64)
}

/// Loss at one fixed timestep, same matched-noise convention.
pub fn denoising_loss_at(model: &DiffusionModel, latents: &[LatentCode], t: usize, draws: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, l) in latents.iter().enumerate() {
        let x0 = model.standardizer.forward(&l.plane);
        let mut r = rng::stream(&[seed, i as u64, t as u64, 0x4C41_5454]);
        for _ in 0..draws {
            let e = gaussian(x0.shape(), &mut r);
            let xt = model.schedule.noise_with(&x0, t, &e)?;
            let s = xt.shape().to_vec();
            let pred = model.predict_batch(&xt.reshape(&[1, s[0], s[1], s[2]])?, &[t])?;
            total += pred
                .data()
                .iter()
                .zip(e.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
            n += e.len();
        }
    }
    Ok(total / n as f64)
}
