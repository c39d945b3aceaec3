//! Three-level convolutional encoder-decoder ε-predictor.

use std::path::{Path, PathBuf};

use ndtape::{Padding, Tape, Tensor, TensorContainer, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sample::NoisePredictor;
use super::schedule::{NoiseSchedule, ScheduleConfig, Standardizer};
use crate::error::{NimbusError, Result};
use crate::rng;

const FORMAT: &str = "nimbus-denoiser-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub base_channels: usize,
    /// Width of the sinusoidal timestep features and of the embedding MLP.
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            base_channels: 32,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_channels == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(NimbusError::Config(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }

    /// Plane sizes must survive two 2x poolings.
    pub fn check_plane(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 3 && shape[0] == self.channels && shape[1] % 4 == 0 && shape[2] % 4 == 0 && shape[1] > 0;
        if !ok {
            return Err(NimbusError::Contract(format!(
                "denoiser expects [{}, 4m, 4n] planes, got {shape:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c0, c, td) = (self.channels, self.base_channels, self.time_dim);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("temb.w1".into(), vec![td, td]),
            ("temb.b1".into(), vec![td]),
            ("temb.w2".into(), vec![td, td]),
            ("temb.b2".into(), vec![td]),
        ];
        for (name, ci, co) in BLOCKS.iter().map(|&(n, i, o)| (n, i.of(c0, c), o.of(c0, c))) {
            v.push((format!("{name}.w1"), vec![co, ci, 3, 3]));
            v.push((format!("{name}.b1"), vec![co]));
            v.push((format!("{name}.t"), vec![td, co]));
            v.push((format!("{name}.tb"), vec![co]));
            v.push((format!("{name}.w2"), vec![co, co, 3, 3]));
            v.push((format!("{name}.b2"), vec![co]));
        }
        v.push(("out.w".into(), vec![c0, c, 3, 3]));
        v.push(("out.b".into(), vec![c0]));
        v.push(("skip.gain".into(), vec![1]));
        v
    }
}

#[derive(Clone, Copy)]
enum Width {
    Input,
    Base(usize),
}

impl Width {
    fn of(self, c0: usize, c: usize) -> usize {
        match self {
            Width::Input => c0,
            Width::Base(k) => k * c,
        }
    }
}

const BLOCKS: [(&str, Width, Width); 5] = [
    ("enc0", Width::Input, Width::Base(1)),
    ("enc1", Width::Base(1), Width::Base(2)),
    ("mid", Width::Base(2), Width::Base(2)),
    ("dec1", Width::Base(4), Width::Base(2)),
    ("dec0", Width::Base(3), Width::Base(1)),
];

/// Sinusoidal features of the timestep, `[B, dim]`.
pub fn timestep_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let k = j % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = ts[b] as f64 * freq;
        (if j < half { arg.sin() } else { arg.cos() }) as f32
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl DenoiserParams {
    /// He-scaled Gaussian weights, zero biases, zero output layer (so an
    /// untrained model predicts `ε̂ = 0`).
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(&[seed, 0x554E_4554]);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let fan_in: usize = match shape.len() {
                    4 => shape[1] * 9,
                    2 => shape[0],
                    _ => 0,
                };
                let t = if name.starts_with("out.") || name.starts_with("skip.") || fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    let std = (2.0 / fan_in as f32).sqrt();
                    Tensor::from_fn(&shape, |_| std * r.sample::<f32, _>(StandardNormal))
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn on_tape(&self, tape: &Tape, requires_grad: bool) -> DenoiserVars {
        DenoiserVars {
            config: self.config.clone(),
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (n, t) in &self.tensors {
            c.push(n.clone(), t.clone());
        }
        c
    }

    pub fn from_container(config: DenoiserConfig, mut c: TensorContainer) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = c.take(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(NimbusError::Format(format!(
                    "denoiser tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.push((name, t));
        }
        Ok(Self { config, tensors })
    }
}

pub struct DenoiserVars {
    config: DenoiserConfig,
    vars: Vec<(String, Var)>,
}

impl DenoiserVars {
    pub fn leaves(&self) -> Vec<&Var> {
        self.vars.iter().map(|(_, v)| v).collect()
    }

    fn get(&self, name: &str) -> &Var {
        &self.vars.iter().find(|(n, _)| n == name).expect("denoiser layout").1
    }

    fn block(&self, name: &str, x: &Var, temb: &Var) -> Result<Var> {
        let g = |s: &str| self.get(&format!("{name}.{s}"));
        let tb = temb.matmul(g("t"))?.add_row(g("tb"))?;
        let h = x.conv2d(g("w1"), g("b1"), Padding::Zero)?.add_channel(&tb)?.gelu()?;
        Ok(h.conv2d(g("w2"), g("b2"), Padding::Zero)?.gelu()?)
    }

    /// `x [B,C0,H,W]`, one timestep per batch entry. The output adds a
    /// gated skip `γ·√(1-ᾱ_t)·x`, which is the exact answer as `t → T`.
    pub fn forward(&self, x: &Var, ts: &[usize], sched: &NoiseSchedule) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[0] != ts.len() {
            return Err(NimbusError::Contract(format!(
                "denoiser batch {s:?} does not match {} timesteps",
                ts.len()
            )));
        }
        self.config.check_plane(&s[1..])?;
        let tape = x.tape();
        let feats = tape.constant(timestep_features(ts, self.config.time_dim));
        let temb = feats
            .matmul(self.get("temb.w1"))?
            .add_row(self.get("temb.b1"))?
            .gelu()?
            .matmul(self.get("temb.w2"))?
            .add_row(self.get("temb.b2"))?
            .gelu()?;
        let s0 = self.block("enc0", x, &temb)?;
        let s1 = self.block("enc1", &s0.avg_pool2()?, &temb)?;
        let m = self.block("mid", &s1.avg_pool2()?, &temb)?;
        let d1 = self.block("dec1", &m.upsample2x()?.concat_channels(&s1)?, &temb)?;
        let d0 = self.block("dec0", &d1.upsample2x()?.concat_channels(&s0)?, &temb)?;
        let per = s[1] * s[2] * s[3];
        let sn: Vec<f32> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt() as f32).collect();
        let gate = Tensor::from_fn(s, |i| sn[i / per]);
        let skip = x.mul_const(&gate)?.mul_scalar_var(self.get("skip.gain"))?;
        Ok(d0.conv2d(self.get("out.w"), self.get("out.b"), Padding::Zero)?.add(&skip)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionManifest {
    pub format: String,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub standardizer: Standardizer,
    pub latent_shape: [usize; 3],
    pub train_steps: usize,
}

/// Trained ε-predictor together with everything needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub standardizer: Standardizer,
    pub latent_shape: [usize; 3],
    pub train_steps: usize,
}

impl DiffusionModel {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule, standardizer: Standardizer, latent_shape: [usize; 3]) -> Result<Self> {
        params.config.check_plane(&latent_shape)?;
        if standardizer.mean.len() != latent_shape[0] || standardizer.std.len() != latent_shape[0] {
            return Err(NimbusError::Contract("standardizer channel count mismatch".into()));
        }
        Ok(Self {
            params,
            schedule,
            standardizer,
            latent_shape,
            train_steps: 0,
        })
    }

    /// Batched prediction in standardized space.
    pub fn predict_batch(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.on_tape(&tape, false);
        let xv = tape.leaf(x.clone(), false);
        Ok(vars.forward(&xv, ts, &self.schedule)?.value().clone())
    }

    pub fn manifest(&self) -> DiffusionManifest {
        DiffusionManifest {
            format: FORMAT.into(),
            schedule: self.schedule.config.clone(),
            denoiser: self.params.config.clone(),
            standardizer: self.standardizer.clone(),
            latent_shape: self.latent_shape,
            train_steps: self.train_steps,
        }
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the tensors to `path` and the manifest next to it (`.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.params.to_container().write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)?;
        let json = serde_json::to_vec_pretty(&self.manifest())?;
        crate::io::write_atomic(&Self::manifest_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DiffusionManifest = serde_json::from_slice(&std::fs::read(Self::manifest_path(path))?)?;
        if m.format != FORMAT {
            return Err(NimbusError::Format(format!("unknown checkpoint format {:?}", m.format)));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let params = DenoiserParams::from_container(m.denoiser, TensorContainer::read_from(&mut f)?)?;
        let mut model = Self::new(params, NoiseSchedule::new(m.schedule)?, m.standardizer, m.latent_shape)?;
        model.train_steps = m.train_steps;
        Ok(model)
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let batched = x.clone().reshape(&[1, s[0], s[1], s[2]])?;
        Ok(self.predict_batch(&batched, &[t])?.reshape(&s)?)
    }

    fn predict_var(&self, x: &Var, t: usize) -> Result<Var> {
        let s = x.shape().to_vec();
        let vars = self.params.on_tape(x.tape(), false);
        let out = vars.forward(&x.reshape(&[1, s[0], s[1], s[2]])?, &[t], &self.schedule)?;
        Ok(out.reshape(&s)?)
    }
}

pub(crate) fn random_t(sched: &NoiseSchedule, r: &mut impl Rng) -> usize {
    r.random_range(1..=sched.len())
}
