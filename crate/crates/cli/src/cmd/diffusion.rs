use std::path::PathBuf;

use clap::Subcommand;
use nimbus::diffusion::*;
use nimbus::monoplanar::{DecoderParams, LatentCode};
use nimbus::rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, Output};
use crate::error::{CliError, Result};
use crate::Common;

#[derive(Subcommand)]
pub enum Op {
    /// Train the ε-prediction denoiser on LAT1 latents.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw unconditional latents (and volumes when a decoder is given).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmdConfig {
    /// LAT1 files or directories of them.
    pub latents: Vec<PathBuf>,
    /// Add all eight dihedral copies of every latent.
    pub augment: bool,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            latents: Vec::new(),
            augment: true,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub model: PathBuf,
    /// Optional decoder; samples are also written as volumes when set.
    pub decoder: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub ddim: DdimConfig,
    pub out: PathBuf,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            decoder: PathBuf::new(),
            count: 4,
            seed: 0,
            ddim: DdimConfig::default(),
            out: PathBuf::new(),
        }
    }
}

pub fn run(op: Op) -> Result<()> {
    match op {
        Op::Train { common } => train(&common),
        Op::Sample { common, count } => sample(&common, count),
    }
}

fn train(common: &Common) -> Result<()> {
    let (mut cfg, base): (TrainCmdConfig, _) = config::load(common.config.as_deref())?;
    cfg.latents.iter_mut().for_each(|p| config::rebase(&base, p));
    config::rebase(&base, &mut cfg.out);
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.out = super::pick_out(&common.out, &cfg.out);
    let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
    let mut latents = config::expand(&cfg.latents, "lat")?
        .iter()
        .map(|p| Ok(LatentCode::load(p)?))
        .collect::<Result<Vec<_>>>()?;
    if cfg.augment {
        latents = dihedral_augment(&latents)?;
    }
    let out = Output::create(&cfg.out)?;
    let res = train_denoiser(&latents, &schedule, &cfg.denoiser, &cfg.train, Some(&out.path("model.ckpt")))?;
    let mut csv = String::from("step,loss\n");
    for e in &res.log {
        csv.push_str(&format!("{},{:e}\n", e.step, e.loss));
    }
    out.text("train_log.csv", &csv)?;
    out.resolved(&cfg)?;
    super::report(serde_json::json!({
        "latents": latents.len(),
        "steps_run": res.steps_run,
        "final_loss": res.log.last().map(|e| e.loss),
        "model": out.path("model.ckpt"),
    }));
    Ok(())
}

fn sample(common: &Common, count: Option<usize>) -> Result<()> {
    let (mut cfg, base): (SampleConfig, _) = config::load(common.config.as_deref())?;
    config::rebase(&base, &mut cfg.model);
    config::rebase(&base, &mut cfg.decoder);
    config::rebase(&base, &mut cfg.out);
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = count {
        cfg.count = n;
    }
    cfg.out = super::pick_out(&common.out, &cfg.out);
    config::require(&cfg.model, "model")?;
    if cfg.count == 0 {
        return Err(CliError::config("count must be >= 1"));
    }
    let model = DiffusionModel::load(&cfg.model)?;
    let decoder = if cfg.decoder.as_os_str().is_empty() {
        None
    } else {
        config::require(&cfg.decoder, "decoder")?;
        Some(DecoderParams::load(&cfg.decoder)?)
    };
    let out = Output::create(&cfg.out)?;
    for i in 0..cfg.count {
        let mut r = rng::stream(&[cfg.seed, i as u64, 0x5341_4D50]);
        let l = generate(&model, &cfg.ddim, &mut r)?;
        out.latent(&format!("sample_{i:04}.lat"), &l)?;
        if let Some(d) = &decoder {
            out.volume(&format!("sample_{i:04}.vol"), &d.decode_grid(&l, d.config.grid_extents)?)?;
        }
    }
    out.resolved(&cfg)?;
    super::report(serde_json::json!({ "samples": cfg.count, "out": out.dir }));
    Ok(())
}
