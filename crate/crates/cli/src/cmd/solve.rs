//! Single-operator posterior sampling commands.

use std::path::{Path, PathBuf};

use nimbus::diffusion::DiffusionModel;
use nimbus::metrics::compare;
use nimbus::monoplanar::{DecoderParams, LatentCode};
use nimbus::posterior::*;
use nimbus::render::{transmittance_image, Camera, Image};
use nimbus::rng::{self, StreamRng};
use nimbus::DenseGrid3;
use serde::{Deserialize, Serialize};

use crate::config::{self, Output};
use crate::error::{CliError, Result};
use crate::Solve;

/// Checkpoints of the diffusion prior and its decoder.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorPaths {
    pub model: PathBuf,
    pub decoder: PathBuf,
}

pub struct Loaded {
    pub model: DiffusionModel,
    pub decoder: DecoderParams,
}

impl Loaded {
    pub fn prior(&self) -> Result<Prior<'_>> {
        Ok(Prior::new(&self.model, &self.decoder)?)
    }
}

/// Applies command-line overrides, loads both checkpoints and creates the
/// output directory.
pub fn prepare(prior: &mut PriorPaths, seed: &mut u64, out: &mut PathBuf, base: &Path, args: &Solve) -> Result<(Loaded, Output)> {
    config::rebase(base, &mut prior.model);
    config::rebase(base, &mut prior.decoder);
    config::rebase(base, out);
    if let Some(s) = args.common.seed {
        *seed = s;
    }
    *out = super::pick_out(&args.common.out, out);
    config::require(&prior.model, "prior.model")?;
    config::require(&prior.decoder, "prior.decoder")?;
    let loaded = Loaded {
        model: DiffusionModel::load(&prior.model)?,
        decoder: DecoderParams::load(&prior.decoder)?,
    };
    loaded.prior()?;
    Ok((loaded, Output::create(out)?))
}

fn task_rng(seed: u64, task: u64) -> StreamRng {
    rng::stream(&[seed, task])
}

fn apply_restarts(dps: &mut DpsConfig, args: &Solve) {
    if let Some(r) = args.restarts {
        dps.restarts = r;
    }
}

pub fn dps_log_csv(log: &[DpsStep]) -> String {
    let mut s = String::from("t,residual,update_norm,clipped,nonfinite\n");
    for e in log {
        s.push_str(&format!(
            "{},{:e},{:e},{},{}\n",
            e.t, e.residual, e.update_norm, e.clipped as u8, e.nonfinite as u8
        ));
    }
    s
}

fn write_reconstruction(out: &Output, prefix: &str, prior: &Prior, r: &Reconstruction) -> Result<()> {
    out.latent(&format!("{prefix}.lat"), &prior.to_latent(&r.dps.z)?)?;
    out.volume(&format!("{prefix}.vol"), &r.grid)?;
    out.text(&format!("{prefix}_dps.csv"), &dps_log_csv(&r.dps.log))?;
    Ok(())
}

fn summary(r: &Reconstruction, source: Option<&DenseGrid3>) -> Result<serde_json::Value> {
    let mut v = serde_json::json!({
        "consistency_rmse": r.consistency,
        "clipped_steps": r.dps.clipped_steps(),
        "nonfinite_steps": r.dps.nonfinite_steps(),
    });
    if let Some(src) = source {
        if src.extents() == r.grid.extents() {
            v["metrics_vs_source"] = serde_json::to_value(compare(&r.grid, src)?).expect("serializable");
        }
    }
    Ok(v)
}

fn load_volume(p: &mut PathBuf, base: &Path, what: &str) -> Result<DenseGrid3> {
    config::rebase(base, p);
    config::require(p, what)?;
    Ok(DenseGrid3::load(p)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperresConfig {
    pub prior: PriorPaths,
    pub seed: u64,
    pub out: PathBuf,
    /// Volume sampled at the jittered coarse points.
    pub observation: PathBuf,
    /// Coarse cell counts along x, y, z; one jittered sample per cell.
    pub coarse: [usize; 3],
    pub dps: DpsConfig,
}

impl Default for SuperresConfig {
    fn default() -> Self {
        Self {
            prior: PriorPaths::default(),
            seed: 0,
            out: PathBuf::new(),
            observation: PathBuf::new(),
            coarse: [8, 4, 8],
            dps: DpsConfig::default(),
        }
    }
}

pub fn superres(args: &Solve) -> Result<()> {
    let (mut cfg, base): (SuperresConfig, _) = config::load(args.common.config.as_deref())?;
    apply_restarts(&mut cfg.dps, args);
    let (loaded, out) = prepare(&mut cfg.prior, &mut cfg.seed, &mut cfg.out, &base, args)?;
    let obs = load_volume(&mut cfg.observation, &base, "observation")?;
    if cfg.coarse.contains(&0) {
        return Err(CliError::config("coarse cell counts must be positive"));
    }
    let prior = loaded.prior()?;
    let pts = coarse_jittered_points(cfg.coarse, rng::mix(&[cfg.seed, 0x5054]));
    let y = coarse_sample(&obs, &pts);
    let r = superresolve(&prior, &y, &pts, &cfg.dps, &mut task_rng(cfg.seed, 1))?;
    write_reconstruction(&out, "superres", &prior, &r)?;
    let mut csv = String::from("x,y,z,density\n");
    for (p, v) in pts.iter().zip(&y) {
        csv.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], v));
    }
    out.text("coarse_samples.csv", &csv)?;
    let s = summary(&r, Some(&obs))?;
    out.json("result.json", &s)?;
    out.resolved(&cfg)?;
    super::report(s);
    Ok(())
}

/// Observed voxels: a VOL1 mask file or an axis-aligned world-space box.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    File(PathBuf),
    Box { min: [f32; 3], max: [f32; 3] },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    pub prior: PriorPaths,
    pub seed: u64,
    pub out: PathBuf,
    pub observation: PathBuf,
    pub mask: MaskSpec,
    pub dps: DpsConfig,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            prior: PriorPaths::default(),
            seed: 0,
            out: PathBuf::new(),
            observation: PathBuf::new(),
            mask: MaskSpec::Box {
                min: [-1.0; 3],
                max: [0.0, 1.0, 1.0],
            },
            dps: DpsConfig::default(),
        }
    }
}

pub fn inpaint(args: &Solve) -> Result<()> {
    let (mut cfg, base): (InpaintConfig, _) = config::load(args.common.config.as_deref())?;
    apply_restarts(&mut cfg.dps, args);
    let (loaded, out) = prepare(&mut cfg.prior, &mut cfg.seed, &mut cfg.out, &base, args)?;
    let obs = load_volume(&mut cfg.observation, &base, "observation")?;
    let extents = loaded.decoder.config.grid_extents;
    if obs.extents() != extents {
        return Err(CliError::config(format!(
            "observation extents {:?} differ from the decoder grid {extents:?}",
            obs.extents()
        )));
    }
    let mask = match &mut cfg.mask {
        MaskSpec::File(p) => load_volume(p, &base, "mask")?,
        MaskSpec::Box { min, max } => {
            let (lo, hi) = (*min, *max);
            DenseGrid3::from_fn(extents, |c| {
                let inside = (0..3).all(|i| c[i] >= lo[i] && c[i] <= hi[i]);
                inside as u8 as f32
            })
        }
    };
    let prior = loaded.prior()?;
    let r = nimbus::posterior::inpaint(&prior, &obs, &mask, &cfg.dps, &mut task_rng(cfg.seed, 2))?;
    write_reconstruction(&out, "inpaint", &prior, &r)?;
    out.volume("mask.vol", &mask)?;
    let mut s = summary(&r, Some(&obs))?;
    s["observed_fraction"] = mask.mean().into();
    out.json("result.json", &s)?;
    out.resolved(&cfg)?;
    super::report(s);
    Ok(())
}

/// Observed transmittance: a one-channel PFM, or a volume to synthesize it from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TransmitSource {
    Image(PathBuf),
    Volume(PathBuf),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransmitConfig {
    pub prior: PriorPaths,
    pub seed: u64,
    pub out: PathBuf,
    pub observation: TransmitSource,
    pub camera: Camera,
    pub density_scale: f32,
    /// Midpoint quadrature steps per ray.
    pub steps: usize,
    pub dps: DpsConfig,
}

impl Default for TransmitConfig {
    fn default() -> Self {
        Self {
            prior: PriorPaths::default(),
            seed: 0,
            out: PathBuf::new(),
            observation: TransmitSource::Volume(PathBuf::new()),
            camera: Camera::orbit(30.0, 20.0, 3.2, 40.0, 32, 32),
            density_scale: 8.0,
            steps: 96,
            dps: DpsConfig::default(),
        }
    }
}

pub fn transmit(args: &Solve) -> Result<()> {
    let (mut cfg, base): (TransmitConfig, _) = config::load(args.common.config.as_deref())?;
    apply_restarts(&mut cfg.dps, args);
    let (loaded, out) = prepare(&mut cfg.prior, &mut cfg.seed, &mut cfg.out, &base, args)?;
    cfg.camera.validate()?;
    let (y, source) = match &mut cfg.observation {
        TransmitSource::Image(p) => {
            config::rebase(&base, p);
            config::require(p, "observation image")?;
            (Image::load_pfm(p)?, None)
        }
        TransmitSource::Volume(p) => {
            let v = load_volume(p, &base, "observation volume")?;
            let img = transmittance_image(&v, cfg.density_scale, &cfg.camera, cfg.steps)?;
            out.bytes("observed.pfm", &pfm_bytes(&img)?)?;
            (img, Some(v))
        }
    };
    let prior = loaded.prior()?;
    let r = reconstruct_from_transmittance(
        &prior,
        &y,
        &cfg.camera,
        cfg.density_scale,
        cfg.steps,
        &cfg.dps,
        &mut task_rng(cfg.seed, 3),
    )?;
    write_reconstruction(&out, "transmit", &prior, &r)?;
    let fitted = transmittance_image(&r.grid, cfg.density_scale, &cfg.camera, cfg.steps)?;
    out.bytes("reconstructed.pfm", &pfm_bytes(&fitted)?)?;
    let s = summary(&r, source.as_ref())?;
    out.json("result.json", &s)?;
    out.resolved(&cfg)?;
    super::report(s);
    Ok(())
}

pub fn pfm_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    img.write_pfm(&mut b)?;
    Ok(b)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpConfig {
    pub prior: PriorPaths,
    pub seed: u64,
    pub out: PathBuf,
    pub a: PathBuf,
    pub b: PathBuf,
    pub alphas: Vec<f32>,
    pub dps: DpsConfig,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            prior: PriorPaths::default(),
            seed: 0,
            out: PathBuf::new(),
            a: PathBuf::new(),
            b: PathBuf::new(),
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            // Latent-space targets need stronger guidance than volume ones.
            dps: DpsConfig {
                scale: 3.0,
                ..Default::default()
            },
        }
    }
}

pub fn interp(args: &Solve) -> Result<()> {
    let (mut cfg, base): (InterpConfig, _) = config::load(args.common.config.as_deref())?;
    apply_restarts(&mut cfg.dps, args);
    let (loaded, out) = prepare(&mut cfg.prior, &mut cfg.seed, &mut cfg.out, &base, args)?;
    let load = |p: &mut PathBuf, what: &str| -> Result<LatentCode> {
        config::rebase(&base, p);
        config::require(p, what)?;
        Ok(LatentCode::load(p)?)
    };
    let a = load(&mut cfg.a, "latent a")?;
    let b = load(&mut cfg.b, "latent b")?;
    if cfg.alphas.is_empty() {
        return Err(CliError::config("alphas must not be empty"));
    }
    let prior = loaded.prior()?;
    let mut rows = Vec::new();
    for (i, &alpha) in cfg.alphas.iter().enumerate() {
        let r = interpolate_latents(&prior, &a, &b, alpha, &cfg.dps, &mut task_rng(cfg.seed, 0x100 + i as u64))?;
        write_reconstruction(&out, &format!("interp_{i:02}"), &prior, &r)?;
        rows.push(serde_json::json!({ "alpha": alpha, "consistency_rmse": r.consistency }));
    }
    let s = serde_json::json!({ "steps": rows });
    out.json("result.json", &s)?;
    out.resolved(&cfg)?;
    super::report(s);
    Ok(())
}
