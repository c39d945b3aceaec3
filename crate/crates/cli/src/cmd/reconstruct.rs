//! Joint recovery of the latent cloud and rendering parameters from images.

use std::path::PathBuf;

use nimbus::metrics;
use nimbus::monoplanar::LatentCode;
use nimbus::posterior::{pdps_reconstruct, PdpsConfig, View};
use nimbus::render::{render, Camera, Image, RenderConfig, RenderParams};
use nimbus::rng;
use nimbus::DenseGrid3;
use serde::{Deserialize, Serialize};

use super::solve::{pfm_bytes, prepare, PriorPaths};
use crate::config::{self, Output};
use crate::error::{CliError, Result};
use crate::Solve;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub camera: Camera,
    /// Observed RGB PFM; rendered from `truth` when absent.
    #[serde(default)]
    pub image: Option<PathBuf>,
}

/// Ground truth used to synthesize observations and score novel views.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub volume: PathBuf,
    pub phi: RenderParams,
    #[serde(default)]
    pub render: RenderConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub prior: PriorPaths,
    pub seed: u64,
    pub out: PathBuf,
    pub views: Vec<ViewSpec>,
    pub truth: Option<Truth>,
    /// Initial rendering parameters; the free ones are optimized.
    pub phi0: RenderParams,
    /// Initial latent; an unconditional sample when absent.
    pub theta0: Option<PathBuf>,
    pub pdps: PdpsConfig,
    /// Held-out cameras rendered from the result (and from the truth, if given).
    pub novel_views: Vec<Camera>,
}

fn seeded(cfg: &RenderConfig, keys: &[u64]) -> RenderConfig {
    RenderConfig {
        seed: rng::mix(keys),
        ..cfg.clone()
    }
}

fn save_image(out: &Output, name: &str, img: &Image) -> Result<()> {
    out.bytes(&format!("{name}.pfm"), &pfm_bytes(img)?)?;
    out.bytes(&format!("{name}.png"), &img.to_png(1.0)?)
}

pub fn run(args: &Solve) -> Result<()> {
    let (mut cfg, base): (ReconstructConfig, _) = config::load(args.common.config.as_deref())?;
    if let Some(r) = args.restarts {
        cfg.pdps.dps.restarts = r;
    }
    let (loaded, out) = prepare(&mut cfg.prior, &mut cfg.seed, &mut cfg.out, &base, args)?;
    if cfg.views.is_empty() {
        return Err(CliError::config("at least one view is required"));
    }
    let truth = match &mut cfg.truth {
        Some(t) => {
            config::rebase(&base, &mut t.volume);
            config::require(&t.volume, "truth.volume")?;
            Some((DenseGrid3::load(&t.volume)?, t.clone()))
        }
        None => None,
    };
    let mut views = Vec::new();
    for (i, v) in cfg.views.iter_mut().enumerate() {
        let image = match (&mut v.image, &truth) {
            (Some(p), _) => {
                config::rebase(&base, p);
                config::require(p, "view image")?;
                Image::load_pfm(p)?
            }
            (None, Some((grid, t))) => {
                let img = render(grid, &t.phi, &v.camera, &seeded(&t.render, &[cfg.seed, i as u64, 0x4F42_5356]))?;
                save_image(&out, &format!("observed_{i:02}"), &img)?;
                img
            }
            (None, None) => return Err(CliError::config(format!("view {i} has no image and there is no truth"))),
        };
        views.push(View {
            camera: v.camera.clone(),
            image,
        });
    }
    let theta0 = match &mut cfg.theta0 {
        Some(p) => {
            config::rebase(&base, p);
            config::require(p, "theta0")?;
            Some(LatentCode::load(p)?)
        }
        None => None,
    };
    let prior = loaded.prior()?;
    let res = pdps_reconstruct(&prior, &views, &cfg.phi0, theta0.as_ref(), &cfg.pdps, cfg.seed)?;

    out.latent("latent.lat", &res.latent)?;
    out.volume("volume.vol", &res.grid)?;
    out.json("phi.json", &res.phi)?;
    out.text("passes.csv", &res.log_csv())?;
    let eval = &cfg.pdps.render;
    let mut view_rmse = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let img = render(&res.grid, &res.phi, &v.camera, &seeded(eval, &[cfg.seed, i as u64, 0x5245_4E44]))?;
        view_rmse.push(metrics::rmse(&img.data, &v.image.data)?);
        save_image(&out, &format!("render_{i:02}"), &img)?;
    }
    let mut novel_rmse = Vec::new();
    for (i, cam) in cfg.novel_views.iter().enumerate() {
        let rc = seeded(eval, &[cfg.seed, i as u64, 0x4E4F_5645]);
        let img = render(&res.grid, &res.phi, cam, &rc)?;
        save_image(&out, &format!("novel_{i:02}"), &img)?;
        if let Some((grid, t)) = &truth {
            let want = render(grid, &t.phi, cam, &rc)?;
            save_image(&out, &format!("novel_truth_{i:02}"), &want)?;
            novel_rmse.push(metrics::rmse(&img.data, &want.data)?);
        }
    }
    let result = serde_json::json!({
        "counters": res.counters,
        "aborted": res.aborted,
        "view_rmse": view_rmse,
        "novel_rmse": novel_rmse,
        "final_background": res.log.last().and_then(|l| l.background),
    });
    out.json("result.json", &result)?;
    out.resolved(&cfg)?;
    super::report(serde_json::json!({ "result": result, "pass_seconds": res.timings }));
    match &res.aborted {
        Some(why) => Err(CliError::numerical(format!("reconstruction aborted: {why}"))),
        None => Ok(()),
    }
}
