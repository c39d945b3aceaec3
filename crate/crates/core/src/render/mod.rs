//! Differentiable volume rendering of density grids.

mod camera;
mod ea;
mod env;
mod image;
mod medium;
mod params;
mod path;
mod phase;

pub use camera::{intersect_box, Camera, Ray, Vec3};
pub use ea::{render_ea, render_ea_backward, render_ea_var, transmittance_image, transmittance_image_var};
pub use env::EnvMap;
pub use image::Image;
pub use medium::{ratio_tracking, transmittance_quadrature, transmittance_ratio_tracking, Medium};
pub use params::{Background, ParamVars, RenderGrads, RenderParams};
pub use phase::{hg_dlog_dg, hg_eval, hg_phase, hg_sample, hg_sample_cos, hg_sample_dir};

use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};
use crate::volume::DenseGrid3;

/// Hard cap on scattering events per path.
pub const MAX_DEPTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    PathNee,
    EaDeterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub mode: RenderMode,
    pub spp: usize,
    pub seed: u64,
    /// Scattering events allowed per path (at most [`MAX_DEPTH`]).
    pub max_bounces: usize,
    /// Box-filter the pixel footprint; off traces pixel centers only.
    pub pixel_jitter: bool,
    /// Midpoints per primary ray in deterministic mode.
    pub quad_steps: usize,
    /// World-space quadrature step for next-event transmittance; 0 uses
    /// the grid spacing.
    pub nee_step: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mode: RenderMode::PathNee,
            spp: 16,
            seed: 0,
            max_bounces: MAX_DEPTH,
            pixel_jitter: true,
            quad_steps: 128,
            nee_step: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn ea(quad_steps: usize) -> Self {
        Self {
            mode: RenderMode::EaDeterministic,
            quad_steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spp == 0 {
            return Err(NimbusError::Config("spp must be >= 1".into()));
        }
        if self.max_bounces == 0 || self.max_bounces > MAX_DEPTH {
            return Err(NimbusError::Config(format!("max_bounces must be in 1..={MAX_DEPTH}")));
        }
        if self.quad_steps < 2 {
            return Err(NimbusError::Config("quad_steps must be >= 2".into()));
        }
        if !(self.nee_step >= 0.0) {
            return Err(NimbusError::Config("nee_step must be >= 0".into()));
        }
        Ok(())
    }
}

fn check(grid: &DenseGrid3, phi: &RenderParams, camera: &Camera, cfg: &RenderConfig) -> Result<()> {
    cfg.validate()?;
    phi.validate()?;
    phi.check_camera(camera)?;
    if grid.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(NimbusError::Contract("density grid must be finite and >= 0".into()));
    }
    Ok(())
}

/// Radiance image of `grid` seen by `camera` under `phi`.
pub fn render(grid: &DenseGrid3, phi: &RenderParams, camera: &Camera, cfg: &RenderConfig) -> Result<Image> {
    check(grid, phi, camera, cfg)?;
    match cfg.mode {
        RenderMode::EaDeterministic => render_ea(grid, phi, camera, cfg.quad_steps),
        RenderMode::PathNee => {
            let m = Medium::of(grid, phi.density_scale);
            let data = path::Tracer::new(m, phi, camera, cfg).render()?;
            Image::new(camera.width, camera.height, 3, data)
        }
    }
}

/// Gradient of `Σ adj ⊙ render(grid, phi, camera, cfg)` with respect to
/// the grid and every member of `phi`. Stochastic mode replays the exact
/// paths of the forward call with the same configuration.
pub fn render_backward(
    grid: &DenseGrid3,
    phi: &RenderParams,
    camera: &Camera,
    cfg: &RenderConfig,
    adj: &Image,
) -> Result<RenderGrads> {
    check(grid, phi, camera, cfg)?;
    if adj.width != camera.width || adj.height != camera.height || adj.channels != 3 {
        return Err(NimbusError::Contract("adjoint image does not match camera".into()));
    }
    match cfg.mode {
        RenderMode::EaDeterministic => render_ea_backward(grid, phi, camera, cfg.quad_steps, adj),
        RenderMode::PathNee => {
            let m = Medium::of(grid, phi.density_scale);
            Ok(path::Tracer::new(m, phi, camera, cfg).backward(&adj.data).finish())
        }
    }
}
