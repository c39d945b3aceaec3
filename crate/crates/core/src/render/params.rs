//! Physical scene parameters φ.

use ndtape::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Vec3};
use super::env::EnvMap;
use super::image::Image;
use super::phase::check_g;
use crate::error::{NimbusError, Result};

/// Radiance seen by camera rays that leave the medium, overriding the
/// environment for those rays only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Uniform([f32; 3]),
    Image(Image),
}

impl Background {
    pub fn param_len(&self) -> usize {
        match self {
            Background::Uniform(_) => 3,
            Background::Image(img) => img.data.len(),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            Background::Uniform(v) => v,
            Background::Image(img) => &img.data,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        match self {
            Background::Uniform(v) => v,
            Background::Image(img) => &mut img.data,
        }
    }

    /// Offset of the RGB triple used by pixel `p` within `values()`.
    #[inline]
    pub fn offset(&self, p: usize) -> usize {
        match self {
            Background::Uniform(_) => 0,
            Background::Image(_) => 3 * p,
        }
    }

    pub fn max(&self) -> f32 {
        self.values().iter().copied().fold(0.0, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderParams {
    pub density_scale: f32,
    pub albedo: [f32; 3],
    pub hg_g: f32,
    pub environment: EnvMap,
    #[serde(default)]
    pub background: Option<Background>,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            density_scale: 8.0,
            albedo: [0.95; 3],
            hg_g: 0.5,
            environment: EnvMap::sky([1.0, 1.0, 1.0], [0.55, 0.65, 0.8]),
            background: None,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return Err(NimbusError::Config(format!("density_scale {} must be > 0", self.density_scale)));
        }
        if self.albedo.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(NimbusError::Config(format!("albedo {:?} outside [0,1]", self.albedo)));
        }
        check_g(self.hg_g).map_err(|e| NimbusError::Config(e.to_string()))?;
        self.environment.validate()?;
        if let Some(bg) = &self.background {
            if bg.values().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(NimbusError::Config("background radiance must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn check_camera(&self, camera: &Camera) -> Result<()> {
        camera.validate()?;
        if let Some(Background::Image(img)) = &self.background {
            if img.width != camera.width || img.height != camera.height || img.channels != 3 {
                return Err(NimbusError::Config(format!(
                    "background image {}x{}x{} does not match camera {}x{}",
                    img.width, img.height, img.channels, camera.width, camera.height
                )));
            }
        }
        Ok(())
    }

    /// Largest radiance any escaping ray can carry.
    pub fn radiance_bound(&self) -> f32 {
        let bg = self.background.as_ref().map_or(0.0, Background::max);
        self.environment.max().max(bg)
    }

    /// Radiance of camera ray `dir` through pixel `p` after leaving the medium.
    #[inline]
    pub fn escape_radiance(&self, p: usize, dir: Vec3) -> [f32; 3] {
        match &self.background {
            Some(bg) => {
                let o = bg.offset(p);
                let v = bg.values();
                [v[o], v[o + 1], v[o + 2]]
            }
            None => self.environment.lookup(dir),
        }
    }

    /// Places the differentiable parameters on `tape`.
    pub fn on_tape(&self, tape: &Tape, requires_grad: bool) -> Result<ParamVars> {
        let leaf = |t: Tensor| tape.leaf(t, requires_grad);
        let env = &self.environment;
        Ok(ParamVars {
            density_scale: leaf(Tensor::scalar(self.density_scale)),
            albedo: leaf(Tensor::new(&[3], self.albedo.to_vec())?),
            environment: leaf(Tensor::new(&[env.height, env.width, 3], env.texels.clone())?),
            background: match &self.background {
                Some(bg) => Some(leaf(Tensor::new(&[bg.param_len()], bg.values().to_vec())?)),
                None => None,
            },
        })
    }
}

/// Tape handles for the continuous members of φ used by deterministic
/// rendering. The phase function does not enter that mode.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub density_scale: Var,
    pub albedo: Var,
    pub environment: Var,
    pub background: Option<Var>,
}

/// Gradient of a scalar loss with respect to every member of φ and the
/// density grid, in the layouts of [`RenderParams`] and `DenseGrid3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub grid: Vec<f32>,
    pub density_scale: f32,
    pub albedo: [f32; 3],
    pub hg_g: f32,
    pub environment: Vec<f32>,
    pub background: Option<Vec<f32>>,
}

/// f64 accumulator behind [`RenderGrads`].
#[derive(Clone, Debug)]
pub(crate) struct GradAccum {
    pub grid: Vec<f64>,
    pub density_scale: f64,
    pub albedo: [f64; 3],
    pub hg_g: f64,
    pub environment: Vec<f64>,
    pub background: Option<Vec<f64>>,
}

impl GradAccum {
    pub fn new(n_grid: usize, phi: &RenderParams) -> Self {
        Self {
            grid: vec![0.0; n_grid],
            density_scale: 0.0,
            albedo: [0.0; 3],
            hg_g: 0.0,
            environment: vec![0.0; phi.environment.texels.len()],
            background: phi.background.as_ref().map(|b| vec![0.0; b.param_len()]),
        }
    }

    pub fn merge(&mut self, o: &GradAccum) {
        self.grid.iter_mut().zip(&o.grid).for_each(|(a, b)| *a += b);
        self.density_scale += o.density_scale;
        for c in 0..3 {
            self.albedo[c] += o.albedo[c];
        }
        self.hg_g += o.hg_g;
        self.environment.iter_mut().zip(&o.environment).for_each(|(a, b)| *a += b);
        if let (Some(a), Some(b)) = (&mut self.background, &o.background) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Radiance adjoint `adj` of an escaping camera ray through pixel `p`.
    #[inline]
    pub fn deposit_escape(&mut self, phi: &RenderParams, p: usize, dir: Vec3, adj: [f64; 3]) {
        match (&phi.background, &mut self.background) {
            (Some(bg), Some(g)) => {
                let o = bg.offset(p);
                for c in 0..3 {
                    g[o + c] += adj[c];
                }
            }
            _ => self.deposit_env(phi, dir, adj),
        }
    }

    #[inline]
    pub fn deposit_env(&mut self, phi: &RenderParams, dir: Vec3, adj: [f64; 3]) {
        let (idx, w) = phi.environment.stencil(dir);
        for (i, wi) in idx.iter().zip(w) {
            for c in 0..3 {
                self.environment[i * 3 + c] += wi as f64 * adj[c];
            }
        }
    }

    pub fn finish(self) -> RenderGrads {
        let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        RenderGrads {
            grid: f(self.grid),
            density_scale: self.density_scale as f32,
            albedo: self.albedo.map(|x| x as f32),
            hg_g: self.hg_g as f32,
            environment: f(self.environment),
            background: self.background.map(f),
        }
    }
}
