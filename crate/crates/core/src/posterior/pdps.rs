//! Alternating optimization of the physical parameters φ and posterior
//! sampling of the latent.

use std::time::Instant;

use ndtape::{Adam, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::dps::{dps_sample, DpsConfig};
use super::measure::{Measurement, Operator, Prior};
use crate::diffusion::{ddim_sample, DdimConfig};
use crate::error::{NimbusError, Result};
use crate::monoplanar::LatentCode;
use crate::render::{render, render_backward, Background, Camera, Image, RenderConfig, RenderMode, RenderParams};
use crate::rng;
use crate::volume::DenseGrid3;

/// One observed image with its known camera.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// Which members of φ are optimized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhiFree {
    pub density_scale: bool,
    pub albedo: bool,
    pub background: bool,
    pub environment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhiBounds {
    pub density_scale: [f32; 2],
    pub albedo: [f32; 2],
    pub radiance: [f32; 2],
}

impl Default for PhiBounds {
    fn default() -> Self {
        Self {
            density_scale: [0.1, 100.0],
            albedo: [0.0, 1.0],
            radiance: [0.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdpsConfig {
    pub passes: usize,
    pub phi_steps: usize,
    pub phi_lr: f32,
    pub free: PhiFree,
    pub bounds: PhiBounds,
    /// Total-variation weight on environment texels.
    pub tv_weight: f32,
    /// Quadratic penalty weight outside `bounds`.
    pub box_weight: f32,
    /// Restart level per pass as a fraction of `T`; empty means a linear
    /// sweep from 0.9 down to 0.4.
    pub restart_levels: Vec<f64>,
    /// ζ at the first and the last pass.
    pub zeta_range: [f64; 2],
    /// 1-based passes followed by data-consistency refinement; `None`
    /// picks the passes around the middle.
    pub refine_passes: Option<Vec<usize>>,
    pub refine_steps: usize,
    pub refine_lr: f32,
    pub dps: DpsConfig,
    /// Quadrature steps of the deterministic renderer used for guidance.
    pub guide_steps: usize,
    /// Path-traced renderer for φ updates, the mismatch offset and evaluation.
    pub render: RenderConfig,
    /// Shift the guidance target by the path-traced minus deterministic
    /// render of the current estimate.
    pub mismatch_offset: bool,
    /// A pass whose loss exceeds this multiple of the best loss counts as
    /// diverging; two in a row abort.
    pub divergence_factor: f64,
}

impl Default for PdpsConfig {
    fn default() -> Self {
        Self {
            passes: 6,
            phi_steps: 30,
            phi_lr: 0.05,
            free: PhiFree::default(),
            bounds: PhiBounds::default(),
            tv_weight: 1e-2,
            box_weight: 10.0,
            restart_levels: Vec::new(),
            zeta_range: [0.1, 1.0],
            refine_passes: None,
            refine_steps: 40,
            refine_lr: 1e-2,
            dps: DpsConfig::default(),
            guide_steps: 96,
            render: RenderConfig {
                mode: RenderMode::PathNee,
                spp: 16,
                ..Default::default()
            },
            mismatch_offset: true,
            divergence_factor: 10.0,
        }
    }
}

impl PdpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(NimbusError::Config("passes must be >= 1".into()));
        }
        if !self.restart_levels.is_empty() && self.restart_levels.len() != self.passes {
            return Err(NimbusError::Config(format!(
                "{} restart levels for {} passes",
                self.restart_levels.len(),
                self.passes
            )));
        }
        if self.restart_levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(NimbusError::Config("restart levels must lie in (0, 1]".into()));
        }
        let [z0, z1] = self.zeta_range;
        if !(0.1..=1.0).contains(&z0) || !(0.1..=1.0).contains(&z1) {
            return Err(NimbusError::Config(format!("zeta range {:?} outside [0.1, 1]", self.zeta_range)));
        }
        if let Some(r) = &self.refine_passes {
            if r.iter().any(|&p| p == 0 || p > self.passes) {
                return Err(NimbusError::Config(format!("refine passes {r:?} outside 1..={}", self.passes)));
            }
        }
        if self.render.mode != RenderMode::PathNee {
            return Err(NimbusError::Config("pdps evaluation renderer must be path_nee".into()));
        }
        if !(self.phi_lr > 0.0) || !(self.refine_lr > 0.0) || self.guide_steps < 2 {
            return Err(NimbusError::Config(format!("invalid pdps config {self:?}")));
        }
        self.render.validate()?;
        self.dps.validate()
    }

    pub fn restart_fraction(&self, pass: usize) -> f64 {
        if !self.restart_levels.is_empty() {
            return self.restart_levels[pass - 1];
        }
        if self.passes == 1 {
            return 0.9;
        }
        0.9 - 0.5 * (pass - 1) as f64 / (self.passes - 1) as f64
    }

    pub fn zeta(&self, pass: usize) -> f64 {
        let [a, b] = self.zeta_range;
        if self.passes == 1 {
            return b;
        }
        a + (b - a) * (pass - 1) as f64 / (self.passes - 1) as f64
    }

    /// `{⌈P/2⌉-1, ⌈P/2⌉, ⌈P/2⌉+1} ∩ [1, P]` unless configured.
    pub fn refine_set(&self) -> Vec<usize> {
        if let Some(r) = &self.refine_passes {
            return r.clone();
        }
        let mid = self.passes.div_ceil(2);
        (mid.saturating_sub(1)..=mid + 1)
            .filter(|&p| p >= 1 && p <= self.passes)
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PdpsCounters {
    pub phi_optimizations: usize,
    pub posterior_draws: usize,
    /// Passes on which refinement ran.
    pub refined: Vec<usize>,
    pub projections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassLog {
    pub pass: usize,
    pub restart_level: usize,
    pub zeta: f64,
    /// Mean squared path-traced residual over all views after the pass.
    pub data_loss: f64,
    pub density_scale: f32,
    pub albedo: [f32; 3],
    /// Mean uniform background radiance, if φ has one.
    pub background: Option<f32>,
    pub refined: bool,
    /// Accepted refinement losses, in order.
    pub refine_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PdpsResult {
    pub phi: RenderParams,
    pub latent: LatentCode,
    pub grid: DenseGrid3,
    pub log: Vec<PassLog>,
    pub counters: PdpsCounters,
    /// Wall-clock seconds per pass.
    pub timings: Vec<f64>,
    /// Set when the run stopped early; the fields above hold the last state.
    pub aborted: Option<String>,
}

impl PdpsResult {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("pass,restart_level,zeta,data_loss,density_scale,albedo_r,albedo_g,albedo_b,background,refined\n");
        for p in &self.log {
            let bg = p.background.map_or(String::new(), |b| format!("{b}"));
            s.push_str(&format!(
                "{},{},{},{:e},{},{},{},{},{},{}\n",
                p.pass, p.restart_level, p.zeta, p.data_loss, p.density_scale, p.albedo[0], p.albedo[1], p.albedo[2], bg, p.refined
            ));
        }
        s
    }
}

fn check_views(views: &[View], phi: &RenderParams) -> Result<()> {
    if views.is_empty() {
        return Err(NimbusError::Contract("at least one view is required".into()));
    }
    for v in views {
        phi.check_camera(&v.camera)?;
        if v.image.channels != 3 || v.image.width != v.camera.width || v.image.height != v.camera.height {
            return Err(NimbusError::Contract("view image does not match its camera".into()));
        }
    }
    Ok(())
}

fn total_pixels(views: &[View]) -> usize {
    views.iter().map(|v| v.image.data.len()).sum()
}

/// Mean squared path-traced residual over all views.
pub fn render_loss(grid: &DenseGrid3, phi: &RenderParams, views: &[View], cfg: &RenderConfig) -> Result<f64> {
    let mut s = 0.0;
    for v in views {
        let img = render(grid, phi, &v.camera, cfg)?;
        s += img
            .data
            .iter()
            .zip(&v.image.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
    }
    Ok(s / total_pixels(views) as f64)
}

/// Flat view of the free members of φ; the order is density scale,
/// albedo, background, environment.
fn phi_values(phi: &RenderParams, free: &PhiFree) -> Vec<f32> {
    let mut v = Vec::new();
    if free.density_scale {
        v.push(phi.density_scale);
    }
    if free.albedo {
        v.extend_from_slice(&phi.albedo);
    }
    if free.background {
        if let Some(bg) = &phi.background {
            v.extend_from_slice(bg.values());
        }
    }
    if free.environment {
        v.extend_from_slice(&phi.environment.texels);
    }
    v
}

fn set_phi_values(phi: &mut RenderParams, free: &PhiFree, v: &[f32]) {
    let mut o = 0;
    if free.density_scale {
        phi.density_scale = v[o];
        o += 1;
    }
    if free.albedo {
        phi.albedo.copy_from_slice(&v[o..o + 3]);
        o += 3;
    }
    if free.background {
        if let Some(bg) = &mut phi.background {
            let n = bg.param_len();
            bg.values_mut().copy_from_slice(&v[o..o + n]);
            o += n;
        }
    }
    if free.environment {
        let n = phi.environment.texels.len();
        phi.environment.texels.copy_from_slice(&v[o..o + n]);
    }
}

/// Per-value bounds matching [`phi_values`].
fn phi_bounds(phi: &RenderParams, free: &PhiFree, b: &PhiBounds) -> Vec<[f32; 2]> {
    let mut v = Vec::new();
    if free.density_scale {
        v.push(b.density_scale);
    }
    if free.albedo {
        v.extend([b.albedo; 3]);
    }
    if free.background {
        if let Some(bg) = &phi.background {
            v.extend(std::iter::repeat_n(b.radiance, bg.param_len()));
        }
    }
    if free.environment {
        v.extend(std::iter::repeat_n(b.radiance, phi.environment.texels.len()));
    }
    v
}

/// Gradient of `L_reg`: environment total variation (smoothed) plus the
/// quadratic box penalty, in [`phi_values`] layout.
fn reg_grad(phi: &RenderParams, free: &PhiFree, bounds: &[[f32; 2]], cfg: &PdpsConfig) -> Vec<f32> {
    let vals = phi_values(phi, free);
    let mut g: Vec<f32> = vals
        .iter()
        .zip(bounds)
        .map(|(&x, &[lo, hi])| {
            if x < lo {
                2.0 * cfg.box_weight * (x - lo)
            } else if x > hi {
                2.0 * cfg.box_weight * (x - hi)
            } else {
                0.0
            }
        })
        .collect();
    if free.environment && cfg.tv_weight > 0.0 {
        let env = &phi.environment;
        let off = vals.len() - env.texels.len();
        let (w, h) = (env.width, env.height);
        let at = |x: usize, y: usize, c: usize| env.texels[(y * w + x) * 3 + c];
        const EPS: f32 = 1e-3;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    // Horizontal neighbors wrap in azimuth.
                    let xr = (x + 1) % w;
                    let d = at(xr, y, c) - at(x, y, c);
                    let dg = cfg.tv_weight * d / (d * d + EPS * EPS).sqrt();
                    g[off + (y * w + xr) * 3 + c] += dg;
                    g[off + (y * w + x) * 3 + c] -= dg;
                    if y + 1 < h {
                        let d = at(x, y + 1, c) - at(x, y, c);
                        let dg = cfg.tv_weight * d / (d * d + EPS * EPS).sqrt();
                        g[off + ((y + 1) * w + x) * 3 + c] += dg;
                        g[off + (y * w + x) * 3 + c] -= dg;
                    }
                }
            }
        }
    }
    g
}

fn render_grads_to_values(g: &crate::render::RenderGrads, free: &PhiFree) -> Vec<f32> {
    let mut v = Vec::new();
    if free.density_scale {
        v.push(g.density_scale);
    }
    if free.albedo {
        v.extend_from_slice(&g.albedo);
    }
    if free.background {
        if let Some(b) = &g.background {
            v.extend_from_slice(b);
        }
    }
    if free.environment {
        v.extend_from_slice(&g.environment);
    }
    v
}

/// `phi_steps` Adam steps on the free members of φ with θ held fixed.
/// Each step pairs a residual from one path-traced sample with the
/// gradient replayed on an independent sample. Returns the number of
/// box projections.
fn optimize_phi(
    grid: &DenseGrid3,
    phi: &mut RenderParams,
    views: &[View],
    cfg: &PdpsConfig,
    seed: u64,
) -> Result<usize> {
    let free = &cfg.free;
    let mut values = phi_values(phi, free);
    if values.is_empty() || cfg.phi_steps == 0 {
        return Ok(0);
    }
    let bounds = phi_bounds(phi, free, &cfg.bounds);
    let n = total_pixels(views) as f32;
    let mut opt = Adam::new(cfg.phi_lr);
    let mut projections = 0;
    for step in 0..cfg.phi_steps {
        let mut grad = vec![0.0f32; values.len()];
        for (vi, v) in views.iter().enumerate() {
            let key = rng::mix(&[seed, step as u64, vi as u64]);
            let fwd = RenderConfig {
                seed: key,
                ..cfg.render.clone()
            };
            let bwd = RenderConfig {
                seed: key ^ 0x9E37_79B9_7F4A_7C15,
                ..cfg.render.clone()
            };
            let img = render(grid, phi, &v.camera, &fwd)?;
            let adj_data = img.data.iter().zip(&v.image.data).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let adj = Image::new(v.camera.width, v.camera.height, 3, adj_data)?;
            let g = render_backward(grid, phi, &v.camera, &bwd, &adj)?;
            for (a, b) in grad.iter_mut().zip(render_grads_to_values(&g, free)) {
                *a += b;
            }
        }
        for (a, b) in grad.iter_mut().zip(reg_grad(phi, free, &bounds, cfg)) {
            *a += b;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NimbusError::Numerical("non-finite φ gradient".into()));
        }
        let mut t = Tensor::new(&[values.len()], values.clone())?;
        opt.step(&mut [&mut t], &[Tensor::new(&[grad.len()], grad)?])?;
        values = t.into_data();
        for (x, &[lo, hi]) in values.iter_mut().zip(&bounds) {
            if *x < lo || *x > hi {
                *x = x.clamp(lo, hi);
                projections += 1;
            }
        }
        set_phi_values(phi, free, &values);
    }
    Ok(projections)
}

/// Guidance measurement for the current φ, optionally shifted by the
/// path-traced minus deterministic render of `grid`.
fn guidance(
    grid: &DenseGrid3,
    phi: &RenderParams,
    views: &[View],
    cfg: &PdpsConfig,
    seed: u64,
) -> Result<Measurement> {
    let ea = RenderConfig::ea(cfg.guide_steps);
    let mut ys = Vec::with_capacity(views.len());
    for (vi, v) in views.iter().enumerate() {
        let mut y = v.image.data.clone();
        if cfg.mismatch_offset {
            let path = render(
                grid,
                phi,
                &v.camera,
                &RenderConfig {
                    seed: rng::mix(&[seed, vi as u64, 0x4F46_4653]),
                    ..cfg.render.clone()
                },
            )?;
            let det = render(grid, phi, &v.camera, &ea)?;
            for ((y, p), d) in y.iter_mut().zip(&path.data).zip(&det.data) {
                *y -= p - d;
            }
        }
        ys.push(Tensor::new(&[v.camera.height, v.camera.width, 3], y)?);
    }
    Measurement::new(
        Operator::Render {
            cameras: views.iter().map(|v| v.camera.clone()).collect(),
            params: phi.clone(),
            steps: cfg.guide_steps,
        },
        ys,
    )
}

/// Prior-free descent of the standardized latent on the guidance loss.
/// A step is kept only if it lowers the loss; otherwise the step size is
/// halved. Returns the accepted losses, starting with the initial one.
pub fn refine_latent(prior: &Prior, meas: &Measurement, z: &mut Tensor, steps: usize, lr: f32) -> Result<Vec<f64>> {
    let eval = |z: &Tensor| -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let loss = meas.data_loss(prior, &zv)?;
        let l = loss.item() as f64;
        let g = tape.backward(&loss)?.wrt(&zv);
        Ok((l, g))
    };
    let (mut loss, mut grad) = eval(z)?;
    let mut losses = vec![loss];
    let mut lr = lr;
    for _ in 0..steps {
        let gn = grad.norm();
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        // Normalized gradient step of length `lr·√n`.
        let len = lr as f64 * (z.len() as f64).sqrt();
        let mut cand = z.clone();
        cand.axpy(-(len / gn) as f32, &grad)?;
        let (l, g) = eval(&cand)?;
        if l.is_finite() && l < loss {
            *z = cand;
            loss = l;
            grad = g;
            losses.push(l);
            lr *= 1.2;
        } else {
            lr *= 0.5;
        }
    }
    Ok(losses)
}

pub fn pdps_reconstruct(
    prior: &Prior,
    views: &[View],
    phi0: &RenderParams,
    theta0: Option<&LatentCode>,
    cfg: &PdpsConfig,
    seed: u64,
) -> Result<PdpsResult> {
    cfg.validate()?;
    phi0.validate()?;
    check_views(views, phi0)?;
    if cfg.free.background && phi0.background.is_none() {
        return Err(NimbusError::Config("background is free but φ has none".into()));
    }
    let big_t = prior.model.schedule.len();
    let mut r = rng::stream(&[seed, 0x5044_5053]);
    let mut phi = phi0.clone();
    let mut z = match theta0 {
        Some(t) => prior.to_standard(t),
        None => {
            let ddim = DdimConfig {
                eta: 0.0,
                ..cfg.dps.ddim.clone()
            };
            let m = prior.model;
            ddim_sample(m, &m.schedule, &ddim, &m.latent_shape, &mut r, None)?
        }
    };
    let mut grid = prior.decode(&z)?;
    let refine = cfg.refine_set();
    let mut counters = PdpsCounters::default();
    let mut log = Vec::new();
    let mut timings = Vec::new();
    let mut best = f64::INFINITY;
    let mut diverging = 0;
    let mut aborted = None;
    for pass in 1..=cfg.passes {
        let clock = Instant::now();
        counters.projections += optimize_phi(&grid, &mut phi, views, cfg, rng::mix(&[seed, pass as u64, 1]))?;
        counters.phi_optimizations += 1;

        let k = ((cfg.restart_fraction(pass) * big_t as f64).round() as usize).clamp(1, big_t);
        let zeta = cfg.zeta(pass);
        let meas = guidance(&grid, &phi, views, cfg, rng::mix(&[seed, pass as u64, 2]))?;
        let zk = prior.model.schedule.forward_noise(&z, k, &mut r)?.0;
        let dps_cfg = DpsConfig { zeta, ..cfg.dps.clone() };
        z = dps_sample(prior, &meas, &dps_cfg, &mut r, Some((zk, k)))?.z;
        counters.posterior_draws += 1;

        let refined = refine.contains(&pass);
        let mut refine_losses = Vec::new();
        if refined {
            grid = prior.decode(&z)?;
            let meas = guidance(&grid, &phi, views, cfg, rng::mix(&[seed, pass as u64, 3]))?;
            refine_losses = refine_latent(prior, &meas, &mut z, cfg.refine_steps, cfg.refine_lr)?;
            counters.refined.push(pass);
        }
        grid = prior.decode(&z)?;
        let eval = RenderConfig {
            seed: rng::mix(&[seed, pass as u64, 4]),
            ..cfg.render.clone()
        };
        let data_loss = render_loss(&grid, &phi, views, &eval)?;
        log.push(PassLog {
            pass,
            restart_level: k,
            zeta,
            data_loss,
            density_scale: phi.density_scale,
            albedo: phi.albedo,
            background: phi
                .background
                .as_ref()
                .filter(|b| matches!(b, Background::Uniform(_)))
                .map(|b| b.values().iter().sum::<f32>() / b.values().len() as f32),
            refined,
            refine_losses,
        });
        timings.push(clock.elapsed().as_secs_f64());
        if !data_loss.is_finite() {
            aborted = Some(format!("non-finite data loss at pass {pass}"));
            break;
        }
        if data_loss > cfg.divergence_factor * best {
            diverging += 1;
            if diverging >= 2 {
                aborted = Some(format!("data loss diverged over passes {}..={pass}", pass - 1));
                break;
            }
        } else {
            diverging = 0;
        }
        best = best.min(data_loss);
    }
    Ok(PdpsResult {
        phi,
        latent: prior.to_latent(&z)?,
        grid,
        log,
        counters,
        timings,
        aborted,
    })
}
