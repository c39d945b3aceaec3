//! Deterministic primary-ray rendering: emission-absorption radiance and
//! transmittance images, both exactly differentiable.

use ndtape::{Tensor, Var};
use rayon::prelude::*;

use super::camera::{intersect_box, Camera, Vec3};
use super::env::EnvMap;
use super::image::Image;
use super::medium::Medium;
use super::params::{GradAccum, ParamVars, RenderGrads, RenderParams};
use crate::error::{NimbusError, Result};
use crate::volume::DenseGrid3;

/// Pixels per deterministic gradient-reduction chunk.
const CHUNK: usize = 64;

#[derive(Clone, Copy)]
struct Primary {
    dir: Vec3,
    origin: Vec3,
    span: Option<(f32, f32)>,
    column: f64,
}

fn march(m: &Medium, camera: &Camera, steps: usize) -> Vec<Primary> {
    (0..camera.pixel_count())
        .into_par_iter()
        .map(|p| {
            let ray = camera.center_ray(p % camera.width, p / camera.width);
            let span = intersect_box(&ray, m.half);
            let column = span.map_or(0.0, |(t0, t1)| m.column(ray.origin, ray.dir, t0, t1, steps));
            Primary {
                dir: ray.dir,
                origin: ray.origin,
                span,
                column,
            }
        })
        .collect()
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < 2 {
        return Err(NimbusError::Contract(format!("quadrature needs >= 2 steps, got {steps}")));
    }
    Ok(())
}

fn check_grid(extents: [usize; 3], data: &[f32]) -> Result<()> {
    if extents.iter().any(|&n| n < 2) || data.len() != extents.iter().product::<usize>() {
        return Err(NimbusError::Contract(format!("grid {extents:?} with {} values", data.len())));
    }
    Ok(())
}

/// Emission-absorption image: `T · B + (1 - T) · albedo ⊙ mean(env)`, with
/// `B` the escape radiance of the pixel's center ray.
pub fn render_ea(grid: &DenseGrid3, phi: &RenderParams, camera: &Camera, steps: usize) -> Result<Image> {
    ea_forward(grid.extents(), grid.data(), phi, camera, steps)
}

fn ea_forward(extents: [usize; 3], data: &[f32], phi: &RenderParams, camera: &Camera, steps: usize) -> Result<Image> {
    check_steps(steps)?;
    check_grid(extents, data)?;
    phi.check_camera(camera)?;
    let m = Medium::new(extents, data, phi.density_scale);
    let ambient = phi.environment.mean();
    let mut out = vec![0.0f32; camera.pixel_count() * 3];
    for (p, pr) in march(&m, camera, steps).iter().enumerate() {
        let t = (-(phi.density_scale as f64) * pr.column).exp();
        let b = phi.escape_radiance(p, pr.dir);
        for c in 0..3 {
            out[3 * p + c] = (t * b[c] as f64 + (1.0 - t) * (phi.albedo[c] * ambient[c]) as f64) as f32;
        }
    }
    Image::new(camera.width, camera.height, 3, out)
}

/// Gradient of `Σ adj ⊙ render_ea(...)`.
pub fn render_ea_backward(
    grid: &DenseGrid3,
    phi: &RenderParams,
    camera: &Camera,
    steps: usize,
    adj: &Image,
) -> Result<RenderGrads> {
    Ok(ea_backward(grid.extents(), grid.data(), phi, camera, steps, &adj.data)?.finish())
}

fn ea_backward(
    extents: [usize; 3],
    data: &[f32],
    phi: &RenderParams,
    camera: &Camera,
    steps: usize,
    adj: &[f32],
) -> Result<GradAccum> {
    check_steps(steps)?;
    check_grid(extents, data)?;
    phi.check_camera(camera)?;
    if adj.len() != camera.pixel_count() * 3 {
        return Err(NimbusError::Contract("adjoint image does not match camera".into()));
    }
    let s = phi.density_scale as f64;
    let m = Medium::new(extents, data, phi.density_scale);
    let ambient = phi.environment.mean();
    let prim = march(&m, camera, steps);
    let n = data.len();
    let chunks: Vec<GradAccum> = prim
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = GradAccum::new(n, phi);
            let mut amb = [0.0f64; 3];
            for (k, pr) in chunk.iter().enumerate() {
                let p = ci * CHUNK + k;
                let t = (-s * pr.column).exp();
                let b = phi.escape_radiance(p, pr.dir);
                let a = &adj[3 * p..3 * p + 3];
                let mut dt = 0.0f64;
                let mut esc = [0.0f64; 3];
                for c in 0..3 {
                    let ac = a[c] as f64;
                    dt += ac * (b[c] as f64 - (phi.albedo[c] * ambient[c]) as f64);
                    esc[c] = ac * t;
                    g.albedo[c] += ac * (1.0 - t) * ambient[c] as f64;
                    amb[c] += ac * (1.0 - t) * phi.albedo[c] as f64;
                }
                g.deposit_escape(phi, p, pr.dir, esc);
                let dtau = -t * dt;
                if let Some((t0, t1)) = pr.span {
                    g.density_scale += dtau * pr.column;
                    m.deposit_column(pr.origin, pr.dir, t0, t1, steps, dtau * s, &mut g.grid);
                }
            }
            ambient_adjoint(&mut g, &phi.environment, amb);
            g
        })
        .collect();
    let mut total = GradAccum::new(n, phi);
    for c in &chunks {
        total.merge(c);
    }
    Ok(total)
}

/// The ambient term is a solid-angle mean, so each texel receives its row
/// weight times the accumulated adjoint `k`.
fn ambient_adjoint(g: &mut GradAccum, env: &EnvMap, k: [f64; 3]) {
    if k.iter().all(|&v| v == 0.0) {
        return;
    }
    let rw = env.row_weights();
    for (ti, px) in g.environment.chunks_exact_mut(3).enumerate() {
        let w = rw[ti / env.width] as f64;
        for c in 0..3 {
            px[c] += w * k[c];
        }
    }
}

/// Per-pixel transmittance of center rays through the medium (1 channel).
pub fn transmittance_image(grid: &DenseGrid3, s: f32, camera: &Camera, steps: usize) -> Result<Image> {
    trans_forward(grid.extents(), grid.data(), s, camera, steps)
}

fn trans_forward(extents: [usize; 3], data: &[f32], s: f32, camera: &Camera, steps: usize) -> Result<Image> {
    check_steps(steps)?;
    check_grid(extents, data)?;
    camera.validate()?;
    let m = Medium::new(extents, data, s);
    let t = march(&m, camera, steps)
        .iter()
        .map(|pr| (-(s as f64) * pr.column).exp() as f32)
        .collect();
    Image::new(camera.width, camera.height, 1, t)
}

fn trans_backward(extents: [usize; 3], data: &[f32], s: f32, camera: &Camera, steps: usize, adj: &[f32]) -> (Vec<f64>, f64) {
    let m = Medium::new(extents, data, s);
    let prim = march(&m, camera, steps);
    let n = data.len();
    let parts: Vec<(Vec<f64>, f64)> = prim
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = vec![0.0f64; n];
            let mut ds = 0.0f64;
            for (k, pr) in chunk.iter().enumerate() {
                let Some((t0, t1)) = pr.span else { continue };
                let t = (-(s as f64) * pr.column).exp();
                let dtau = -t * adj[ci * CHUNK + k] as f64;
                ds += dtau * pr.column;
                m.deposit_column(pr.origin, pr.dir, t0, t1, steps, dtau * s as f64, &mut g);
            }
            (g, ds)
        })
        .collect();
    let mut g = vec![0.0f64; n];
    let mut ds = 0.0;
    for (pg, pds) in &parts {
        g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
        ds += pds;
    }
    (g, ds)
}

fn grid_extents(grid: &Var) -> Result<[usize; 3]> {
    match *grid.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(NimbusError::Contract(format!("grid var of shape {:?}", grid.shape()))),
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Tape-differentiable [`transmittance_image`]: `grid [nx,ny,nz]` and
/// scalar `s` in, `[H, W]` out.
pub fn transmittance_image_var(grid: &Var, s: &Var, camera: &Camera, steps: usize) -> Result<Var> {
    let extents = grid_extents(grid)?;
    let sv = s.item();
    let img = trans_forward(extents, grid.data(), sv, camera, steps)?;
    let data = grid.value().clone();
    let camera = camera.clone();
    let out = Tensor::new(&[camera.height, camera.width], img.data)?;
    Ok(grid.tape().record(&[grid, s], out, move |adj| {
        let (g, ds) = trans_backward(extents, data.data(), sv, &camera, steps, adj.data());
        vec![
            Some(Tensor::new(&extents, to_f32(&g)).unwrap()),
            Some(Tensor::scalar(ds as f32)),
        ]
    })?)
}

/// Tape-differentiable [`render_ea`]. `template` fixes the structure
/// (environment resolution, background kind) and the non-differentiable
/// members; values come from `vars`. Output `[H, W, 3]`.
pub fn render_ea_var(grid: &Var, vars: &ParamVars, template: &RenderParams, camera: &Camera, steps: usize) -> Result<Var> {
    let extents = grid_extents(grid)?;
    let mut phi = template.clone();
    phi.density_scale = vars.density_scale.item();
    phi.albedo.copy_from_slice(vars.albedo.data());
    if vars.environment.data().len() != phi.environment.texels.len() {
        return Err(NimbusError::Contract("environment var does not match template".into()));
    }
    phi.environment.texels.copy_from_slice(vars.environment.data());
    match (&mut phi.background, &vars.background) {
        (Some(bg), Some(v)) if bg.param_len() == v.data().len() => bg.values_mut().copy_from_slice(v.data()),
        (None, None) => {}
        _ => return Err(NimbusError::Contract("background var does not match template".into())),
    }
    let img = ea_forward(extents, grid.data(), &phi, camera, steps)?;
    let data = grid.value().clone();
    let camera = camera.clone();
    let out = Tensor::new(&[camera.height, camera.width, 3], img.data)?;
    let mut inputs = vec![grid, &vars.density_scale, &vars.albedo, &vars.environment];
    if let Some(b) = &vars.background {
        inputs.push(b);
    }
    let env_shape = vars.environment.shape().to_vec();
    Ok(grid.tape().record(&inputs, out, move |adj| {
        let g = ea_backward(extents, data.data(), &phi, &camera, steps, adj.data()).unwrap();
        let mut res = vec![
            Some(Tensor::new(&extents, to_f32(&g.grid)).unwrap()),
            Some(Tensor::scalar(g.density_scale as f32)),
            Some(Tensor::new(&[3], g.albedo.iter().map(|&x| x as f32).collect()).unwrap()),
            Some(Tensor::new(&env_shape, to_f32(&g.environment)).unwrap()),
        ];
        if let Some(b) = g.background {
            res.push(Some(Tensor::new(&[b.len()], to_f32(&b)).unwrap()));
        }
        res
    })?)
}
