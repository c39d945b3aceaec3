//! Inverse problems built on [`dps_sample`].

use ndtape::Tensor;
use rand::Rng;

use super::dps::{dps_sample, DpsConfig, DpsResult};
use super::measure::{coarse_sample, masked, Measurement, Operator, Prior};
use crate::error::{NimbusError, Result};
use crate::metrics;
use crate::monoplanar::LatentCode;
use crate::render::{transmittance_image, Camera, Image};
use crate::volume::DenseGrid3;

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub grid: DenseGrid3,
    pub dps: DpsResult,
    /// RMSE between the observation and the operator applied to the result.
    pub consistency: f64,
}

fn finish(prior: &Prior, meas: &Measurement, dps: DpsResult) -> Result<Reconstruction> {
    let grid = prior.decode(&dps.z)?;
    let consistency = meas.residual_rmse(prior, &dps.z)?;
    Ok(Reconstruction {
        grid,
        dps,
        consistency,
    })
}

/// Densities observed at jittered coarse points (see
/// [`super::coarse_jittered_points`]) lifted to the decoder resolution.
pub fn superresolve(
    prior: &Prior,
    y_coarse: &[f32],
    points: &[[f32; 3]],
    cfg: &DpsConfig,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    if y_coarse.len() != points.len() {
        return Err(NimbusError::Contract("coarse values and points differ in count".into()));
    }
    let meas = Measurement::new(
        Operator::CoarseSample {
            points: points.to_vec(),
        },
        vec![Tensor::new(&[points.len()], y_coarse.to_vec())?],
    )?;
    let dps = dps_sample(prior, &meas, cfg, rng, None)?;
    finish(prior, &meas, dps)
}

/// RMSE of the coarse resampling of `grid` against the observation.
pub fn coarse_consistency(grid: &DenseGrid3, y_coarse: &[f32], points: &[[f32; 3]]) -> Result<f64> {
    metrics::rmse(&coarse_sample(grid, points), y_coarse)
}

/// Completes a volume from the voxels where `mask` is nonzero.
pub fn inpaint(
    prior: &Prior,
    y_masked: &DenseGrid3,
    mask: &DenseGrid3,
    cfg: &DpsConfig,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    if mask.extents() != prior.decoder.config.grid_extents {
        return Err(NimbusError::Contract("mask must match the decoder grid".into()));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(NimbusError::Contract("mask must be binary".into()));
    }
    let y = masked(y_masked, mask)?;
    let meas = Measurement::new(Operator::Mask { mask: mask.clone() }, vec![y.to_tensor()])?;
    let dps = dps_sample(prior, &meas, cfg, rng, None)?;
    finish(prior, &meas, dps)
}

/// RMSE over the voxels inside `mask`.
pub fn masked_rmse(a: &DenseGrid3, b: &DenseGrid3, mask: &DenseGrid3) -> Result<f64> {
    let (mut s, mut n) = (0.0f64, 0usize);
    for ((x, y), m) in a.data().iter().zip(b.data()).zip(mask.data()) {
        if *m != 0.0 {
            s += ((x - y) as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(NimbusError::Contract("empty mask".into()));
    }
    Ok((s / n as f64).sqrt())
}

/// Volume whose transmittance image under `camera` matches `y_t`.
pub fn reconstruct_from_transmittance(
    prior: &Prior,
    y_t: &Image,
    camera: &Camera,
    density_scale: f32,
    steps: usize,
    cfg: &DpsConfig,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    if y_t.channels != 1 || y_t.width != camera.width || y_t.height != camera.height {
        return Err(NimbusError::Contract("transmittance image does not match camera".into()));
    }
    if y_t.data.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(NimbusError::Contract("transmittance values must lie in (0, 1]".into()));
    }
    let meas = Measurement::new(
        Operator::Transmittance {
            camera: camera.clone(),
            density_scale,
            steps,
        },
        vec![Tensor::new(&[camera.height, camera.width], y_t.data.clone())?],
    )?;
    let dps = dps_sample(prior, &meas, cfg, rng, None)?;
    finish(prior, &meas, dps)
}

pub fn transmittance_consistency(grid: &DenseGrid3, y_t: &Image, camera: &Camera, s: f32, steps: usize) -> Result<f64> {
    let img = transmittance_image(grid, s, camera, steps)?;
    metrics::rmse(&img.data, &y_t.data)
}

/// `(1-α) θ_a + α θ_b`.
pub fn latent_mixture(a: &LatentCode, b: &LatentCode, alpha: f32) -> Result<LatentCode> {
    if a.dims() != b.dims() {
        return Err(NimbusError::Contract("latents differ in shape".into()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
    LatentCode::new(Tensor::new(a.plane.shape(), data)?)
}

/// Posterior sample pulled toward the latent blend; the prior keeps the
/// result on the data manifold.
pub fn interpolate_latents(
    prior: &Prior,
    a: &LatentCode,
    b: &LatentCode,
    alpha: f32,
    cfg: &DpsConfig,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NimbusError::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let target = prior.to_standard(&latent_mixture(a, b, alpha)?);
    let meas = Measurement::new(
        Operator::LatentMixture {
            a: a.clone(),
            b: b.clone(),
            alpha,
        },
        vec![target],
    )?;
    let dps = dps_sample(prior, &meas, cfg, rng, None)?;
    finish(prior, &meas, dps)
}
