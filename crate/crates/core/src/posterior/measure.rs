//! Measurement operators `A(θ; φ)` and their observations.

use ndtape::{Tape, Tensor, Var};
use rand::Rng;

use crate::diffusion::{DiffusionModel, Standardizer};
use crate::error::{NimbusError, Result};
use crate::monoplanar::{DecoderParams, LatentCode};
use crate::render::{render_ea_var, transmittance_image_var, Camera, RenderParams};
use crate::rng;
use crate::volume::DenseGrid3;

/// The diffusion prior together with the decoder that maps its latents to
/// densities.
#[derive(Clone, Copy)]
pub struct Prior<'a> {
    pub model: &'a DiffusionModel,
    pub decoder: &'a DecoderParams,
}

impl<'a> Prior<'a> {
    pub fn new(model: &'a DiffusionModel, decoder: &'a DecoderParams) -> Result<Self> {
        let want = [
            decoder.config.latent_channels,
            decoder.config.latent_size,
            decoder.config.latent_size,
        ];
        if model.latent_shape != want {
            return Err(NimbusError::Contract(format!(
                "diffusion latents {:?} do not match decoder latents {want:?}",
                model.latent_shape
            )));
        }
        Ok(Self { model, decoder })
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.model.standardizer
    }

    pub fn to_latent(&self, z: &Tensor) -> Result<LatentCode> {
        LatentCode::new(self.standardizer().inverse(z))
    }

    pub fn to_standard(&self, theta: &LatentCode) -> Tensor {
        self.standardizer().forward(&theta.plane)
    }

    pub fn decode(&self, z: &Tensor) -> Result<DenseGrid3> {
        self.decoder.decode_grid(&self.to_latent(z)?, self.decoder.config.grid_extents)
    }

    /// Raw latent on the tape from a standardized one.
    pub fn latent_var(&self, z: &Var) -> Result<Var> {
        let s = self.standardizer();
        let shape = z.shape().to_vec();
        let hw = z.value().len() / s.mean.len();
        let scale = Tensor::from_fn(&shape, |i| s.std[i / hw]);
        let shift = Tensor::from_fn(&shape, |i| s.mean[i / hw]);
        Ok(z.mul_const(&scale)?.add_const(&shift)?)
    }
}

#[derive(Clone, Debug)]
pub enum Operator {
    /// Standardized latent itself.
    Identity,
    /// Identity whose target is the blend `(1-α) θ_a + α θ_b`.
    LatentMixture { a: LatentCode, b: LatentCode, alpha: f32 },
    /// Decoded grid restricted to the nonzero voxels of `mask`.
    Mask { mask: DenseGrid3 },
    /// Decoded density at fixed (jittered) points of the unit cube.
    CoarseSample { points: Vec<[f32; 3]> },
    Transmittance { camera: Camera, density_scale: f32, steps: usize },
    /// Deterministic emission-absorption renders, one per camera.
    Render { cameras: Vec<Camera>, params: RenderParams, steps: usize },
}

/// An operator bound to its observation, one tensor per output part.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub op: Operator,
    pub y: Vec<Tensor>,
}

impl Measurement {
    pub fn new(op: Operator, y: Vec<Tensor>) -> Result<Self> {
        let m = Self { op, y };
        m.check()?;
        Ok(m)
    }

    pub fn identity(target: Tensor) -> Result<Self> {
        Self::new(Operator::Identity, vec![target])
    }

    fn check(&self) -> Result<()> {
        let parts = match &self.op {
            Operator::Render { cameras, params, .. } => {
                for c in cameras {
                    params.check_camera(c)?;
                }
                params.validate()?;
                cameras.len()
            }
            _ => 1,
        };
        if self.y.len() != parts {
            return Err(NimbusError::Contract(format!(
                "operator produces {parts} parts, observation has {}",
                self.y.len()
            )));
        }
        if self.y.iter().any(|t| !t.all_finite()) {
            return Err(NimbusError::Contract("observation contains non-finite values".into()));
        }
        Ok(())
    }

    /// Operator output on the tape, one `Var` per observation part.
    pub fn apply(&self, prior: &Prior, z: &Var) -> Result<Vec<Var>> {
        let tape = z.tape();
        match &self.op {
            Operator::Identity | Operator::LatentMixture { .. } => Ok(vec![z.clone()]),
            op => {
                let theta = prior.latent_var(z)?;
                let dec = prior.decoder.on_tape(tape, false)?;
                let extents = prior.decoder.config.grid_extents;
                match op {
                    Operator::Mask { mask } => {
                        let grid = dec.decode_grid(&theta, mask.extents())?;
                        Ok(vec![grid.mul_const(&mask.to_tensor())?])
                    }
                    Operator::CoarseSample { points } => {
                        let plane = dec.upsample(&theta)?;
                        Ok(vec![dec.decode_points(&plane, points)?])
                    }
                    Operator::Transmittance {
                        camera,
                        density_scale,
                        steps,
                    } => {
                        let grid = dec.decode_grid(&theta, extents)?;
                        let s = tape.constant(Tensor::scalar(*density_scale));
                        Ok(vec![transmittance_image_var(&grid, &s, camera, *steps)?])
                    }
                    Operator::Render { cameras, params, steps } => {
                        let grid = dec.decode_grid(&theta, extents)?;
                        let vars = params.on_tape(tape, false)?;
                        cameras
                            .iter()
                            .map(|c| render_ea_var(&grid, &vars, params, c, *steps))
                            .collect()
                    }
                    Operator::Identity | Operator::LatentMixture { .. } => unreachable!(),
                }
            }
        }
    }

    /// `‖y - A(z)‖²` on the tape.
    pub fn data_loss(&self, prior: &Prior, z: &Var) -> Result<Var> {
        let outs = self.apply(prior, z)?;
        let mut total: Option<Var> = None;
        for (o, y) in outs.iter().zip(&self.y) {
            if o.value().len() != y.len() {
                return Err(NimbusError::Contract(format!(
                    "operator output {:?} does not match observation {:?}",
                    o.shape(),
                    y.shape()
                )));
            }
            let d = o.reshape(y.shape())?.sq_dist(y)?;
            total = Some(match total {
                Some(t) => t.add(&d)?,
                None => d,
            });
        }
        Ok(total.expect("at least one observation part"))
    }

    /// Residual norm `‖y - A(z)‖` without gradients.
    pub fn residual_norm(&self, prior: &Prior, z: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone(), false);
        Ok((self.data_loss(prior, &zv)?.item() as f64).max(0.0).sqrt())
    }

    /// Root-mean-square residual over all observed values.
    pub fn residual_rmse(&self, prior: &Prior, z: &Tensor) -> Result<f64> {
        let n: usize = self.y.iter().map(Tensor::len).sum();
        Ok(self.residual_norm(prior, z)? / (n as f64).sqrt())
    }
}

/// One point per coarse cell, jittered uniformly inside the cell, in the
/// normalized cube. Ordering is row-major over the coarse extents.
pub fn coarse_jittered_points(coarse: [usize; 3], seed: u64) -> Vec<[f32; 3]> {
    let mut r = rng::stream(&[seed, 0x4A49_5454]);
    let mut pts = Vec::with_capacity(coarse.iter().product());
    for i in 0..coarse[0] {
        for j in 0..coarse[1] {
            for k in 0..coarse[2] {
                let mut q = [0.0f32; 3];
                for (a, idx) in [i, j, k].into_iter().enumerate() {
                    let u: f32 = r.random();
                    q[a] = -1.0 + 2.0 * (idx as f32 + u) / coarse[a] as f32;
                }
                pts.push(q);
            }
        }
    }
    pts
}

/// Trilinear samples of a volume at normalized points.
pub fn coarse_sample(volume: &DenseGrid3, points: &[[f32; 3]]) -> Vec<f32> {
    points.iter().map(|&p| volume.sample(p)).collect()
}

/// The masked observation `M ⊙ v`.
pub fn masked(volume: &DenseGrid3, mask: &DenseGrid3) -> Result<DenseGrid3> {
    if volume.extents() != mask.extents() {
        return Err(NimbusError::Contract("mask extents differ from volume".into()));
    }
    let data = volume.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    DenseGrid3::new(volume.extents(), data)
}
