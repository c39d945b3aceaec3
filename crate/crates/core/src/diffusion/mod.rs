//! Latent diffusion prior over monoplanar feature planes.

mod sample;
mod schedule;
mod train;
mod unet;

pub use sample::{ddim_sample, DdimConfig, NoisePredictor, OracleDenoiser};
pub use schedule::{gaussian, NoiseSchedule, ScheduleConfig, Standardizer};
pub use train::{
    denoising_loss, denoising_loss_at, dihedral_augment, noised_batch, train_denoiser, TrainConfig, TrainLogEntry,
    TrainResult, Trainer,
};
pub use unet::{timestep_features, DenoiserConfig, DenoiserParams, DenoiserVars, DiffusionManifest, DiffusionModel};

use rand::Rng;

use crate::error::Result;
use crate::monoplanar::LatentCode;

/// Unconditional sample, returned as a raw (de-standardized) latent.
pub fn generate(model: &DiffusionModel, cfg: &DdimConfig, rng: &mut impl Rng) -> Result<LatentCode> {
    let z = ddim_sample(model, &model.schedule, cfg, &model.latent_shape, rng, None)?;
    LatentCode::new(model.standardizer.inverse(&z))
}
