//! Posterior sampling of latents under measurement operators, and the
//! parameterized variant that also fits the rendering parameters.

mod dps;
mod measure;
mod pdps;
mod tasks;

pub use dps::{dps_sample, guided_step, DpsConfig, DpsResult, DpsStep, GuidedStep};
pub use measure::{coarse_jittered_points, coarse_sample, masked, Measurement, Operator, Prior};
pub use pdps::{
    pdps_reconstruct, refine_latent, render_loss, PassLog, PdpsConfig, PdpsCounters, PdpsResult, PhiBounds, PhiFree,
    View,
};
pub use tasks::{
    coarse_consistency, inpaint, interpolate_latents, latent_mixture, masked_rmse, reconstruct_from_transmittance,
    superresolve, transmittance_consistency, Reconstruction,
};
