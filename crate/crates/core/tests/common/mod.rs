#![allow(dead_code)]

use std::sync::OnceLock;

use nimbus::cloudgen::{generate_cloud, CloudSpec};
use nimbus::diffusion::*;
use nimbus::monoplanar::*;
use nimbus::DenseGrid3;

pub struct CompactPrior {
    pub cfg: MonoplanarConfig,
    pub vols: Vec<DenseGrid3>,
    pub fit: FitResult,
    pub dataset: Vec<LatentCode>,
    pub model: DiffusionModel,
    pub log: Vec<TrainLogEntry>,
    /// A cloud outside the training set.
    pub held: DenseGrid3,
}

pub fn compact_net() -> DenoiserConfig {
    DenoiserConfig {
        channels: 8,
        base_channels: 16,
        time_dim: 32,
    }
}

/// Eight procedural clouds on a 32x16x32 grid, a shared decoder with
/// 16x16 latents, and a small denoiser trained on all dihedral copies.
pub fn compact_prior() -> &'static CompactPrior {
    static P: OnceLock<CompactPrior> = OnceLock::new();
    P.get_or_init(|| {
        let cfg = MonoplanarConfig {
            latent_size: 16,
            grid_extents: [32, 16, 32],
            ..Default::default()
        };
        let vols: Vec<DenseGrid3> = (0..8)
            .map(|s| generate_cloud(&CloudSpec::random(s, cfg.grid_extents)).unwrap())
            .collect();
        let fit = fit_shared_decoder(
            &vols,
            &cfg,
            &FitConfig {
                steps: 600,
                batch: 2048,
                log_every: 200,
                eval_points: 32 * 1024,
                ..Default::default()
            },
        )
        .unwrap();
        let dataset = dihedral_augment(&fit.latents).unwrap();
        let train = TrainConfig {
            steps: 3000,
            batch: 8,
            log_every: 250,
            checkpoint_every: 0,
            ..Default::default()
        };
        let res = train_denoiser(&dataset, &NoiseSchedule::linear(), &compact_net(), &train, None).unwrap();
        let held = generate_cloud(&CloudSpec::random(100, cfg.grid_extents)).unwrap();
        CompactPrior {
            cfg,
            vols,
            fit,
            dataset,
            model: res.model,
            log: res.log,
            held,
        }
    })
}
