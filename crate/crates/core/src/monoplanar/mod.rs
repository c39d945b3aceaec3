//! Monoplanar implicit representation: a single coarse feature plane over the
//! horizontal axes whose per-column features are window-sampled along `y`.

mod baselines;
mod decoder;
mod fit;
mod latent;

pub use baselines::{
    benchmark_csv, benchmark_representations, compression_report, fit_baseline, latent_param_count,
    latent_shapes, BaselineModel, BenchmarkRow, RepresentationKind,
};
pub use decoder::{window_offsets, window_positions, DecoderParams, DecoderVars, MonoplanarConfig};
pub use fit::{
    encode_volume, eval_loss, fit_shared_decoder, EncodeConfig, EncodeResult, FitConfig, FitLogEntry,
    FitResult, SaliencyMap, Sampler,
};
pub use latent::{transform_latent, LatentCode};
