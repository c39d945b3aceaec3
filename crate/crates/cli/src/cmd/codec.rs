use std::path::PathBuf;

use clap::Subcommand;
use nimbus::metrics::compare;
use nimbus::monoplanar::*;
use nimbus::DenseGrid3;
use serde::{Deserialize, Serialize};

use crate::config::{self, Output};
use crate::error::{CliError, Result};
use crate::Common;

#[derive(Subcommand)]
pub enum Op {
    /// Fit a shared decoder and one latent per volume.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fit latents for new volumes against a frozen decoder.
    Encode {
        #[command(flatten)]
        common: Common,
    },
    /// Decode a latent to a dense grid.
    Decode {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        /// Grid extents `nx,ny,nz`; defaults to the codec grid.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        extents: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter accounting of a trained decoder.
    Bench {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// VOL1 files or directories of them.
    pub volumes: Vec<PathBuf>,
    pub monoplanar: MonoplanarConfig,
    pub fit: FitConfig,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Uniform,
    Saliency,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeCmdConfig {
    pub decoder: PathBuf,
    pub volumes: Vec<PathBuf>,
    pub sampler: SamplerKind,
    pub encode: EncodeConfig,
    pub out: PathBuf,
}

pub fn run(op: Op) -> Result<()> {
    match op {
        Op::Train { common } => train(&common),
        Op::Encode { common } => encode(&common),
        Op::Decode {
            decoder,
            latent,
            extents,
            out,
        } => decode(decoder, latent, extents, out),
        Op::Bench { decoder, out } => bench(decoder, out),
    }
}

fn load_volumes(paths: &[PathBuf]) -> Result<Vec<(PathBuf, DenseGrid3)>> {
    config::expand(paths, "vol")?
        .into_iter()
        .map(|p| {
            let v = DenseGrid3::load(&p)?;
            Ok((p, v))
        })
        .collect()
}

fn metrics_csv(rows: &[(String, nimbus::metrics::MetricRow)]) -> String {
    let mut s = super::metrics::CSV_HEADER.replace("psnr_db", "volume,psnr_db");
    for (name, m) in rows {
        s.push_str(&format!("{name},{:.4},{:.6},{:.6},{:.6}\n", m.psnr, m.rmse, m.mae, m.ssim));
    }
    s
}

fn fit_log_csv(log: &[FitLogEntry]) -> String {
    let mut s = String::from("step,eval_mse\n");
    for e in log {
        s.push_str(&format!("{},{:e}\n", e.step, e.eval_loss));
    }
    s
}

fn train(common: &Common) -> Result<()> {
    let (mut cfg, base): (TrainConfig, _) = config::load(common.config.as_deref())?;
    cfg.volumes.iter_mut().for_each(|p| config::rebase(&base, p));
    config::rebase(&base, &mut cfg.out);
    if let Some(s) = common.seed {
        cfg.fit.seed = s;
    }
    cfg.out = super::pick_out(&common.out, &cfg.out);
    cfg.monoplanar.validate()?;
    let out = Output::create(&cfg.out)?;
    let vols = load_volumes(&cfg.volumes)?;
    let grids: Vec<DenseGrid3> = vols.iter().map(|(_, v)| v.clone()).collect();
    let fit = fit_shared_decoder(&grids, &cfg.monoplanar, &cfg.fit)?;
    fit.decoder.save(&out.path("decoder.ckpt"))?;
    let mut rows = Vec::new();
    for ((path, v), l) in vols.iter().zip(&fit.latents) {
        let name = config::stem(path);
        out.latent(&format!("{name}.lat"), l)?;
        let g = fit.decoder.decode_grid(l, v.extents())?;
        rows.push((name, compare(&g, v)?));
    }
    out.text("fit_log.csv", &fit_log_csv(&fit.log))?;
    out.text("metrics.csv", &metrics_csv(&rows))?;
    out.resolved(&cfg)?;
    let psnr = rows.iter().map(|r| r.1.psnr).sum::<f64>() / rows.len() as f64;
    super::report(serde_json::json!({
        "volumes": rows.len(),
        "final_eval_mse": fit.final_loss(),
        "mean_psnr_db": psnr,
        "out": out.dir,
    }));
    Ok(())
}

fn encode(common: &Common) -> Result<()> {
    let (mut cfg, base): (EncodeCmdConfig, _) = config::load(common.config.as_deref())?;
    config::rebase(&base, &mut cfg.decoder);
    cfg.volumes.iter_mut().for_each(|p| config::rebase(&base, p));
    config::rebase(&base, &mut cfg.out);
    if let Some(s) = common.seed {
        cfg.encode.seed = s;
    }
    cfg.out = super::pick_out(&common.out, &cfg.out);
    config::require(&cfg.decoder, "decoder")?;
    let decoder = DecoderParams::load(&cfg.decoder)?;
    let out = Output::create(&cfg.out)?;
    let mut rows = Vec::new();
    for (path, v) in load_volumes(&cfg.volumes)? {
        let sampler = match cfg.sampler {
            SamplerKind::Uniform => Sampler::Uniform,
            SamplerKind::Saliency => Sampler::Saliency(SaliencyMap::from_field(&v)),
        };
        let res = encode_volume(&v, &decoder, &decoder.config.zero_latent(), &sampler, &cfg.encode)?;
        let name = config::stem(&path);
        out.latent(&format!("{name}.lat"), &res.latent)?;
        out.text(&format!("{name}_log.csv"), &fit_log_csv(&res.log))?;
        rows.push((name, compare(&decoder.decode_grid(&res.latent, v.extents())?, &v)?));
    }
    out.text("metrics.csv", &metrics_csv(&rows))?;
    out.resolved(&cfg)?;
    super::report(serde_json::json!({ "volumes": rows.len(), "out": out.dir }));
    Ok(())
}

fn decode(decoder: PathBuf, latent: PathBuf, extents: Option<Vec<usize>>, out: PathBuf) -> Result<()> {
    config::require(&decoder, "decoder")?;
    config::require(&latent, "latent")?;
    let d = DecoderParams::load(&decoder)?;
    let l = LatentCode::load(&latent)?;
    let e = match extents {
        Some(v) => [v[0], v[1], v[2]],
        None => d.config.grid_extents,
    };
    if e.contains(&0) {
        return Err(CliError::config("extents must be positive"));
    }
    let o = Output::create(&out)?;
    let name = format!("{}.vol", config::stem(&latent));
    o.volume(&name, &d.decode_grid(&l, e)?)?;
    o.resolved(&serde_json::json!({
        "decoder": std::path::absolute(&decoder)?,
        "latent": std::path::absolute(&latent)?,
        "extents": e,
    }))?;
    super::report(serde_json::json!({ "volume": o.path(&name) }));
    Ok(())
}

fn bench(decoder: PathBuf, out: PathBuf) -> Result<()> {
    config::require(&decoder, "decoder")?;
    let d = DecoderParams::load(&decoder)?;
    let (latent, voxels, ratio) = compression_report(&d);
    let report = serde_json::json!({
        "latent_values": latent,
        "voxels": voxels,
        "compression_ratio": ratio,
        "decoder_params": d.param_count(),
        "config": d.config,
    });
    let o = Output::create(&out)?;
    o.json("compression.json", &report)?;
    o.resolved(&serde_json::json!({ "decoder": std::path::absolute(&decoder)? }))?;
    super::report(report);
    Ok(())
}
