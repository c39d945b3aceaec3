use std::path::PathBuf;

use nimbus::cloudgen::{build_dataset, generate_cloud, CloudSpec};
use nimbus::monoplanar::{benchmark_csv, benchmark_representations, FitConfig, MonoplanarConfig};
use nimbus::DenseGrid3;
use serde::{Deserialize, Serialize};

use crate::config::{self, Output};
use crate::error::{CliError, Result};
use crate::Common;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// VOL1 inputs; procedural clouds are generated when empty.
    pub volumes: Vec<PathBuf>,
    pub count: usize,
    /// Seed of the generated clouds.
    pub seed: u64,
    pub monoplanar: MonoplanarConfig,
    pub fit: FitConfig,
    pub reps: Vec<String>,
    pub out: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            volumes: Vec::new(),
            count: 4,
            seed: 0,
            monoplanar: MonoplanarConfig::default(),
            fit: FitConfig::default(),
            reps: vec!["mono".into(), "tri".into(), "grid".into()],
            out: PathBuf::new(),
        }
    }
}

fn rep_name(short: &str) -> Result<&'static str> {
    Ok(match short {
        "mono" | "monoplanar" => "monoplanar",
        "tri" | "triplanar" => "triplanar",
        "grid" | "dense_grid" => "dense_grid",
        other => return Err(CliError::config(format!("unknown representation {other:?}"))),
    })
}

pub fn run(common: &Common, reps: Option<Vec<String>>) -> Result<()> {
    let (mut cfg, base): (BenchConfig, _) = config::load(common.config.as_deref())?;
    cfg.volumes.iter_mut().for_each(|p| config::rebase(&base, p));
    config::rebase(&base, &mut cfg.out);
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = reps {
        cfg.reps = r;
    }
    cfg.out = super::pick_out(&common.out, &cfg.out);
    let wanted = cfg.reps.iter().map(|r| rep_name(r)).collect::<Result<Vec<_>>>()?;
    let out = Output::create(&cfg.out)?;
    let volumes: Vec<DenseGrid3> = if cfg.volumes.is_empty() {
        build_dataset(cfg.seed, cfg.count, 1, false, 0)
            .train
            .iter()
            .map(|d| generate_cloud(&CloudSpec::random(d.cloud_seed, cfg.monoplanar.grid_extents)))
            .collect::<nimbus::Result<_>>()?
    } else {
        config::expand(&cfg.volumes, "vol")?
            .iter()
            .map(|p| DenseGrid3::load(p))
            .collect::<nimbus::Result<_>>()?
    };
    let rows: Vec<_> = benchmark_representations(&volumes, &cfg.monoplanar, &cfg.fit)?
        .into_iter()
        .filter(|r| wanted.contains(&r.representation.as_str()))
        .collect();
    let csv = benchmark_csv(&rows);
    out.text("bench.csv", &format!("# psnr range = max(reference); ssim on the center z slice\n{csv}"))?;
    out.resolved(&cfg)?;
    super::report(serde_json::json!({ "rows": rows }));
    Ok(())
}
