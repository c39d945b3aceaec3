use std::path::PathBuf;

use nimbus::cloudgen::build_dataset;
use serde::{Deserialize, Serialize};

use crate::config::{self, Output};
use crate::error::Result;
use crate::Common;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub extents: [usize; 3],
    /// Planar rotation/scale copies per cloud (1 keeps only the base).
    pub xy_transforms: usize,
    pub dihedral: bool,
    /// Number of trailing clouds written to the held-out split.
    pub held_out: usize,
    pub out: PathBuf,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 4,
            seed: 0,
            extents: [64, 32, 64],
            xy_transforms: 1,
            dihedral: false,
            held_out: 0,
            out: PathBuf::new(),
        }
    }
}

pub fn run(common: &Common, count: Option<usize>) -> Result<()> {
    let (mut cfg, base): (GenConfig, _) = config::load(common.config.as_deref())?;
    config::rebase(&base, &mut cfg.out);
    if let Some(n) = count {
        cfg.count = n;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.out = super::pick_out(&common.out, &cfg.out);
    let out = Output::create(&cfg.out)?;
    let ds = build_dataset(cfg.seed, cfg.count, cfg.xy_transforms.max(1), cfg.dihedral, cfg.held_out);
    let mut names = Vec::new();
    for (split, items) in [("train", &ds.train), ("held", &ds.held_out)] {
        for (i, d) in items.iter().enumerate() {
            let name = format!("{split}_{i:04}.vol");
            out.volume(&name, &d.materialize(cfg.extents)?)?;
            names.push(serde_json::json!({ "file": name, "descriptor": d }));
        }
    }
    out.json("dataset.json", &names)?;
    out.resolved(&cfg)?;
    super::report(serde_json::json!({ "volumes": names.len(), "out": out.dir }));
    Ok(())
}
