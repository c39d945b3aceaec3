use std::path::Path;

use nimbus::metrics::compare;
use nimbus::DenseGrid3;

use crate::config::{self, Output};
use crate::error::Result;

pub const CSV_HEADER: &str = "# psnr range = max(reference)\npsnr_db,rmse,mae,ssim_center_slice\n";

pub fn run(reference: &Path, test: &Path, out: Option<&Path>) -> Result<()> {
    config::require(reference, "reference volume")?;
    config::require(test, "test volume")?;
    let r = DenseGrid3::load(reference)?;
    let t = DenseGrid3::load(test)?;
    if r.extents() != t.extents() {
        return Err(crate::error::CliError::config(format!(
            "extents differ: {:?} vs {:?}",
            r.extents(),
            t.extents()
        )));
    }
    let row = compare(&t, &r)?;
    if let Some(dir) = out {
        let o = Output::create(dir)?;
        o.text(
            "metrics.csv",
            &format!("{CSV_HEADER}{:.4},{:.6},{:.6},{:.6}\n", row.psnr, row.rmse, row.mae, row.ssim),
        )?;
        o.resolved(&serde_json::json!({
            "reference": std::path::absolute(reference)?,
            "test": std::path::absolute(test)?,
        }))?;
    }
    super::report(serde_json::to_value(row).expect("metric row serializes"));
    Ok(())
}
