pub mod bench;
pub mod codec;
pub mod diffusion;
pub mod metrics;
pub mod reconstruct;
pub mod solve;

pub mod gen;

use std::path::PathBuf;

/// Picks the command-line value over the configured one.
pub(crate) fn pick_out(flag: &Option<PathBuf>, configured: &PathBuf) -> PathBuf {
    flag.clone().unwrap_or_else(|| configured.clone())
}

/// Summary line on stdout.
pub(crate) fn report(v: serde_json::Value) {
    println!("{v}");
}
