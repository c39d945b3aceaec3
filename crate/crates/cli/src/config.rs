//! JSON run configurations and artifact output.

use std::fs;
use std::path::{Path, PathBuf};

use nimbus::io::write_atomic;
use nimbus::monoplanar::LatentCode;
use nimbus::DenseGrid3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const RESOLVED: &str = "config.resolved.json";

/// Parses `path`, or returns the default when no config is given.
/// Relative paths inside the file are later resolved against its directory.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, PathBuf)> {
    let Some(path) = path else {
        return Ok((T::default(), PathBuf::from(".")));
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((cfg, base))
}

/// Makes a config path absolute relative to `base`.
pub fn rebase(base: &Path, p: &mut PathBuf) {
    if p.as_os_str().is_empty() {
        return;
    }
    let joined = if p.is_absolute() { p.clone() } else { base.join(&*p) };
    *p = std::path::absolute(&joined).unwrap_or(joined);
}

pub fn require(p: &Path, what: &str) -> Result<()> {
    if p.as_os_str().is_empty() {
        return Err(CliError::config(format!("`{what}` is required")));
    }
    if !p.exists() {
        return Err(CliError::io(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

/// Files with extension `ext`, expanding directories in sorted order.
pub fn expand(paths: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            require(p, "input")?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::config(format!("no .{ext} inputs given")));
    }
    Ok(out)
}

pub struct Output {
    pub dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        if dir.as_os_str().is_empty() {
            return Err(CliError::config("an output directory is required (--out)"));
        }
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&self, name: &str, b: &[u8]) -> Result<()> {
        Ok(write_atomic(&self.path(name), b)?)
    }

    pub fn text(&self, name: &str, s: &str) -> Result<()> {
        self.bytes(name, s.as_bytes())
    }

    pub fn json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::config(e.to_string()))?;
        s.push('\n');
        self.text(name, &s)
    }

    pub fn resolved<T: Serialize>(&self, cfg: &T) -> Result<()> {
        self.json(RESOLVED, cfg)
    }

    pub fn volume(&self, name: &str, v: &DenseGrid3) -> Result<()> {
        self.bytes(name, &v.to_bytes())
    }

    pub fn latent(&self, name: &str, l: &LatentCode) -> Result<()> {
        self.bytes(name, &l.to_bytes())
    }
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}
