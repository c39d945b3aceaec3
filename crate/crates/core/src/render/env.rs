//! Infinitely distant lat-long environment radiance.

use serde::{Deserialize, Serialize};
use std::f32::consts::PI;

use crate::error::{NimbusError, Result};

/// Radiance texels `[height][width][3]`. Rows run from the zenith (+y) down
/// to the nadir, columns follow `atan2(z, x)` from -π.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvMap {
    pub width: usize,
    pub height: usize,
    pub texels: Vec<f32>,
}

impl EnvMap {
    pub const DEFAULT_SIZE: (usize, usize) = (16, 8);

    pub fn constant(rgb: [f32; 3]) -> Self {
        let (w, h) = Self::DEFAULT_SIZE;
        Self {
            width: w,
            height: h,
            texels: (0..w * h).flat_map(|_| rgb).collect(),
        }
    }

    /// Sky-like gradient: `zenith` at the top blending to `horizon` at and
    /// below the horizon.
    pub fn sky(zenith: [f32; 3], horizon: [f32; 3]) -> Self {
        let (w, h) = Self::DEFAULT_SIZE;
        let mut texels = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            let cos_t = (PI * (r as f32 + 0.5) / h as f32).cos().max(0.0);
            for _ in 0..w {
                for c in 0..3 {
                    texels.push(horizon[c] + (zenith[c] - horizon[c]) * cos_t);
                }
            }
        }
        Self {
            width: w,
            height: h,
            texels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || self.texels.len() != self.width * self.height * 3 {
            return Err(NimbusError::Config(format!(
                "environment {}x{} with {} texel values",
                self.width,
                self.height,
                self.texels.len()
            )));
        }
        if self.texels.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(NimbusError::Config("environment radiance must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn texel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn max(&self) -> f32 {
        self.texels.iter().copied().fold(0.0, f32::max)
    }

    /// Bilinear stencil over texel indices for direction `d` (unit length).
    /// Wraps in azimuth, clamps in polar angle.
    #[inline]
    pub fn stencil(&self, d: [f32; 3]) -> ([usize; 4], [f32; 4]) {
        let (w, h) = (self.width, self.height);
        let theta = d[1].clamp(-1.0, 1.0).acos();
        let phi = d[2].atan2(d[0]);
        let fx = (phi + PI) / (2.0 * PI) * w as f32 - 0.5;
        let fy = (theta / PI * h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let x0f = fx.floor();
        let tx = fx - x0f;
        let x0 = (x0f as i64).rem_euclid(w as i64) as usize;
        let x1 = (x0 + 1) % w;
        let y0 = (fy.floor() as usize).min(h - 2);
        let ty = fy - y0 as f32;
        let y1 = y0 + 1;
        (
            [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            [
                (1.0 - tx) * (1.0 - ty),
                tx * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * ty,
            ],
        )
    }

    #[inline]
    pub fn lookup(&self, d: [f32; 3]) -> [f32; 3] {
        let (idx, w) = self.stencil(d);
        let mut out = [0.0f32; 3];
        for (i, wi) in idx.iter().zip(w) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += wi * self.texels[i * 3 + c];
            }
        }
        out
    }

    /// Solid-angle weight of each texel row, normalized to sum to one over
    /// the whole map.
    pub fn row_weights(&self) -> Vec<f32> {
        let h = self.height;
        (0..h)
            .map(|r| {
                let t0 = PI * r as f32 / h as f32;
                let t1 = PI * (r + 1) as f32 / h as f32;
                0.5 * (t0.cos() - t1.cos()) / self.width as f32
            })
            .collect()
    }

    /// Solid-angle mean radiance.
    pub fn mean(&self) -> [f32; 3] {
        let rw = self.row_weights();
        let mut out = [0.0f64; 3];
        for (t, px) in self.texels.chunks_exact(3).enumerate() {
            let w = rw[t / self.width] as f64;
            for c in 0..3 {
                out[c] += w * px[c] as f64;
            }
        }
        out.map(|v| v as f32)
    }
}
