//! The density grid as a participating medium in world space.

use ndtape::interp::trilinear_stencil;
use rand::Rng;

use super::camera::{along, Vec3};
use crate::error::{NimbusError, Result};
use crate::volume::{half_extents, DenseGrid3};

/// Borrowed view of a density grid scaled to extinction `σ_t = s · ρ`,
/// occupying the centered box with the grid's half extents.
#[derive(Clone, Copy)]
pub struct Medium<'a> {
    pub extents: [usize; 3],
    pub data: &'a [f32],
    pub half: Vec3,
    pub scale: f32,
    pub max_density: f32,
}

impl<'a> Medium<'a> {
    pub fn new(extents: [usize; 3], data: &'a [f32], scale: f32) -> Self {
        Self {
            extents,
            data,
            half: half_extents(extents),
            scale,
            max_density: data.iter().copied().fold(0.0, f32::max),
        }
    }

    pub fn of(grid: &'a DenseGrid3, scale: f32) -> Self {
        Self::new(grid.extents(), grid.data(), scale)
    }

    pub fn majorant(&self) -> f32 {
        self.scale * self.max_density
    }

    #[inline]
    fn local(&self, p: Vec3) -> Vec3 {
        [p[0] / self.half[0], p[1] / self.half[1], p[2] / self.half[2]]
    }

    #[inline]
    pub fn stencil(&self, p: Vec3) -> ([usize; 8], [f32; 8]) {
        trilinear_stencil(self.extents, self.local(p))
    }

    /// Stored density (not scaled) at world position `p`.
    #[inline]
    pub fn density(&self, p: Vec3) -> f32 {
        let (idx, w) = self.stencil(p);
        let mut v = 0.0;
        for j in 0..8 {
            v += self.data[idx[j]] * w[j];
        }
        v
    }

    /// Midpoint-rule integral of stored density from `o` along unit `d`
    /// over `[t0, t1]`; multiply by `scale` for optical depth.
    #[inline]
    pub fn column(&self, o: Vec3, d: Vec3, t0: f32, t1: f32, steps: usize) -> f64 {
        let dt = (t1 - t0) / steps as f32;
        let mut acc = 0.0f64;
        for i in 0..steps {
            acc += self.density(along(o, d, t0 + (i as f32 + 0.5) * dt)) as f64;
        }
        acc * dt as f64
    }

    /// Adds `coef · d(column)/d(voxel)` into `grad` for the same quadrature.
    #[inline]
    pub fn deposit_column(&self, o: Vec3, d: Vec3, t0: f32, t1: f32, steps: usize, coef: f64, grad: &mut [f64]) {
        let dt = (t1 - t0) / steps as f32;
        let c = coef * dt as f64;
        for i in 0..steps {
            let (idx, w) = self.stencil(along(o, d, t0 + (i as f32 + 0.5) * dt));
            for j in 0..8 {
                grad[idx[j]] += c * w[j] as f64;
            }
        }
    }

    #[inline]
    pub fn deposit_point(&self, p: Vec3, coef: f64, grad: &mut [f64]) {
        let (idx, w) = self.stencil(p);
        for j in 0..8 {
            grad[idx[j]] += coef * w[j] as f64;
        }
    }
}

fn segment(a: Vec3, b: Vec3) -> (Vec3, f32) {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if len == 0.0 {
        return ([1.0, 0.0, 0.0], 0.0);
    }
    ([d[0] / len, d[1] / len, d[2] / len], len)
}

/// `exp(-∫ s ρ)` along the world segment `a → b` with `steps` midpoints.
pub fn transmittance_quadrature(grid: &DenseGrid3, s: f32, a: Vec3, b: Vec3, steps: usize) -> Result<f32> {
    if steps < 2 {
        return Err(NimbusError::Contract(format!("quadrature needs >= 2 steps, got {steps}")));
    }
    let m = Medium::of(grid, s);
    let (d, len) = segment(a, b);
    Ok((-(s as f64) * m.column(a, d, 0.0, len, steps)).exp() as f32)
}

/// Single-sample ratio-tracking estimate of transmittance along `a → b`
/// against the majorant `s · max(grid)`.
pub fn transmittance_ratio_tracking(grid: &DenseGrid3, s: f32, a: Vec3, b: Vec3, rng: &mut impl Rng) -> Result<f32> {
    let m = Medium::of(grid, s);
    ratio_tracking(&m, m.majorant(), a, b, rng)
}

pub fn ratio_tracking(m: &Medium, majorant: f32, a: Vec3, b: Vec3, rng: &mut impl Rng) -> Result<f32> {
    if majorant <= 0.0 {
        if m.max_density > 0.0 && m.scale > 0.0 {
            return Err(NimbusError::Contract("zero majorant over a nonzero field".into()));
        }
        return Ok(1.0);
    }
    if majorant < m.majorant() * (1.0 - 1e-6) {
        return Err(NimbusError::Contract(format!(
            "majorant {majorant} below field maximum {}",
            m.majorant()
        )));
    }
    let (d, len) = segment(a, b);
    let mut t = 0.0f32;
    let mut tr = 1.0f32;
    loop {
        t -= (1.0 - rng.random::<f32>()).ln() / majorant;
        if t >= len {
            return Ok(tr);
        }
        tr *= 1.0 - m.scale * m.density(along(a, d, t)) / majorant;
        if tr <= 0.0 {
            return Ok(0.0);
        }
    }
}
