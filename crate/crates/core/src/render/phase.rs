//! Henyey-Greenstein phase function.

use std::f32::consts::PI;

use crate::error::{NimbusError, Result};

pub fn check_g(g: f32) -> Result<()> {
    if g.is_finite() && g.abs() < 1.0 {
        Ok(())
    } else {
        Err(NimbusError::Contract(format!("phase anisotropy {g} outside (-1, 1)")))
    }
}

/// Density over solid angle for the cosine between propagation directions.
#[inline]
pub fn hg_eval(cos_t: f32, g: f32) -> f32 {
    let den = 1.0 + g * g - 2.0 * g * cos_t;
    (1.0 - g * g) / (4.0 * PI * den * den.sqrt())
}

pub fn hg_phase(cos_t: f32, g: f32) -> Result<f32> {
    check_g(g)?;
    Ok(hg_eval(cos_t, g))
}

/// `d ln p / d g`.
#[inline]
pub fn hg_dlog_dg(cos_t: f32, g: f32) -> f32 {
    let den = 1.0 + g * g - 2.0 * g * cos_t;
    -2.0 * g / (1.0 - g * g) - 1.5 * (2.0 * g - 2.0 * cos_t) / den
}

/// Cosine of the scattering angle from one uniform variate.
#[inline]
pub fn hg_sample_cos(g: f32, u: f32) -> f32 {
    if g.abs() < 1e-4 {
        return 1.0 - 2.0 * u;
    }
    let s = (1.0 - g * g) / (1.0 - g + 2.0 * g * u);
    ((1.0 + g * g - s * s) / (2.0 * g)).clamp(-1.0, 1.0)
}

/// Orthonormal frame around unit `n`.
#[inline]
pub fn frame(n: [f32; 3]) -> ([f32; 3], [f32; 3]) {
    let sign = 1.0f32.copysign(n[2]);
    let a = -1.0 / (sign + n[2]);
    let b = n[0] * n[1] * a;
    (
        [1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0]],
        [b, sign + n[1] * n[1] * a, -n[1]],
    )
}

/// Direction scattered from `w_in` with cosine drawn from HG and uniform
/// azimuth.
#[inline]
pub fn hg_sample_dir(w_in: [f32; 3], g: f32, u1: f32, u2: f32) -> [f32; 3] {
    let c = hg_sample_cos(g, u1);
    let s = (1.0 - c * c).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    let (t, b) = frame(w_in);
    let (x, y) = (s * phi.cos(), s * phi.sin());
    std::array::from_fn(|i| x * t[i] + y * b[i] + c * w_in[i])
}

pub fn hg_sample(w_in: [f32; 3], g: f32, rng: &mut impl rand::Rng) -> Result<[f32; 3]> {
    check_g(g)?;
    Ok(hg_sample_dir(w_in, g, rng.random(), rng.random()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlog_matches_difference_quotient() {
        for &(c, g) in &[(0.3f32, 0.5f32), (-0.9, -0.2), (0.99, 0.8)] {
            let h = 1e-3;
            let fd = ((hg_eval(c, g + h) as f64).ln() - (hg_eval(c, g - h) as f64).ln()) / (2.0 * h as f64);
            assert!((fd - hg_dlog_dg(c, g) as f64).abs() < 1e-3 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn frame_is_orthonormal() {
        for n in [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.6, 0.0, 0.8], [0.0, 1.0, 0.0]] {
            let (t, b) = frame(n);
            let dot = |a: [f32; 3], b: [f32; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            assert!(dot(t, n).abs() < 1e-6 && dot(b, n).abs() < 1e-6 && dot(t, b).abs() < 1e-6);
            assert!((dot(t, t) - 1.0).abs() < 1e-6);
        }
    }
}
