//! Volume quality metrics. PSNR uses the maximum of the reference as the
//! signal range; SSIM is computed on the center `z` slice (an `nx × ny` image).

use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};
use crate::volume::DenseGrid3;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub psnr: f64,
    pub rmse: f64,
    pub mae: f64,
    pub ssim: f64,
}

fn check(test: &[f32], reference: &[f32]) -> Result<()> {
    if test.len() != reference.len() || test.is_empty() {
        return Err(NimbusError::Contract(format!(
            "metric inputs differ in size: {} vs {}",
            test.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub fn mse(test: &[f32], reference: &[f32]) -> Result<f64> {
    check(test, reference)?;
    Ok(test
        .iter()
        .zip(reference)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / test.len() as f64)
}

pub fn rmse(test: &[f32], reference: &[f32]) -> Result<f64> {
    Ok(mse(test, reference)?.sqrt())
}

pub fn mae(test: &[f32], reference: &[f32]) -> Result<f64> {
    check(test, reference)?;
    Ok(test
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / test.len() as f64)
}

pub fn psnr(test: &[f32], reference: &[f32]) -> Result<f64> {
    let m = mse(test, reference)?;
    let range = reference.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    if range <= 0.0 {
        return Err(NimbusError::Contract("PSNR needs a reference with positive maximum".into()));
    }
    Ok((10.0 * (range * range / m).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two `h × w` row-major images over all fully contained
/// Gaussian windows (11 taps, σ = 1.5, shrunk to fit small images).
pub fn ssim_2d(test: &[f32], reference: &[f32], h: usize, w: usize, range: f64) -> Result<f64> {
    check(test, reference)?;
    if test.len() != h * w {
        return Err(NimbusError::Contract(format!("image is not {h}x{w}")));
    }
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, 1.5);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..size {
                for dx in 0..size {
                    let wgt = g[dy] * g[dx];
                    let i = (y + dy) * w + x + dx;
                    let (a, b) = (test[i] as f64, reference[i] as f64);
                    ma += wgt * a;
                    mb += wgt * b;
                    aa += wgt * a * a;
                    bb += wgt * b * b;
                    ab += wgt * a * b;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `k = nz / 2` slice as an `nx × ny` image.
pub fn center_slice(v: &DenseGrid3) -> Vec<f32> {
    let [nx, ny, nz] = v.extents();
    let k = nz / 2;
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            out.push(v.get(i, j, k));
        }
    }
    out
}

pub fn ssim_center_slice(test: &DenseGrid3, reference: &DenseGrid3) -> Result<f64> {
    if test.extents() != reference.extents() {
        return Err(NimbusError::Contract(format!(
            "SSIM extents differ: {:?} vs {:?}",
            test.extents(),
            reference.extents()
        )));
    }
    let [nx, ny, _] = reference.extents();
    let (a, b) = (center_slice(test), center_slice(reference));
    let range = b.iter().fold(0.0f32, |m, &v| m.max(v)).max(reference.max()) as f64;
    ssim_2d(&a, &b, nx, ny, range.max(1e-12))
}

pub fn compare(test: &DenseGrid3, reference: &DenseGrid3) -> Result<MetricRow> {
    Ok(MetricRow {
        psnr: psnr(test.data(), reference.data())?,
        rmse: rmse(test.data(), reference.data())?,
        mae: mae(test.data(), reference.data())?,
        ssim: ssim_center_slice(test, reference)?,
    })
}
