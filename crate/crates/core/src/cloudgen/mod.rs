//! Procedural cumulus-like density fields and the spatial augmentation family.
//!
//! The horizontal plane is spanned by the `x` and `z` grid axes; `y` points up.
//! Rotations, scales, flips and transposes all act in that plane only.

mod augment;
mod dataset;
mod noise;

pub use augment::{apply_volume_transform, apply_xy, xy_transforms, AugmentOp, Dihedral, XyTransform};
pub use dataset::{build_dataset, Dataset, InstanceDescriptor};
pub use noise::Perlin;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};
use crate::rng;
use crate::volume::{half_extents, DenseGrid3};

/// Ellipsoidal component of the base shape, in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Puff {
    pub center: [f32; 3],
    pub radii: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    pub seed: u64,
    pub puffs: Vec<Puff>,
    /// World height of the flat base.
    pub base_height: f32,
    pub noise_octaves: u32,
    pub noise_gain: f32,
    pub noise_lacunarity: f32,
    pub noise_frequency: f32,
    pub erosion_threshold: f32,
    pub grid_extents: [usize; 3],
}

/// Horizontal radius (normalized) beyond which density is forced to zero.
pub const SUPPORT_RADIUS: f32 = 0.82;

impl Default for CloudSpec {
    fn default() -> Self {
        Self::random(0, [64, 32, 64])
    }
}

impl CloudSpec {
    /// Randomized puff layout with the default noise parameters.
    pub fn random(seed: u64, grid_extents: [usize; 3]) -> Self {
        let mut r = rng::stream(&[seed, 0x5055_4646]);
        let half = half_extents(grid_extents);
        let base_height = half[1] * r.random_range(-0.64..-0.44);
        let count = r.random_range(5..=8);
        let puffs = (0..count)
            .map(|_| {
                let ang = r.random_range(0.0..std::f32::consts::TAU);
                let rad = 0.34 * r.random::<f32>().sqrt();
                let ry = half[1] * r.random_range(0.55..0.85);
                Puff {
                    center: [
                        half[0] * rad * ang.cos(),
                        base_height + ry * r.random_range(0.2..0.8),
                        half[2] * rad * ang.sin(),
                    ],
                    radii: [
                        half[0] * r.random_range(0.36..0.56),
                        ry,
                        half[2] * r.random_range(0.36..0.56),
                    ],
                }
            })
            .collect();
        Self {
            seed,
            puffs,
            base_height,
            noise_octaves: 4,
            noise_gain: 0.5,
            noise_lacunarity: 2.0,
            noise_frequency: 3.0,
            erosion_threshold: 0.25,
            grid_extents,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid_extents.iter().any(|&e| e < 8) {
            return Err(NimbusError::Contract(format!(
                "cloud grid extents {:?} must each be at least 8",
                self.grid_extents
            )));
        }
        if self.noise_octaves < 1 {
            return Err(NimbusError::Contract("noise_octaves must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.erosion_threshold) {
            return Err(NimbusError::Contract(format!(
                "erosion_threshold {} outside [0, 1]",
                self.erosion_threshold
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn envelope(puffs: &[Puff], w: [f32; 3]) -> f32 {
    puffs.iter().fold(0.0f32, |m, p| {
        if p.radii.iter().any(|&r| r <= 0.0) {
            return m;
        }
        let d2: f32 = (0..3).map(|a| ((w[a] - p.center[a]) / p.radii[a]).powi(2)).sum();
        m.max((1.0 - d2).clamp(0.0, 1.0))
    })
}

pub fn generate_cloud(spec: &CloudSpec) -> Result<DenseGrid3> {
    spec.validate()?;
    let e = spec.grid_extents;
    let half = half_extents(e);
    let perlin = Perlin::new(spec.seed);
    let tau = spec.erosion_threshold;
    let mut grid = DenseGrid3::from_fn(e, |p| {
        if tau >= 1.0 {
            return 0.0;
        }
        let w = [p[0] * half[0], p[1] * half[1], p[2] * half[2]];
        let env = envelope(&spec.puffs, w);
        if env <= 0.0 {
            return 0.0;
        }
        let f = spec.noise_frequency;
        let n = perlin.fbm(
            [w[0] * f, w[1] * f, w[2] * f],
            spec.noise_octaves,
            spec.noise_gain,
            spec.noise_lacunarity,
        );
        let v = env.sqrt() * (0.7 + 0.3 * n);
        let base = smoothstep(spec.base_height, spec.base_height + 0.04, w[1]);
        let radial = 1.0 - smoothstep(SUPPORT_RADIUS - 0.1, SUPPORT_RADIUS, p[0].hypot(p[2]));
        let top = 1.0 - smoothstep(0.72, 0.84, p[1]);
        smoothstep(0.0, 1.0, (v - tau) / (1.0 - tau)) * base * radial * top
    });
    zero_shell(&mut grid, 2);

    if grid.occupancy(0.05) < 0.01 {
        return Err(NimbusError::EmptyField(format!(
            "seed {} yields {:.4} occupancy",
            spec.seed,
            grid.occupancy(0.05)
        )));
    }
    enforce_bottom_heavy(&mut grid);
    Ok(grid)
}

fn zero_shell(g: &mut DenseGrid3, margin: usize) {
    let e = g.extents();
    for i in 0..e[0] {
        for j in 0..e[1] {
            for k in 0..e[2] {
                let inner = [i, j, k].iter().zip(e).all(|(&x, n)| x >= margin && x + margin < n);
                if !inner {
                    let idx = g.index(i, j, k);
                    g.data_mut()[idx] = 0.0;
                }
            }
        }
    }
}

/// Applies the mildest linear height falloff that makes the lower half at
/// least as dense as the upper half.
fn enforce_bottom_heavy(g: &mut DenseGrid3) {
    let (lo, hi) = g.vertical_half_means();
    if lo >= hi {
        return;
    }
    let ny = g.extents()[1];
    let profiled = |g: &DenseGrid3, gamma: f32| {
        let mut h = g.clone();
        let e = h.extents();
        for i in 0..e[0] {
            for j in 0..e[1] {
                let s = 1.0 - gamma * j as f32 / (ny - 1) as f32;
                for k in 0..e[2] {
                    let idx = h.index(i, j, k);
                    h.data_mut()[idx] *= s;
                }
            }
        }
        h
    };
    let (mut a, mut b) = (0.0f32, 1.0f32);
    for _ in 0..30 {
        let m = 0.5 * (a + b);
        let (lo, hi) = profiled(g, m).vertical_half_means();
        if lo >= hi {
            b = m;
        } else {
            a = m;
        }
    }
    *g = profiled(g, b);
}
