//! Pinhole camera and ray/box geometry.

use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};

pub type Vec3 = [f32; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[inline]
pub fn along(o: Vec3, d: Vec3, t: f32) -> Vec3 {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Parametric entry/exit of `ray` through the centered box with the given
/// half extents, with the entry clipped to `t >= 0`.
#[inline]
pub fn intersect_box(ray: &Ray, half: Vec3) -> Option<(f32, f32)> {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        let inv = 1.0 / ray.dir[a];
        let mut lo = (-half[a] - ray.origin[a]) * inv;
        let mut hi = (half[a] - ray.origin[a]) * inv;
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo.is_nan() || hi.is_nan() {
            if ray.origin[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    #[serde(default = "default_up")]
    pub up: Vec3,
    pub fov_y_deg: f32,
    pub width: usize,
    pub height: usize,
}

fn default_up() -> Vec3 {
    [0.0, 1.0, 0.0]
}

impl Camera {
    /// Camera on a sphere around the origin looking at it.
    pub fn orbit(azimuth_deg: f32, elevation_deg: f32, distance: f32, fov_y_deg: f32, width: usize, height: usize) -> Self {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        Self {
            position: [
                distance * e.cos() * a.sin(),
                distance * e.sin(),
                distance * e.cos() * a.cos(),
            ],
            target: [0.0; 3],
            up: default_up(),
            fov_y_deg,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [
            self.target[0] - self.position[0],
            self.target[1] - self.position[1],
            self.target[2] - self.position[2],
        ];
        if self.width == 0 || self.height == 0 {
            return Err(NimbusError::Config("camera image extents must be positive".into()));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(NimbusError::Config(format!("field of view {}", self.fov_y_deg)));
        }
        let c = cross(f, self.up);
        if dot(f, f) <= 0.0 || dot(c, c) <= 1e-12 {
            return Err(NimbusError::Config("camera target coincides with position or up axis".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = normalize([
            self.target[0] - self.position[0],
            self.target[1] - self.position[1],
            self.target[2] - self.position[2],
        ]);
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        (f, r, u)
    }

    /// Ray through film position `(x + sx, y + sy)` for pixel `(x, y)` with
    /// `sx, sy` in `[0,1)`; row 0 is the top of the image.
    pub fn ray(&self, x: usize, y: usize, sx: f32, sy: f32) -> Ray {
        let (f, r, u) = self.basis();
        let th = (0.5 * self.fov_y_deg.to_radians()).tan();
        let aspect = self.width as f32 / self.height as f32;
        let px = (2.0 * (x as f32 + sx) / self.width as f32 - 1.0) * th * aspect;
        let py = (1.0 - 2.0 * (y as f32 + sy) / self.height as f32) * th;
        Ray {
            origin: self.position,
            dir: normalize(std::array::from_fn(|i| f[i] + px * r[i] + py * u[i])),
        }
    }

    pub fn center_ray(&self, x: usize, y: usize) -> Ray {
        self.ray(x, y, 0.5, 0.5)
    }
}
