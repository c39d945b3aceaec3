use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};
use crate::volume::DenseGrid3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    XyRotation { angle: f32 },
    XyScale { scale: f32 },
    FlipX,
    FlipZ,
    /// Swaps the two horizontal axes; needs `nx == nz`.
    TransposeXz,
}

/// Element of the order-8 symmetry group of the square horizontal plane.
///
/// Acts on `(x, z)` by an optional transpose followed by optional sign flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_z: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        transpose: false,
        flip_x: false,
        flip_z: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral {
            transpose: i & 4 != 0,
            flip_x: i & 1 != 0,
            flip_z: i & 2 != 0,
        })
    }

    pub fn code(self) -> u8 {
        self.flip_x as u8 | (self.flip_z as u8) << 1 | (self.transpose as u8) << 2
    }

    pub fn apply_coord(self, x: f32, z: f32) -> (f32, f32) {
        let (mut x, mut z) = if self.transpose { (z, x) } else { (x, z) };
        if self.flip_x {
            x = -x;
        }
        if self.flip_z {
            z = -z;
        }
        (x, z)
    }

    /// Index form of [`apply_coord`](Self::apply_coord) on an `nx × nz` lattice.
    #[inline]
    pub fn apply_index(self, i: usize, k: usize, nx: usize, nz: usize) -> (usize, usize) {
        let (mut i, mut k) = if self.transpose { (k, i) } else { (i, k) };
        if self.flip_x {
            i = nx - 1 - i;
        }
        if self.flip_z {
            k = nz - 1 - k;
        }
        (i, k)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let probe = |d: Dihedral| {
            let (a, b) = d.apply_coord(1.0, 2.0);
            let (c, e) = d.apply_coord(-3.0, 5.0);
            [a, b, c, e]
        };
        let (a, b) = other.apply_coord(1.0, 2.0);
        let (c, e) = other.apply_coord(-3.0, 5.0);
        let (a, b) = self.apply_coord(a, b);
        let (c, e) = self.apply_coord(c, e);
        let target = [a, b, c, e];
        Self::all()
            .into_iter()
            .find(|&d| probe(d) == target)
            .expect("dihedral group is closed")
    }

    pub fn inverse(self) -> Dihedral {
        Self::all()
            .into_iter()
            .find(|&d| d.compose(self) == Self::IDENTITY)
            .expect("every element has an inverse")
    }

    pub fn ops(self) -> Vec<AugmentOp> {
        let mut v = Vec::new();
        if self.transpose {
            v.push(AugmentOp::TransposeXz);
        }
        if self.flip_x {
            v.push(AugmentOp::FlipX);
        }
        if self.flip_z {
            v.push(AugmentOp::FlipZ);
        }
        v
    }

    /// Permutes a grid laid out as `[nx, ny, nz]` (`ny` may be 1 for planes
    /// stored channel-innermost by the caller).
    pub fn apply_grid(self, g: &DenseGrid3) -> Result<DenseGrid3> {
        let [nx, ny, nz] = g.extents();
        if self.transpose && nx != nz {
            return Err(NimbusError::Contract(format!(
                "horizontal transpose needs nx == nz, got {nx} and {nz}"
            )));
        }
        let mut out = vec![0.0f32; g.len()];
        for i in 0..nx {
            for k in 0..nz {
                let (io, ko) = self.apply_index(i, k, nx, nz);
                for j in 0..ny {
                    out[(io * ny + j) * nz + ko] = g.get(i, j, k);
                }
            }
        }
        DenseGrid3::new([nx, ny, nz], out)
    }
}

/// Horizontal similarity: rotate by `angle` about the vertical axis, then scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XyTransform {
    pub angle: f32,
    pub scale: f32,
}

impl XyTransform {
    pub const IDENTITY: XyTransform = XyTransform {
        angle: 0.0,
        scale: 1.0,
    };
}

/// The horizontal transform family: index `j` rotates by `2π ⌊j/2⌋ / ⌈n/2⌉`
/// and scales by 0.95 (even `j`) or 1.05 (odd `j`). `n = 1` is the identity.
pub fn xy_transforms(n: usize) -> Vec<XyTransform> {
    if n <= 1 {
        return vec![XyTransform::IDENTITY; n];
    }
    let rotations = n.div_ceil(2);
    (0..n)
        .map(|j| XyTransform {
            angle: std::f32::consts::TAU * (j / 2) as f32 / rotations as f32,
            scale: if j % 2 == 0 { 0.95 } else { 1.05 },
        })
        .collect()
}

/// Resamples `out(p) = v(R(-angle) p_xz / scale, y)`, zero outside the box.
pub fn apply_xy(v: &DenseGrid3, t: XyTransform) -> DenseGrid3 {
    let [nx, ny, nz] = v.extents();
    let (s, c) = t.angle.sin_cos();
    let data = v.data();
    let mut out = vec![0.0f32; v.len()];
    let sx = (nx - 1) as f32 * 0.5;
    let sz = (nz - 1) as f32 * 0.5;
    for i in 0..nx {
        let x = -1.0 + i as f32 / sx;
        for k in 0..nz {
            let z = -1.0 + k as f32 / sz;
            let qx = (c * x + s * z) / t.scale;
            let qz = (-s * x + c * z) / t.scale;
            if !(-1.0..=1.0).contains(&qx) || !(-1.0..=1.0).contains(&qz) {
                continue;
            }
            let fx = (qx + 1.0) * sx;
            let fz = (qz + 1.0) * sz;
            let i0 = (fx.floor() as usize).min(nx - 2);
            let k0 = (fz.floor() as usize).min(nz - 2);
            let (wx, wz) = (fx - i0 as f32, fz - k0 as f32);
            let w = [
                (1.0 - wx) * (1.0 - wz),
                (1.0 - wx) * wz,
                wx * (1.0 - wz),
                wx * wz,
            ];
            let b = [
                i0 * ny * nz + k0,
                i0 * ny * nz + k0 + 1,
                (i0 + 1) * ny * nz + k0,
                (i0 + 1) * ny * nz + k0 + 1,
            ];
            for j in 0..ny {
                let o = j * nz;
                out[(i * ny + j) * nz + k] = w[0] * data[b[0] + o]
                    + w[1] * data[b[1] + o]
                    + w[2] * data[b[2] + o]
                    + w[3] * data[b[3] + o];
            }
        }
    }
    DenseGrid3::new([nx, ny, nz], out).expect("extents preserved")
}

pub fn apply_volume_transform(v: &DenseGrid3, op: AugmentOp) -> Result<DenseGrid3> {
    let flip = |d: Dihedral| d.apply_grid(v);
    match op {
        AugmentOp::XyRotation { angle } => Ok(apply_xy(v, XyTransform { angle, scale: 1.0 })),
        AugmentOp::XyScale { scale } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(NimbusError::Contract(format!("invalid scale {scale}")));
            }
            Ok(apply_xy(v, XyTransform { angle: 0.0, scale }))
        }
        AugmentOp::FlipX => flip(Dihedral {
            flip_x: true,
            ..Dihedral::IDENTITY
        }),
        AugmentOp::FlipZ => flip(Dihedral {
            flip_z: true,
            ..Dihedral::IDENTITY
        }),
        AugmentOp::TransposeXz => flip(Dihedral {
            transpose: true,
            ..Dihedral::IDENTITY
        }),
    }
}
