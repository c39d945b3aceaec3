use std::io::{Read, Write};
use std::path::Path;

use ndtape::interp::{catmull_rom, node_coord};
use ndtape::Tensor;

use crate::cloudgen::{AugmentOp, Dihedral, XyTransform};
use crate::error::{NimbusError, Result};

const LAT_MAGIC: &[u8; 4] = b"LAT1";

/// Coarse feature plane `[C0, H0, W0]`; `H0` runs along `x`, `W0` along `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub plane: Tensor,
}

impl LatentCode {
    pub fn new(plane: Tensor) -> Result<Self> {
        if plane.shape().len() != 3 {
            return Err(NimbusError::Contract(format!(
                "latent plane must be [C,H,W], got {:?}",
                plane.shape()
            )));
        }
        Ok(Self { plane })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            plane: Tensor::zeros(&[c, h, w]),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.plane.shape();
        [s[0], s[1], s[2]]
    }

    pub fn len(&self) -> usize {
        self.plane.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plane.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        self.plane.data()
    }

    pub fn is_finite(&self) -> bool {
        self.plane.all_finite()
    }

    /// Largest absolute value per channel.
    pub fn channel_max_abs(&self) -> Vec<f32> {
        let [c, h, w] = self.dims();
        (0..c)
            .map(|ch| {
                self.plane.data()[ch * h * w..(ch + 1) * h * w]
                    .iter()
                    .fold(0.0f32, |m, v| m.max(v.abs()))
            })
            .collect()
    }

    pub fn apply_dihedral(&self, d: Dihedral) -> Result<Self> {
        let [c, h, w] = self.dims();
        if d.transpose && h != w {
            return Err(NimbusError::Contract(format!(
                "latent transpose needs a square plane, got {h}x{w}"
            )));
        }
        let src = self.plane.data();
        let mut out = vec![0.0f32; src.len()];
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for k in 0..w {
                    let (io, ko) = d.apply_index(i, k, h, w);
                    out[base + io * w + ko] = src[base + i * w + k];
                }
            }
        }
        Ok(Self {
            plane: Tensor::new(&[c, h, w], out)?,
        })
    }

    /// Bicubic resampling `θ'(u) = θ(R(-angle) u / scale)`, clamped at the border.
    pub fn apply_xy(&self, t: XyTransform) -> Self {
        let [c, h, w] = self.dims();
        let (s, co) = t.angle.sin_cos();
        let src = self.plane.data();
        let mut out = vec![0.0f32; src.len()];
        for i in 0..h {
            let x = -1.0 + 2.0 * i as f32 / (h - 1) as f32;
            for k in 0..w {
                let z = -1.0 + 2.0 * k as f32 / (w - 1) as f32;
                let qx = (co * x + s * z) / t.scale;
                let qz = (-s * x + co * z) / t.scale;
                let (ix, wx) = cubic_taps(qx, h);
                let (iz, wz) = cubic_taps(qz, w);
                for ch in 0..c {
                    let base = ch * h * w;
                    let mut acc = 0.0f32;
                    for a in 0..4 {
                        for b in 0..4 {
                            acc += wx[a] * wz[b] * src[base + ix[a] * w + iz[b]];
                        }
                    }
                    out[base + i * w + k] = acc;
                }
            }
        }
        Self {
            plane: Tensor::new(&[c, h, w], out).expect("shape preserved"),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LAT_MAGIC)?;
        for d in self.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * 4);
        for v in self.plane.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LAT_MAGIC {
            return Err(NimbusError::Format(format!("bad latent magic {magic:?}")));
        }
        let mut d = [0usize; 3];
        for x in d.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *x = u32::from_le_bytes(b) as usize;
        }
        let n: usize = d.iter().product();
        if n == 0 || n > 1 << 28 {
            return Err(NimbusError::Format(format!("implausible latent dims {d:?}")));
        }
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(Tensor::new(&d, data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn cubic_taps(t: f32, n: usize) -> ([usize; 4], [f32; 4]) {
    let (c, _) = node_coord(t, n);
    let i0 = (c.floor() as usize).min(n - 2);
    let w = catmull_rom(c - i0 as f32);
    (
        [
            i0.saturating_sub(1),
            i0,
            (i0 + 1).min(n - 1),
            (i0 + 2).min(n - 1),
        ],
        w,
    )
}

/// Latent analog of a volume augmentation.
pub fn transform_latent(theta: &LatentCode, op: AugmentOp) -> Result<LatentCode> {
    let d = |d: Dihedral| theta.apply_dihedral(d);
    match op {
        AugmentOp::FlipX => d(Dihedral {
            flip_x: true,
            ..Dihedral::IDENTITY
        }),
        AugmentOp::FlipZ => d(Dihedral {
            flip_z: true,
            ..Dihedral::IDENTITY
        }),
        AugmentOp::TransposeXz => d(Dihedral {
            transpose: true,
            ..Dihedral::IDENTITY
        }),
        AugmentOp::XyRotation { angle } => Ok(theta.apply_xy(XyTransform { angle, scale: 1.0 })),
        AugmentOp::XyScale { scale } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(NimbusError::Contract(format!("invalid scale {scale}")));
            }
            Ok(theta.apply_xy(XyTransform { angle: 0.0, scale }))
        }
    }
}
