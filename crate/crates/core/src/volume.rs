//! Dense density grids and the `VOL1` file format.

use std::io::{Read, Write};
use std::path::Path;

use ndtape::interp;
use ndtape::Tensor;

use crate::error::{NimbusError, Result};

const VOL_MAGIC: &[u8; 4] = b"VOL1";

/// Row-major `[nx, ny, nz]` voxel densities; `y` is the vertical axis.
///
/// Node `i` on an axis with `n` nodes sits at normalized coordinate
/// `-1 + 2 i / (n - 1)`; the world box has half-extents `extents / max(extents)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid3 {
    extents: [usize; 3],
    data: Vec<f32>,
}

impl DenseGrid3 {
    pub fn new(extents: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n != data.len() || extents.iter().any(|&e| e < 2) {
            return Err(NimbusError::Contract(format!(
                "grid extents {extents:?} do not match payload of {} values",
                data.len()
            )));
        }
        Ok(Self { extents, data })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self::filled(extents, 0.0)
    }

    pub fn filled(extents: [usize; 3], v: f32) -> Self {
        Self {
            extents,
            data: vec![v; extents.iter().product()],
        }
    }

    /// Fills from a function of normalized node coordinates.
    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut([f32; 3]) -> f32) -> Self {
        let mut data = Vec::with_capacity(extents.iter().product());
        for i in 0..extents[0] {
            for j in 0..extents[1] {
                for k in 0..extents[2] {
                    data.push(f(Self::node_coord_of(extents, [i, j, k])));
                }
            }
        }
        Self { extents, data }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.extents[1] + j) * self.extents[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn node_coord_of(extents: [usize; 3], idx: [usize; 3]) -> [f32; 3] {
        std::array::from_fn(|a| -1.0 + 2.0 * idx[a] as f32 / (extents[a] - 1) as f32)
    }

    pub fn node_coord(&self, idx: [usize; 3]) -> [f32; 3] {
        Self::node_coord_of(self.extents, idx)
    }

    /// Half-extents of the world-space box occupied by the grid.
    pub fn half_extents(&self) -> [f32; 3] {
        half_extents(self.extents)
    }

    /// Trilinear lookup at normalized coordinates (clamped).
    pub fn sample(&self, p: [f32; 3]) -> f32 {
        interp::trilinear(self.extents, &self.data, p)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Fraction of voxels with density above `threshold`.
    pub fn occupancy(&self, threshold: f32) -> f64 {
        self.data.iter().filter(|&&v| v > threshold).count() as f64 / self.data.len() as f64
    }

    /// Density-weighted mean node coordinate.
    pub fn centroid(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let mut m = 0.0f64;
        for i in 0..self.extents[0] {
            for j in 0..self.extents[1] {
                for k in 0..self.extents[2] {
                    let v = self.get(i, j, k) as f64;
                    let p = self.node_coord([i, j, k]);
                    for a in 0..3 {
                        acc[a] += v * p[a] as f64;
                    }
                    m += v;
                }
            }
        }
        acc.map(|a| if m > 0.0 { a / m } else { 0.0 })
    }

    /// Mean density of the lower and upper halves along `y`.
    pub fn vertical_half_means(&self) -> (f64, f64) {
        let ny = self.extents[1];
        let (mut lo, mut hi, mut nlo, mut nhi) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..self.extents[0] {
            for j in 0..ny {
                for k in 0..self.extents[2] {
                    let v = self.get(i, j, k) as f64;
                    if 2 * j + 1 < ny {
                        lo += v;
                        nlo += 1;
                    } else if 2 * j + 1 > ny {
                        hi += v;
                        nhi += 1;
                    }
                }
            }
        }
        (lo / nlo.max(1) as f64, hi / nhi.max(1) as f64)
    }

    /// Largest density within `margin` voxels of any face.
    pub fn boundary_max(&self, margin: usize) -> f32 {
        let e = self.extents;
        let mut m = 0.0f32;
        for i in 0..e[0] {
            for j in 0..e[1] {
                for k in 0..e[2] {
                    let inner = [i, j, k]
                        .iter()
                        .zip(e)
                        .all(|(&x, n)| x >= margin && x + margin < n);
                    if !inner {
                        m = m.max(self.get(i, j, k));
                    }
                }
            }
        }
        m
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.extents, self.data.clone()).expect("grid payload matches extents")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(NimbusError::Contract(format!("tensor {s:?} is not a 3D grid")));
        }
        Self::new([s[0], s[1], s[2]], t.data().to_vec())
    }

    /// `VOL1 | u32 nx | u32 ny | u32 nz | f32 densities`, little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(VOL_MAGIC)?;
        for e in self.extents {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != VOL_MAGIC {
            return Err(NimbusError::Format(format!("bad volume magic {magic:?}")));
        }
        let mut e = [0usize; 3];
        for x in e.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *x = u32::from_le_bytes(b) as usize;
        }
        let n: usize = e.iter().product();
        if n == 0 || n > 1 << 30 {
            return Err(NimbusError::Format(format!("implausible volume extents {e:?}")));
        }
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(e, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub fn half_extents(extents: [usize; 3]) -> [f32; 3] {
    let m = *extents.iter().max().unwrap() as f32;
    extents.map(|e| e as f32 / m)
}
