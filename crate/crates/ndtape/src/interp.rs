//! Interpolating samplers over `[-1, 1]` domains.
//!
//! All samplers use node-aligned coordinates: node `i` of an axis with `n`
//! nodes sits at `-1 + 2 i / (n - 1)`, so `-1` and `+1` hit the end nodes
//! exactly. Coordinates outside the domain are clamped, never wrapped.

use std::rc::Rc;

use crate::error::{invalid, mismatch, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Continuous node index of `t` in `[-1,1]` on an `n`-node axis, clamped,
/// plus the derivative `d index / d t` (zero when clamped).
#[inline]
pub fn node_coord(t: f32, n: usize) -> (f32, f32) {
    let scale = 0.5 * (n - 1) as f32;
    let c = (t + 1.0) * scale;
    if c <= 0.0 {
        (0.0, 0.0)
    } else if c >= (n - 1) as f32 {
        ((n - 1) as f32, 0.0)
    } else {
        (c, scale)
    }
}

/// Catmull-Rom weights for taps at offsets -1, 0, 1, 2 of fraction `t`.
#[inline]
pub fn catmull_rom(t: f32) -> [f32; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[inline]
pub fn catmull_rom_deriv(t: f32) -> [f32; 4] {
    let t2 = t * t;
    [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ]
}

/// Clamped tap indices, weights and weight derivatives (w.r.t. the domain
/// coordinate) along one bicubic axis.
#[inline]
fn cubic_axis(t: f32, n: usize) -> ([usize; 4], [f32; 4], [f32; 4]) {
    let (c, dc) = node_coord(t, n);
    let i0 = (c.floor() as usize).min(n - 2);
    let f = c - i0 as f32;
    let w = catmull_rom(f);
    let dw = catmull_rom_deriv(f).map(|d| d * dc);
    let idx = [
        i0.saturating_sub(1),
        i0,
        (i0 + 1).min(n - 1),
        (i0 + 2).min(n - 1),
    ];
    (idx, w, dw)
}

/// Linear tap indices and weights along one axis.
#[inline]
pub fn linear_axis(t: f32, n: usize) -> (usize, usize, f32) {
    let (c, _) = node_coord(t, n);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f32)
}

/// The 8 trilinear stencil indices (into a row-major `[nx,ny,nz]` buffer)
/// and weights for `p` in `[-1,1]^3`.
#[inline]
pub fn trilinear_stencil(extents: [usize; 3], p: [f32; 3]) -> ([usize; 8], [f32; 8]) {
    let (x0, x1, fx) = linear_axis(p[0], extents[0]);
    let (y0, y1, fy) = linear_axis(p[1], extents[1]);
    let (z0, z1, fz) = linear_axis(p[2], extents[2]);
    let (ny, nz) = (extents[1], extents[2]);
    let at = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    (
        [
            at(x0, y0, z0),
            at(x0, y0, z1),
            at(x0, y1, z0),
            at(x0, y1, z1),
            at(x1, y0, z0),
            at(x1, y0, z1),
            at(x1, y1, z0),
            at(x1, y1, z1),
        ],
        [
            (1.0 - fx) * (1.0 - fy) * (1.0 - fz),
            (1.0 - fx) * (1.0 - fy) * fz,
            (1.0 - fx) * fy * (1.0 - fz),
            (1.0 - fx) * fy * fz,
            fx * (1.0 - fy) * (1.0 - fz),
            fx * (1.0 - fy) * fz,
            fx * fy * (1.0 - fz),
            fx * fy * fz,
        ],
    )
}

/// Trilinear lookup into a row-major `[nx,ny,nz]` buffer.
#[inline]
pub fn trilinear(extents: [usize; 3], data: &[f32], p: [f32; 3]) -> f32 {
    let (idx, w) = trilinear_stencil(extents, p);
    idx.iter().zip(w).map(|(&i, w)| data[i] * w).sum()
}

/// Linear lookup into `vec` (`n >= 2`) over `[-1,1]`.
#[inline]
pub fn linear_1d(vec: &[f32], t: f32) -> f32 {
    let (i0, i1, f) = linear_axis(t, vec.len());
    vec[i0] * (1.0 - f) + vec[i1] * f
}

impl Var {
    /// Catmull-Rom bicubic sampling of `plane [C,H,W]` at `uv [P,2]`
    /// (u along H, v along W) giving `[P,C]`. Differentiable w.r.t. both
    /// the plane and the coordinates.
    pub fn sample_bicubic_2d(&self, uv: &Var) -> Result<Var> {
        let ps = self.shape().to_vec();
        if ps.len() != 3 || ps[1] < 4 || ps[2] < 4 {
            return invalid("sample_bicubic_2d", format!("plane {ps:?} needs [C,H>=4,W>=4]"));
        }
        if uv.shape().len() != 2 || uv.shape()[1] != 2 {
            return mismatch("sample_bicubic_2d", &ps, uv.shape());
        }
        if !uv.value().all_finite() {
            return invalid("sample_bicubic_2d", "non-finite coordinates");
        }
        let (c, h, w) = (ps[0], ps[1], ps[2]);
        let p = uv.shape()[0];
        let plane = self.value_rc();
        let coords = uv.value_rc();
        let mut out = vec![0.0f32; p * c];
        for (i, o) in out.chunks_exact_mut(c).enumerate() {
            let (iy, wy, _) = cubic_axis(coords.data()[2 * i], h);
            let (ix, wx, _) = cubic_axis(coords.data()[2 * i + 1], w);
            for (ch, oc) in o.iter_mut().enumerate() {
                let base = &plane.data()[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0f32;
                for a in 0..4 {
                    let row = &base[iy[a] * w..];
                    let mut r = 0.0f32;
                    for b in 0..4 {
                        r += wx[b] * row[ix[b]];
                    }
                    acc += wy[a] * r;
                }
                *oc = acc;
            }
        }
        let (rp, ru) = (self.requires_grad(), uv.requires_grad());
        self.tape().record(&[self, uv], Tensor::new(&[p, c], out).unwrap(), move |g| {
            let mut dplane = rp.then(|| vec![0.0f32; c * h * w]);
            let mut duv = ru.then(|| vec![0.0f32; p * 2]);
            for i in 0..p {
                let (iy, wy, dwy) = cubic_axis(coords.data()[2 * i], h);
                let (ix, wx, dwx) = cubic_axis(coords.data()[2 * i + 1], w);
                let gi = &g.data()[i * c..(i + 1) * c];
                if let Some(dp) = dplane.as_mut() {
                    for (ch, &gv) in gi.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let base = &mut dp[ch * h * w..(ch + 1) * h * w];
                        for a in 0..4 {
                            for b in 0..4 {
                                base[iy[a] * w + ix[b]] += gv * wy[a] * wx[b];
                            }
                        }
                    }
                }
                if let Some(du) = duv.as_mut() {
                    let (mut su, mut sv) = (0.0f32, 0.0f32);
                    for (ch, &gv) in gi.iter().enumerate() {
                        let base = &plane.data()[ch * h * w..(ch + 1) * h * w];
                        for a in 0..4 {
                            for b in 0..4 {
                                let val = gv * base[iy[a] * w + ix[b]];
                                su += val * dwy[a] * wx[b];
                                sv += val * wy[a] * dwx[b];
                            }
                        }
                    }
                    du[2 * i] += su;
                    du[2 * i + 1] += sv;
                }
            }
            vec![
                dplane.map(|d| Tensor::new(&[c, h, w], d).unwrap()),
                duv.map(|d| Tensor::new(&[p, 2], d).unwrap()),
            ]
        })
    }

    /// Linear sampling of rows of `table [Q,N]`: output element `[i, k]` is
    /// row `rows[i]` sampled at `positions[i*K + k]` (clamped to `[-1,1]`).
    /// Differentiable w.r.t. the table.
    pub fn sample_linear_rows(
        &self,
        rows: Rc<Vec<u32>>,
        positions: Rc<Vec<f32>>,
        k: usize,
    ) -> Result<Var> {
        let ts = self.shape().to_vec();
        if ts.len() != 2 || ts[1] < 2 {
            return invalid("sample_linear_rows", format!("table {ts:?} needs [Q,N>=2]"));
        }
        let (q, n) = (ts[0], ts[1]);
        let p = rows.len();
        if positions.len() != p * k {
            return mismatch("sample_linear_rows", &[p, k], &[positions.len()]);
        }
        if rows.iter().any(|&r| r as usize >= q) {
            return invalid("sample_linear_rows", "row index out of range");
        }
        let mut out = vec![0.0f32; p * k];
        let table = self.data();
        for i in 0..p {
            let row = &table[rows[i] as usize * n..][..n];
            for j in 0..k {
                out[i * k + j] = linear_1d(row, positions[i * k + j]);
            }
        }
        self.tape().record(&[self], Tensor::new(&[p, k], out).unwrap(), move |g| {
            let mut d = vec![0.0f32; q * n];
            for i in 0..p {
                let base = rows[i] as usize * n;
                for j in 0..k {
                    let (i0, i1, f) = linear_axis(positions[i * k + j], n);
                    let gv = g.data()[i * k + j];
                    d[base + i0] += gv * (1.0 - f);
                    d[base + i1] += gv * f;
                }
            }
            vec![Some(Tensor::new(&[q, n], d).unwrap())]
        })
    }

    /// Linear sampling of a `[N]` vector at `t` (clamped), as a `[1]` tensor.
    pub fn sample_linear_1d(&self, t: f32) -> Result<Var> {
        if self.shape().len() != 1 || self.shape()[0] < 2 {
            return invalid("sample_linear_1d", format!("vector {:?} needs N>=2", self.shape()));
        }
        let n = self.shape()[0];
        self.reshape(&[1, n])?
            .sample_linear_rows(Rc::new(vec![0]), Rc::new(vec![t]), 1)?
            .reshape(&[1])
    }

    /// Trilinear sampling of `grid [nx,ny,nz]` at constant points `[-1,1]^3`,
    /// giving `[P]`. Differentiable w.r.t. the stencil values.
    pub fn sample_trilinear_3d(&self, points: Rc<Vec<[f32; 3]>>) -> Result<Var> {
        let gs = self.shape().to_vec();
        if gs.len() != 3 || gs.iter().any(|&e| e < 2) {
            return invalid("sample_trilinear_3d", format!("grid {gs:?} needs extents >= 2"));
        }
        let ext = [gs[0], gs[1], gs[2]];
        let out: Vec<f32> = points.iter().map(|&p| trilinear(ext, self.data(), p)).collect();
        let np = points.len();
        self.tape().record(&[self], Tensor::new(&[np], out).unwrap(), move |g| {
            let mut d = vec![0.0f32; ext.iter().product()];
            for (&p, &gv) in points.iter().zip(g.data()) {
                let (idx, w) = trilinear_stencil(ext, p);
                for (i, w) in idx.iter().zip(w) {
                    d[*i] += gv * w;
                }
            }
            vec![Some(Tensor::new(&ext, d).unwrap())]
        })
    }
}
