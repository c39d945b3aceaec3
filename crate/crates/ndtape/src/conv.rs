//! Image-plane primitives over `[B, C, H, W]` tensors.

use crate::error::{mismatch, Result};
use crate::ops::gemm;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Border handling for 3x3 same-size convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Edge texels are repeated; constant planes stay constant.
    Replicate,
}

#[inline]
fn tap(i: isize, n: usize, pad: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        match pad {
            Padding::Zero => None,
            Padding::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Unfolds one `[C,H,W]` image into `[C*9, H*W]` columns.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, pad: Padding, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = tap(y as isize + ky as isize - 1, h, pad);
                    for xx in 0..w {
                        let sx = tap(xx as isize + kx as isize - 1, w, pad);
                        row[y * w + xx] = match (sy, sx) {
                            (Some(sy), Some(sx)) => plane[sy * w + sx],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, pad: Padding, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = tap(y as isize + ky as isize - 1, h, pad);
                    for xx in 0..w {
                        let sx = tap(xx as isize + kx as isize - 1, w, pad);
                        if let (Some(sy), Some(sx)) = (sy, sx) {
                            plane[sy * w + sx] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn half_pixel_source(o: usize, n_in: usize) -> (usize, usize, f32) {
    let src = ((o as f32 + 0.5) * 0.5 - 0.5).clamp(0.0, (n_in - 1) as f32);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f32)
}

impl Var {
    /// 3x3 same-size cross-correlation: `x [B,Ci,H,W]`, `weight [Co,Ci,3,3]`,
    /// `bias [Co]` -> `[B,Co,H,W]`.
    pub fn conv2d(&self, weight: &Var, bias: &Var, pad: Padding) -> Result<Var> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
            return mismatch("conv2d", &xs, &ws);
        }
        let co = ws[0];
        if bias.shape() != [co] {
            return mismatch("conv2d bias", &ws, bias.shape());
        }
        let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let kdim = ci * 9;
        let mut cols = vec![0.0f32; b * kdim * hw];
        let mut out = vec![0.0f32; b * co * hw];
        for n in 0..b {
            let col = &mut cols[n * kdim * hw..(n + 1) * kdim * hw];
            im2col(&self.data()[n * ci * hw..(n + 1) * ci * hw], ci, h, w, pad, col);
            let o = &mut out[n * co * hw..(n + 1) * co * hw];
            for (oc, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias.data()[oc]);
            }
            gemm(co, kdim, hw, weight.data(), false, col, false, o, 1.0);
        }
        let wv = weight.value_rc();
        let (rx, rw, rb) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.requires_grad(),
        );
        self.tape().record(
            &[self, weight, bias],
            Tensor::new(&[b, co, h, w], out).unwrap(),
            move |g| {
                let mut dw = rw.then(|| vec![0.0f32; co * kdim]);
                let mut dx = rx.then(|| vec![0.0f32; b * ci * hw]);
                let mut dcol = vec![0.0f32; kdim * hw];
                for n in 0..b {
                    let gn = &g.data()[n * co * hw..(n + 1) * co * hw];
                    let col = &cols[n * kdim * hw..(n + 1) * kdim * hw];
                    if let Some(dw) = dw.as_mut() {
                        gemm(co, hw, kdim, gn, false, col, true, dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(kdim, co, hw, wv.data(), true, gn, false, &mut dcol, 0.0);
                        col2im(&dcol, ci, h, w, pad, &mut dx[n * ci * hw..(n + 1) * ci * hw]);
                    }
                }
                let db = rb.then(|| {
                    let mut db = vec![0.0f64; co];
                    for (i, plane) in g.data().chunks_exact(hw).enumerate() {
                        db[i % co] += plane.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    Tensor::new(&[co], db.into_iter().map(|v| v as f32).collect()).unwrap()
                });
                vec![
                    dx.map(|d| Tensor::new(&[b, ci, h, w], d).unwrap()),
                    dw.map(|d| Tensor::new(&[co, ci, 3, 3], d).unwrap()),
                    db,
                ]
            },
        )
    }

    /// Bilinear 2x upsampling with half-pixel centers and edge clamping
    /// (symmetric under flips and transposes of the plane).
    pub fn upsample2x(&self) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return mismatch("upsample2x", &s, &[0, 0, 0, 0]);
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let ys: Vec<_> = (0..oh).map(|o| half_pixel_source(o, h)).collect();
        let xs: Vec<_> = (0..ow).map(|o| half_pixel_source(o, w)).collect();
        let mut out = vec![0.0f32; bc * oh * ow];
        for p in 0..bc {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let shape_in = s.clone();
        self.tape().record(
            &[self],
            Tensor::new(&[s[0], s[1], oh, ow], out).unwrap(),
            move |g| {
                let mut dx = vec![0.0f32; bc * h * w];
                for p in 0..bc {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            d[y1 * w + x0] += gv * fy * (1.0 - fx);
                            d[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::new(&shape_in, dx).unwrap())]
            },
        )
    }

    /// 2x2 average pooling; H and W must be even.
    pub fn avg_pool2(&self) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return mismatch("avg_pool2", &s, &[0, 0, 2, 2]);
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; bc * oh * ow];
        for p in 0..bc {
            let src = &self.data()[p * h * w..];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    out[p * oh * ow + y * ow + x] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let shape_in = s.clone();
        self.tape().record(
            &[self],
            Tensor::new(&[s[0], s[1], oh, ow], out).unwrap(),
            move |g| {
                let mut dx = vec![0.0f32; bc * h * w];
                for p in 0..bc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * g.data()[p * oh * ow + y * ow + x];
                            let i = p * h * w + 2 * y * w + 2 * x;
                            dx[i] += gv;
                            dx[i + 1] += gv;
                            dx[i + w] += gv;
                            dx[i + w + 1] += gv;
                        }
                    }
                }
                vec![Some(Tensor::new(&shape_in, dx).unwrap())]
            },
        )
    }

    /// Concatenates `[B,C1,H,W]` and `[B,C2,H,W]` along channels.
    pub fn concat_channels(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return mismatch("concat_channels", &sa, &sb);
        }
        let (b, c1, c2) = (sa[0], sa[1], sb[1]);
        let hw = sa[2] * sa[3];
        let mut out = Vec::with_capacity(b * (c1 + c2) * hw);
        for n in 0..b {
            out.extend_from_slice(&self.data()[n * c1 * hw..(n + 1) * c1 * hw]);
            out.extend_from_slice(&other.data()[n * c2 * hw..(n + 1) * c2 * hw]);
        }
        let (h, w) = (sa[2], sa[3]);
        self.tape().record(
            &[self, other],
            Tensor::new(&[b, c1 + c2, h, w], out).unwrap(),
            move |g| {
                let mut ga = Vec::with_capacity(b * c1 * hw);
                let mut gb = Vec::with_capacity(b * c2 * hw);
                for n in 0..b {
                    let base = n * (c1 + c2) * hw;
                    ga.extend_from_slice(&g.data()[base..base + c1 * hw]);
                    gb.extend_from_slice(&g.data()[base + c1 * hw..base + (c1 + c2) * hw]);
                }
                vec![
                    Some(Tensor::new(&[b, c1, h, w], ga).unwrap()),
                    Some(Tensor::new(&[b, c2, h, w], gb).unwrap()),
                ]
            },
        )
    }
}
