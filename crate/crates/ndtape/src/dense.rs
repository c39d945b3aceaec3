//! Fused fully connected stack that recomputes activations chunk by chunk in
//! the backward pass instead of storing them on the tape.

use std::rc::Rc;

use crate::error::{invalid, mismatch, Result};
use crate::ops::{gelu_with_grad, gemm, sigmoid, softplus};
use crate::tape::Var;
use crate::tensor::Tensor;

const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Identity,
    Softplus,
}

struct Layers {
    w: Vec<Rc<Tensor>>,
    b: Vec<Rc<Tensor>>,
    dims: Vec<usize>,
    head: Head,
}

impl Layers {
    /// Runs one chunk of rows. Keeps pre-activations `zs[l]` for every layer
    /// and, for hidden layers, activations `acts[l]` and (when `ders` is
    /// given) activation derivatives.
    fn forward_chunk(
        &self,
        x: &[f32],
        rows: usize,
        zs: &mut Vec<Vec<f32>>,
        acts: &mut Vec<Vec<f32>>,
        mut ders: Option<&mut Vec<Vec<f32>>>,
        out: &mut [f32],
    ) {
        let n = self.w.len();
        zs.resize(n, Vec::new());
        acts.resize(n, Vec::new());
        if let Some(d) = ders.as_deref_mut() {
            d.resize(n, Vec::new());
        }
        for l in 0..n {
            let (k, m) = (self.dims[l], self.dims[l + 1]);
            let mut z = std::mem::take(&mut zs[l]);
            z.clear();
            z.resize(rows * m, 0.0);
            for r in z.chunks_exact_mut(m) {
                r.copy_from_slice(self.b[l].data());
            }
            let input: &[f32] = if l == 0 { x } else { &acts[l - 1] };
            gemm(rows, k, m, input, false, self.w[l].data(), false, &mut z, 1.0);
            if l + 1 < n {
                let a = &mut acts[l];
                a.resize(z.len(), 0.0);
                match ders.as_deref_mut() {
                    Some(d) => {
                        let d = &mut d[l];
                        d.resize(z.len(), 0.0);
                        for ((a, d), &v) in a.iter_mut().zip(d.iter_mut()).zip(&z) {
                            (*a, *d) = gelu_with_grad(v);
                        }
                    }
                    None => {
                        for (a, &v) in a.iter_mut().zip(&z) {
                            *a = gelu_with_grad(v).0;
                        }
                    }
                }
            } else {
                for (o, &v) in out.iter_mut().zip(z.iter()) {
                    *o = match self.head {
                        Head::Identity => v,
                        Head::Softplus => softplus(v),
                    };
                }
            }
            zs[l] = z;
        }
    }
}

impl Var {
    /// `x [M, K0]` through layers `w[l] [K_l, K_{l+1}]`, `b[l] [K_{l+1}]` with
    /// GELU between layers and `head` on the output.
    pub fn mlp(&self, weights: &[Var], biases: &[Var], head: Head) -> Result<Var> {
        let xs = self.shape().to_vec();
        if xs.len() != 2 || weights.is_empty() || weights.len() != biases.len() {
            return invalid("mlp", format!("input {xs:?} with {} layers", weights.len()));
        }
        let mut dims = vec![xs[1]];
        for (w, b) in weights.iter().zip(biases) {
            let ws = w.shape();
            if ws.len() != 2 || ws[0] != *dims.last().unwrap() {
                return mismatch("mlp", &[xs[0], *dims.last().unwrap()], ws);
            }
            if b.shape() != [ws[1]] {
                return mismatch("mlp bias", ws, b.shape());
            }
            dims.push(ws[1]);
        }
        let layers = Rc::new(Layers {
            w: weights.iter().map(|w| w.value_rc()).collect(),
            b: biases.iter().map(|b| b.value_rc()).collect(),
            dims: dims.clone(),
            head,
        });
        let (m, k0, kout) = (xs[0], dims[0], *dims.last().unwrap());
        let mut out = vec![0.0f32; m * kout];
        let (mut zs, mut acts) = (Vec::new(), Vec::new());
        let x = self.value_rc();
        for (c, o) in x.data().chunks(CHUNK * k0).zip(out.chunks_mut(CHUNK * kout)) {
            layers.forward_chunk(c, c.len() / k0, &mut zs, &mut acts, None, o);
        }
        let mut inputs: Vec<&Var> = vec![self];
        inputs.extend(weights.iter());
        inputs.extend(biases.iter());
        let need_x = self.requires_grad();
        let need_w = weights.iter().chain(biases).any(|v| v.requires_grad());
        let n = weights.len();
        self.tape().record(&inputs, Tensor::new(&[m, kout], out)?, move |g| {
            let mut dw: Vec<Vec<f32>> = (0..n).map(|l| vec![0.0; dims[l] * dims[l + 1]]).collect();
            let mut db: Vec<Vec<f64>> = (0..n).map(|l| vec![0.0; dims[l + 1]]).collect();
            let mut dx = if need_x { vec![0.0f32; m * k0] } else { Vec::new() };
            let (mut zs, mut acts, mut ders) = (Vec::new(), Vec::new(), Vec::new());
            let mut scratch = vec![0.0f32; CHUNK * kout];
            for (ci, xc) in x.data().chunks(CHUNK * k0).enumerate() {
                let rows = xc.len() / k0;
                layers.forward_chunk(
                    xc,
                    rows,
                    &mut zs,
                    &mut acts,
                    Some(&mut ders),
                    &mut scratch[..rows * kout],
                );
                let gc = &g.data()[ci * CHUNK * kout..][..rows * kout];
                let mut delta: Vec<f32> = match layers.head {
                    Head::Identity => gc.to_vec(),
                    Head::Softplus => gc.iter().zip(&zs[n - 1]).map(|(&g, &z)| g * sigmoid(z)).collect(),
                };
                for l in (0..n).rev() {
                    let (k, mm) = (dims[l], dims[l + 1]);
                    let input: &[f32] = if l == 0 { xc } else { &acts[l - 1] };
                    if need_w {
                        gemm(k, rows, mm, input, true, &delta, false, &mut dw[l], 1.0);
                        for r in delta.chunks_exact(mm) {
                            for (a, &d) in db[l].iter_mut().zip(r) {
                                *a += d as f64;
                            }
                        }
                    }
                    if l > 0 || need_x {
                        let mut prev = vec![0.0f32; rows * k];
                        gemm(rows, mm, k, &delta, false, layers.w[l].data(), true, &mut prev, 0.0);
                        if l > 0 {
                            for (p, &d) in prev.iter_mut().zip(&ders[l - 1]) {
                                *p *= d;
                            }
                            delta = prev;
                        } else {
                            dx[ci * CHUNK * k0..][..rows * k0].copy_from_slice(&prev);
                        }
                    }
                }
            }
            let mut grads = Vec::with_capacity(1 + 2 * n);
            grads.push(need_x.then(|| Tensor::new(&[m, k0], dx).unwrap()));
            for (l, d) in dw.into_iter().enumerate() {
                grads.push(need_w.then(|| Tensor::new(&[dims[l], dims[l + 1]], d).unwrap()));
            }
            for (l, d) in db.into_iter().enumerate() {
                let d = d.into_iter().map(|v| v as f32).collect();
                grads.push(need_w.then(|| Tensor::new(&[dims[l + 1]], d).unwrap()));
            }
            grads
        })
    }
}
