use std::rc::Rc;

use ndtape::{Padding, Tape, Tensor, TensorContainer, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::latent::LatentCode;
use crate::error::{NimbusError, Result};
use crate::nn::Mlp;
use crate::rng;
use crate::volume::DenseGrid3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonoplanarConfig {
    /// `C0`.
    pub latent_channels: usize,
    /// `H0 = W0`.
    pub latent_size: usize,
    /// `C1 = N`, the window length.
    pub feature_channels: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub grid_extents: [usize; 3],
}

impl Default for MonoplanarConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            latent_size: 32,
            feature_channels: 16,
            hidden: 64,
            hidden_layers: 3,
            grid_extents: [64, 32, 64],
        }
    }
}

impl MonoplanarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NimbusError::Config(m));
        if self.latent_size < 2 {
            return bad(format!("latent_size {} must be >= 2", self.latent_size));
        }
        if self.feature_channels < 2 || self.latent_channels < 1 || self.hidden < 1 {
            return bad("feature_channels >= 2, latent_channels >= 1 and hidden >= 1 required".into());
        }
        let e = self.grid_extents;
        if e[0] != e[2] || e.iter().any(|&x| x < 2) {
            return bad(format!("grid extents {e:?} need a square horizontal plane"));
        }
        Ok(())
    }

    pub fn upsampled_size(&self) -> usize {
        2 * self.latent_size
    }

    pub fn latent_len(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }

    pub fn voxel_count(&self) -> usize {
        self.grid_extents.iter().product()
    }

    /// Proxy-grid voxels per latent parameter.
    pub fn compression_ratio(&self) -> f64 {
        self.voxel_count() as f64 / self.latent_len() as f64
    }

    pub fn zero_latent(&self) -> LatentCode {
        LatentCode::zeros(self.latent_channels, self.latent_size, self.latent_size)
    }

    pub fn random_latent(&self, seed: u64, std: f32) -> LatentCode {
        let mut r = rng::stream(&[seed, 0x4C41_5445]);
        let n = rand_distr::Normal::new(0.0f32, std).unwrap();
        let s = self.latent_size;
        let plane = Tensor::from_fn(&[self.latent_channels, s, s], |_| {
            rand_distr::Distribution::sample(&n, &mut r)
        });
        LatentCode { plane }
    }
}

/// Raw window positions `y - 1 + kΔ`, `Δ = 2/(N-1)`, before clamping.
pub fn window_offsets(y: f32, n: usize) -> Vec<f32> {
    let delta = 2.0 / (n - 1) as f32;
    (0..n).map(|k| y - 1.0 + k as f32 * delta).collect()
}

/// Window positions clamped to `[-1, 1]`.
pub fn window_positions(y: f32, n: usize) -> Vec<f32> {
    window_offsets(y, n).into_iter().map(|p| p.clamp(-1.0, 1.0)).collect()
}

/// Shared decoder: 2× bilinear upsampler with two symmetric 3×3 convs, then
/// a window MLP over the per-column feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: MonoplanarConfig,
    /// `[C1, C0, 3]`: center, edge and corner taps of each kernel.
    pub up1: Tensor,
    pub up1_b: Tensor,
    pub up2: Tensor,
    pub up2_b: Tensor,
    pub mlp: Mlp,
}

pub struct DecoderVars {
    up1: Var,
    up1_b: Var,
    up2: Var,
    up2_b: Var,
    k1: Var,
    k2: Var,
    mlp: crate::nn::MlpVars,
    n: usize,
}

/// Expands `[Co, Ci, 3]` (center, edge, corner) into a `[Co, Ci, 3, 3]`
/// kernel invariant under all flips and transposes.
fn expand_symmetric(sym: &Var) -> Result<Var> {
    let s = sym.shape().to_vec();
    let (co, ci) = (s[0], s[1]);
    const CLASS: [usize; 9] = [2, 1, 2, 1, 0, 1, 2, 1, 2];
    let src = sym.data();
    let mut out = vec![0.0f32; co * ci * 9];
    for p in 0..co * ci {
        for t in 0..9 {
            out[p * 9 + t] = src[p * 3 + CLASS[t]];
        }
    }
    Ok(sym.tape().record(&[sym], Tensor::new(&[co, ci, 3, 3], out)?, move |g| {
        let mut d = vec![0.0f32; co * ci * 3];
        for p in 0..co * ci {
            for t in 0..9 {
                d[p * 3 + CLASS[t]] += g.data()[p * 9 + t];
            }
        }
        vec![Some(Tensor::new(&[co, ci, 3], d).unwrap())]
    })?)
}

impl DecoderParams {
    pub fn init(config: &MonoplanarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(&[seed, 0x4445_434F]);
        let (c0, c1) = (config.latent_channels, config.feature_channels);
        let sym = |co: usize, ci: usize, r: &mut rng::StreamRng| {
            let std = (2.0 / (9 * ci) as f32).sqrt();
            Tensor::from_fn(&[co, ci, 3], |_| std * (r.random::<f32>() * 2.0 - 1.0) * 1.7)
        };
        let up1 = sym(c1, c0, &mut r);
        let up2 = sym(c1, c1, &mut r);
        let mut sizes = vec![c1];
        sizes.extend(std::iter::repeat_n(config.hidden, config.hidden_layers));
        sizes.push(1);
        let mlp = Mlp::new(&sizes, true, -3.0, &mut r);
        Ok(Self {
            config: config.clone(),
            up1,
            up1_b: Tensor::zeros(&[c1]),
            up2,
            up2_b: Tensor::zeros(&[c1]),
            mlp,
        })
    }

    pub fn param_count(&self) -> usize {
        self.up1.len() + self.up1_b.len() + self.up2.len() + self.up2_b.len() + self.mlp.param_count()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.up1, &mut self.up1_b, &mut self.up2, &mut self.up2_b];
        v.extend(self.mlp.tensors_mut());
        v
    }

    pub fn on_tape(&self, tape: &Tape, requires_grad: bool) -> Result<DecoderVars> {
        let up1 = tape.leaf(self.up1.clone(), requires_grad);
        let up2 = tape.leaf(self.up2.clone(), requires_grad);
        Ok(DecoderVars {
            k1: expand_symmetric(&up1)?,
            k2: expand_symmetric(&up2)?,
            up1,
            up2,
            up1_b: tape.leaf(self.up1_b.clone(), requires_grad),
            up2_b: tape.leaf(self.up2_b.clone(), requires_grad),
            mlp: self.mlp.on_tape(tape, requires_grad),
            n: self.config.feature_channels,
        })
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        let k = &self.config;
        let dims = [
            k.latent_channels,
            k.latent_size,
            k.feature_channels,
            k.hidden,
            k.hidden_layers,
            k.grid_extents[0],
            k.grid_extents[1],
            k.grid_extents[2],
        ];
        c.push("config", Tensor::new(&[8], dims.map(|d| d as f32).to_vec())?);
        c.push("up1", self.up1.clone());
        c.push("up1_b", self.up1_b.clone());
        c.push("up2", self.up2.clone());
        c.push("up2_b", self.up2_b.clone());
        self.mlp.save("mlp", &mut c);
        Ok(c)
    }

    pub fn from_container(mut c: TensorContainer) -> Result<Self> {
        let cfg = c.take("config")?;
        if cfg.len() != 8 {
            return Err(NimbusError::Format("decoder config entry must hold 8 values".into()));
        }
        let d: Vec<usize> = cfg.data().iter().map(|&v| v as usize).collect();
        let config = MonoplanarConfig {
            latent_channels: d[0],
            latent_size: d[1],
            feature_channels: d[2],
            hidden: d[3],
            hidden_layers: d[4],
            grid_extents: [d[5], d[6], d[7]],
        };
        config.validate()?;
        let d = Self {
            up1: c.take("up1")?,
            up1_b: c.take("up1_b")?,
            up2: c.take("up2")?,
            up2_b: c.take("up2_b")?,
            mlp: Mlp::load("mlp", config.hidden_layers + 1, true, &mut c)?,
            config,
        };
        let (c0, c1) = (d.config.latent_channels, d.config.feature_channels);
        if d.up1.shape() != [c1, c0, 3] || d.up2.shape() != [c1, c1, 3] || d.mlp.input_dim() != c1 {
            return Err(NimbusError::Format("decoder tensors disagree with config".into()));
        }
        Ok(d)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.to_container()?.write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_container(TensorContainer::read_from(&mut f)?)
    }

    /// Density at arbitrary points in `[-1,1]^3`.
    pub fn decode_points(&self, theta: &LatentCode, points: &[[f32; 3]]) -> Result<Vec<f32>> {
        let tape = Tape::new();
        let dv = self.on_tape(&tape, false)?;
        let th = tape.constant(theta.plane.clone());
        let plane = dv.upsample(&th)?;
        Ok(dv.decode_points(&plane, points)?.data().to_vec())
    }

    pub fn decode_density(&self, theta: &LatentCode, p: [f32; 3]) -> Result<f32> {
        Ok(self.decode_points(theta, &[p])?[0])
    }

    /// Evaluates the proxy grid at every node of `extents` (no gradients).
    pub fn decode_grid(&self, theta: &LatentCode, extents: [usize; 3]) -> Result<DenseGrid3> {
        let plane = {
            let tape = Tape::new();
            let dv = self.on_tape(&tape, false)?;
            dv.upsample(&tape.constant(theta.plane.clone()))?.value().clone()
        };
        let [nx, ny, nz] = extents;
        const CHUNK: usize = 8;
        let slabs: Vec<Result<Vec<f32>>> = (0..nx)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|xs| {
                let tape = Tape::new();
                let dv = self.on_tape(&tape, false)?;
                let pv = tape.constant(plane.clone());
                let cols: Vec<[f32; 2]> = xs
                    .iter()
                    .flat_map(|&i| (0..nz).map(move |k| [node(i, nx), node(k, nz)]))
                    .collect();
                let flat = dv.decode_columns(&pv, &cols, ny)?;
                let mut out = vec![0.0f32; flat.data().len()];
                for (a, _) in xs.iter().enumerate() {
                    for k in 0..nz {
                        for j in 0..ny {
                            out[(a * ny + j) * nz + k] = flat.data()[(a * nz + k) * ny + j];
                        }
                    }
                }
                Ok(out)
            })
            .collect();
        let mut data = Vec::with_capacity(nx * ny * nz);
        for s in slabs {
            data.extend(s?);
        }
        DenseGrid3::new(extents, data)
    }
}

#[inline]
fn node(i: usize, n: usize) -> f32 {
    -1.0 + 2.0 * i as f32 / (n - 1) as f32
}

impl DecoderVars {
    /// `θ [C0,H0,W0]` to the feature plane `[C1, 2H0, 2W0]`.
    pub fn upsample(&self, theta: &Var) -> Result<Var> {
        let s = theta.shape().to_vec();
        let x = theta.reshape(&[1, s[0], s[1], s[2]])?.upsample2x()?;
        let h = x.conv2d(&self.k1, &self.up1_b, Padding::Replicate)?.gelu()?;
        let f = h.conv2d(&self.k2, &self.up2_b, Padding::Replicate)?;
        let fs = f.shape().to_vec();
        Ok(f.reshape(&[fs[1], fs[2], fs[3]])?)
    }

    /// Densities `[P]` at individual points.
    pub fn decode_points(&self, plane: &Var, points: &[[f32; 3]]) -> Result<Var> {
        let tape = plane.tape();
        let uv: Vec<f32> = points.iter().flat_map(|p| [p[0], p[2]]).collect();
        let uv = tape.constant(Tensor::new(&[points.len(), 2], uv)?);
        let feats = plane.sample_bicubic_2d(&uv)?;
        let rows: Vec<u32> = (0..points.len() as u32).collect();
        let pos: Vec<f32> = points.iter().flat_map(|p| window_positions(p[1], self.n)).collect();
        let x = feats.sample_linear_rows(Rc::new(rows), Rc::new(pos), self.n)?;
        let out = self.mlp.forward(&x)?;
        Ok(out.reshape(&[points.len()])?)
    }

    /// Densities for `ny` vertical nodes under each `(x, z)` column, laid
    /// out column-major `[cols, ny]`.
    pub fn decode_columns(&self, plane: &Var, cols: &[[f32; 2]], ny: usize) -> Result<Var> {
        let tape = plane.tape();
        let uv: Vec<f32> = cols.iter().flatten().copied().collect();
        let uv = tape.constant(Tensor::new(&[cols.len(), 2], uv)?);
        let feats = plane.sample_bicubic_2d(&uv)?;
        let per_y: Vec<Vec<f32>> = (0..ny).map(|j| window_positions(node(j, ny), self.n)).collect();
        let mut rows = Vec::with_capacity(cols.len() * ny);
        let mut pos = Vec::with_capacity(cols.len() * ny * self.n);
        for c in 0..cols.len() as u32 {
            for w in &per_y {
                rows.push(c);
                pos.extend_from_slice(w);
            }
        }
        let x = feats.sample_linear_rows(Rc::new(rows), Rc::new(pos), self.n)?;
        let out = self.mlp.forward(&x)?;
        Ok(out.reshape(&[cols.len() * ny])?)
    }

    /// Differentiable proxy grid `[nx, ny, nz]`.
    pub fn decode_grid(&self, theta: &Var, extents: [usize; 3]) -> Result<Var> {
        let plane = self.upsample(theta)?;
        let [nx, ny, nz] = extents;
        let cols: Vec<[f32; 2]> = (0..nx)
            .flat_map(|i| (0..nz).map(move |k| [node(i, nx), node(k, nz)]))
            .collect();
        // Columns come out as (x, z, y); the grid layout is (x, y, z).
        let flat = self.decode_columns(&plane, &cols, ny)?;
        permute_xzy_to_xyz(&flat, extents)
    }

    /// Leaves in the same order as [`DecoderParams::tensors_mut`].
    pub fn leaves(&self) -> Vec<&Var> {
        let mut v = vec![&self.up1, &self.up1_b, &self.up2, &self.up2_b];
        v.extend(self.mlp.leaves());
        v
    }
}

fn permute_xzy_to_xyz(flat: &Var, extents: [usize; 3]) -> Result<Var> {
    let [nx, ny, nz] = extents;
    let src = flat.data();
    let mut out = vec![0.0f32; nx * ny * nz];
    for i in 0..nx {
        for k in 0..nz {
            for j in 0..ny {
                out[(i * ny + j) * nz + k] = src[(i * nz + k) * ny + j];
            }
        }
    }
    Ok(flat.tape().record(&[flat], Tensor::new(&extents, out)?, move |g| {
        let mut d = vec![0.0f32; nx * ny * nz];
        for i in 0..nx {
            for k in 0..nz {
                for j in 0..ny {
                    d[(i * nz + k) * ny + j] = g.data()[(i * ny + j) * nz + k];
                }
            }
        }
        vec![Some(Tensor::new(&[nx * ny * nz], d).unwrap())]
    })?)
}
