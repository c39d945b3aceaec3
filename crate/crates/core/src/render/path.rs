//! Stochastic path tracing with next-event estimation and path-replay
//! differentiation.
//!
//! Free flights use delta tracking against the fixed majorant
//! `μ = s · max ρ`. Each real collision scatters with weight `albedo`
//! (tracked as `albedo^k` so its derivative stays exact at zero), connects
//! to the environment along an HG-sampled direction with quadrature
//! transmittance, and continues along an independent HG sample. Only camera
//! rays collect background radiance on escape; scattered radiance arrives
//! through the next-event connections alone.
//!
//! The backward pass replays every path from its counter-based seed. With
//! all sampling densities held fixed, the derivative of a path's estimate is
//! the sum over decisions of `d ln(weight)` times the radiance collected
//! after that decision, plus the direct derivatives of each collected term.

use rayon::prelude::*;

use super::camera::{along, dot, intersect_box, Camera, Ray};
use super::medium::Medium;
use super::params::{GradAccum, RenderParams};
use super::phase::{hg_dlog_dg, hg_sample_dir};
use super::RenderConfig;
use crate::error::{NimbusError, Result};
use crate::rng;
use rand::Rng;

const PIXEL_CHUNK: usize = 16;
const RR_DEPTH: u32 = 3;

pub(crate) struct Tracer<'a> {
    pub m: Medium<'a>,
    pub phi: &'a RenderParams,
    pub camera: &'a Camera,
    pub cfg: &'a RenderConfig,
    pub nee_step: f32,
}

struct Replay<'g> {
    g: &'g mut GradAccum,
    adj: [f64; 3],
    rem: [f64; 3],
}

impl Replay<'_> {
    #[inline]
    fn weight(&self) -> f64 {
        self.adj[0] * self.rem[0] + self.adj[1] * self.rem[1] + self.adj[2] * self.rem[2]
    }

    #[inline]
    fn collect(&mut self, c: [f64; 3]) {
        for i in 0..3 {
            self.rem[i] -= c[i];
        }
    }
}

#[inline]
fn luminance(v: [f64; 3]) -> f64 {
    0.2126 * v[0] + 0.7152 * v[1] + 0.0722 * v[2]
}

impl<'a> Tracer<'a> {
    pub fn new(m: Medium<'a>, phi: &'a RenderParams, camera: &'a Camera, cfg: &'a RenderConfig) -> Self {
        let spacing = (0..3)
            .map(|a| 2.0 * m.half[a] / (m.extents[a] - 1) as f32)
            .fold(f32::INFINITY, f32::min);
        let nee_step = if cfg.nee_step > 0.0 { cfg.nee_step } else { spacing };
        Self {
            m,
            phi,
            camera,
            cfg,
            nee_step,
        }
    }

    fn trace(&self, p: usize, sample: usize, mut rp: Option<Replay>) -> [f64; 3] {
        let mut r = rng::stream(&[self.cfg.seed, p as u64, sample as u64, 0x5041_5448]);
        let (sx, sy) = if self.cfg.pixel_jitter {
            (r.random::<f32>(), r.random::<f32>())
        } else {
            (0.5, 0.5)
        };
        let cam = self.camera.ray(p % self.camera.width, p / self.camera.width, sx, sy);
        let (m, phi) = (&self.m, self.phi);
        let s = m.scale;
        let mu = m.majorant();
        let g = phi.hg_g;
        let albedo = phi.albedo.map(|a| a as f64);
        let mut o = cam.origin;
        let mut d = cam.dir;
        let mut beta = 1.0f64;
        let mut ak = [1.0f64; 3];
        let mut k = 0u32;
        let mut radiance = [0.0f64; 3];
        loop {
            let hit = intersect_box(&Ray { origin: o, dir: d }, m.half).and_then(|(t0, t1)| {
                if mu <= 0.0 {
                    return None;
                }
                let mut t = t0;
                loop {
                    t -= (1.0 - r.random::<f32>()).ln() / mu;
                    if t >= t1 {
                        return None;
                    }
                    let x = along(o, d, t);
                    let rho = m.density(x);
                    let sigma = s * rho;
                    if r.random::<f32>() * mu < sigma {
                        return Some((x, rho));
                    }
                    if let Some(rp) = rp.as_mut() {
                        let w = rp.weight();
                        if w != 0.0 {
                            let inv = 1.0 / (mu - sigma) as f64;
                            m.deposit_point(x, -w * s as f64 * inv, &mut rp.g.grid);
                            rp.g.density_scale -= w * rho as f64 * inv;
                        }
                    }
                }
            });
            let Some((x, rho)) = hit else {
                if k == 0 {
                    let b = phi.escape_radiance(p, d);
                    let c = [0, 1, 2].map(|i| beta * b[i] as f64);
                    for i in 0..3 {
                        radiance[i] += c[i];
                    }
                    if let Some(rp) = rp.as_mut() {
                        let adj = rp.adj.map(|a| a * beta);
                        rp.g.deposit_escape(phi, p, d, adj);
                        rp.collect(c);
                    }
                }
                break;
            };
            k += 1;
            let prev_ak = ak;
            for i in 0..3 {
                ak[i] *= albedo[i];
            }
            if let Some(rp) = rp.as_mut() {
                let w = rp.weight();
                if w != 0.0 {
                    m.deposit_point(x, w / rho as f64, &mut rp.g.grid);
                    rp.g.density_scale += w / s as f64;
                }
            }

            let wl = hg_sample_dir(d, g, r.random(), r.random());
            let exit = intersect_box(&Ray { origin: x, dir: wl }, m.half).map_or(0.0, |(_, t1)| t1);
            let steps = ((exit / self.nee_step).ceil() as usize).max(2);
            let col = m.column(x, wl, 0.0, exit, steps);
            let tr = (-(s as f64) * col).exp();
            let le = phi.environment.lookup(wl);
            let base = beta * tr;
            let c = [0, 1, 2].map(|i| ak[i] * base * le[i] as f64);
            for i in 0..3 {
                radiance[i] += c[i];
            }
            if let Some(rp) = rp.as_mut() {
                let wc = rp.adj[0] * c[0] + rp.adj[1] * c[1] + rp.adj[2] * c[2];
                for i in 0..3 {
                    rp.g.albedo[i] += rp.adj[i] * k as f64 * prev_ak[i] * base * le[i] as f64;
                }
                if wc != 0.0 {
                    m.deposit_column(x, wl, 0.0, exit, steps, -wc * s as f64, &mut rp.g.grid);
                    rp.g.density_scale -= wc * col;
                    rp.g.hg_g += wc * hg_dlog_dg(dot(d, wl), g) as f64;
                }
                let adj_env = [0, 1, 2].map(|i| rp.adj[i] * ak[i] * base);
                rp.g.deposit_env(phi, wl, adj_env);
                rp.collect(c);
            }

            if k as usize >= self.cfg.max_bounces {
                break;
            }
            let lum = luminance([0, 1, 2].map(|i| ak[i] * beta));
            if lum <= 0.0 {
                break;
            }
            if k >= RR_DEPTH {
                let q = lum.clamp(0.05, 0.95);
                if r.random::<f64>() >= q {
                    break;
                }
                beta /= q;
            }
            let nd = hg_sample_dir(d, g, r.random(), r.random());
            if let Some(rp) = rp.as_mut() {
                let w = rp.weight();
                if w != 0.0 {
                    rp.g.hg_g += w * hg_dlog_dg(dot(d, nd), g) as f64;
                }
            }
            o = x;
            d = nd;
        }
        radiance
    }

    pub fn render(&self) -> Result<Vec<f32>> {
        let spp = self.cfg.spp;
        let px: Vec<Result<[f32; 3]>> = (0..self.camera.pixel_count())
            .into_par_iter()
            .map(|p| {
                let mut acc = [0.0f64; 3];
                for j in 0..spp {
                    let l = self.trace(p, j, None);
                    if l.iter().any(|v| !v.is_finite()) {
                        return Err(NimbusError::Numerical(format!(
                            "non-finite radiance {l:?} at pixel {p} sample {j}"
                        )));
                    }
                    for c in 0..3 {
                        acc[c] += l[c];
                    }
                }
                Ok(acc.map(|v| (v / spp as f64) as f32))
            })
            .collect();
        let mut out = Vec::with_capacity(px.len() * 3);
        for v in px {
            out.extend_from_slice(&v?);
        }
        Ok(out)
    }

    pub fn backward(&self, adj: &[f32]) -> GradAccum {
        let spp = self.cfg.spp;
        let n = self.m.data.len();
        let pixels: Vec<usize> = (0..self.camera.pixel_count()).collect();
        let parts: Vec<GradAccum> = pixels
            .par_chunks(PIXEL_CHUNK)
            .map(|chunk| {
                let mut g = GradAccum::new(n, self.phi);
                for &p in chunk {
                    let a = [0, 1, 2].map(|c| adj[3 * p + c] as f64 / spp as f64);
                    if a.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for j in 0..spp {
                        let total = self.trace(p, j, None);
                        self.trace(
                            p,
                            j,
                            Some(Replay {
                                g: &mut g,
                                adj: a,
                                rem: total,
                            }),
                        );
                    }
                }
                g
            })
            .collect();
        let mut total = GradAccum::new(n, self.phi);
        for part in &parts {
            total.merge(part);
        }
        total
    }
}
