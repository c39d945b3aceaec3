//! Parameter-matched triplanar and dense-grid representations for the
//! representation comparison table.

use std::rc::Rc;

use ndtape::{Adam, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderParams, MonoplanarConfig};
use super::fit::{fit_shared_decoder, uniform_points, FitConfig};
use crate::error::{NimbusError, Result};
use crate::metrics::{self, MetricRow};
use crate::nn::{Mlp, MlpVars};
use crate::rng;
use crate::volume::DenseGrid3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    Monoplanar,
    Triplanar,
    DenseGrid,
    /// Raw densities at the full grid resolution, no decoder.
    DirectGrid,
}

impl RepresentationKind {
    pub fn name(self) -> &'static str {
        match self {
            RepresentationKind::Monoplanar => "monoplanar",
            RepresentationKind::Triplanar => "triplanar",
            RepresentationKind::DenseGrid => "dense_grid",
            RepresentationKind::DirectGrid => "direct_grid",
        }
    }
}

/// Shapes of the per-volume latent tensors of each representation, sized to
/// the monoplanar latent budget `C0 · H0 · W0`.
pub fn latent_shapes(kind: RepresentationKind, cfg: &MonoplanarConfig) -> Vec<Vec<usize>> {
    let s = cfg.latent_size;
    let budget = cfg.latent_len();
    match kind {
        RepresentationKind::Monoplanar => vec![vec![cfg.latent_channels, s, s]],
        RepresentationKind::Triplanar => {
            // xz plane s×s plus xy and zy planes s×(s/2): 2 s² texels per channel.
            let c = (budget / (2 * s * s)).max(1);
            vec![vec![c, s, s], vec![c, s, s / 2], vec![c, s, s / 2]]
        }
        RepresentationKind::DenseGrid => {
            let e = cfg.grid_extents;
            let (gx, gy, gz) = (e[0] / 4, e[1] / 4, e[2] / 4);
            let c = (budget / (gx * gy * gz)).max(1);
            (0..c).map(|_| vec![gx, gy, gz]).collect()
        }
        RepresentationKind::DirectGrid => vec![cfg.grid_extents.to_vec()],
    }
}

pub fn latent_param_count(kind: RepresentationKind, cfg: &MonoplanarConfig) -> usize {
    latent_shapes(kind, cfg).iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Fitted triplanar, dense-grid or direct-grid model for a set of volumes.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub kind: RepresentationKind,
    pub latents: Vec<Vec<Tensor>>,
    pub mlp: Option<Mlp>,
}

fn features(kind: RepresentationKind, lat: &[Var], pts: &[[f32; 3]]) -> Result<Var> {
    let tape = lat[0].tape();
    let p = pts.len();
    let cols: Vec<Var> = match kind {
        RepresentationKind::Triplanar => {
            let coords = |f: fn(&[f32; 3]) -> [f32; 2]| -> Result<Var> {
                let uv: Vec<f32> = pts.iter().flat_map(f).collect();
                Ok(tape.constant(Tensor::new(&[p, 2], uv)?))
            };
            let uv = [
                coords(|q| [q[0], q[2]])?,
                coords(|q| [q[0], q[1]])?,
                coords(|q| [q[2], q[1]])?,
            ];
            lat.iter()
                .zip(&uv)
                .map(|(pl, uv)| pl.sample_bicubic_2d(uv).map_err(Into::into))
                .collect::<Result<_>>()?
        }
        _ => {
            let pts = Rc::new(pts.to_vec());
            lat.iter()
                .map(|g| -> Result<Var> { Ok(g.sample_trilinear_3d(pts.clone())?.reshape(&[p, 1])?) })
                .collect::<Result<_>>()?
        }
    };
    let mut f = cols[0].clone();
    for c in &cols[1..] {
        let (a, b) = (f.shape()[1], c.shape()[1]);
        f = f
            .reshape(&[p, a, 1, 1])?
            .concat_channels(&c.reshape(&[p, b, 1, 1])?)?
            .reshape(&[p, a + b])?;
    }
    Ok(f)
}

fn predict(kind: RepresentationKind, lat: &[Var], mlp: Option<&MlpVars>, pts: &[[f32; 3]]) -> Result<Var> {
    if kind == RepresentationKind::DirectGrid {
        return Ok(lat[0].sample_trilinear_3d(Rc::new(pts.to_vec()))?);
    }
    let f = features(kind, lat, pts)?;
    let mlp = mlp.expect("decoded representations carry an MLP");
    Ok(mlp.forward(&f)?.reshape(&[pts.len()])?)
}

impl BaselineModel {
    pub fn decode_points(&self, vol: usize, pts: &[[f32; 3]]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(pts.len());
        for chunk in pts.chunks(16 * 1024) {
            let tape = Tape::new();
            let lat: Vec<Var> = self.latents[vol].iter().map(|t| tape.constant(t.clone())).collect();
            let mv = self.mlp.as_ref().map(|m| m.on_tape(&tape, false));
            out.extend_from_slice(predict(self.kind, &lat, mv.as_ref(), chunk)?.data());
        }
        Ok(out)
    }

    pub fn decode_grid(&self, vol: usize, extents: [usize; 3]) -> Result<DenseGrid3> {
        let mut pts = Vec::with_capacity(extents.iter().product());
        for i in 0..extents[0] {
            for j in 0..extents[1] {
                for k in 0..extents[2] {
                    pts.push(DenseGrid3::node_coord_of(extents, [i, j, k]));
                }
            }
        }
        DenseGrid3::new(extents, self.decode_points(vol, &pts)?)
    }
}

/// Fits a triplanar, dense-grid or direct-grid representation of `volumes`
/// (shared MLP where applicable) with the same sampling schedule as the
/// monoplanar fit.
pub fn fit_baseline(
    kind: RepresentationKind,
    volumes: &[DenseGrid3],
    cfg: &MonoplanarConfig,
    fit: &FitConfig,
) -> Result<BaselineModel> {
    if kind == RepresentationKind::Monoplanar {
        return Err(NimbusError::Contract("use fit_shared_decoder for the monoplanar codec".into()));
    }
    if volumes.is_empty() {
        return Err(NimbusError::Contract("fit needs at least one volume".into()));
    }
    let shapes = latent_shapes(kind, cfg);
    let mut r = rng::stream(&[fit.seed, 0x4241_5345, kind as u64]);
    let normal = Normal::new(0.0f32, 0.1).unwrap();
    let mut latents: Vec<Vec<Tensor>> = volumes
        .iter()
        .map(|_| {
            shapes
                .iter()
                .map(|s| {
                    if kind == RepresentationKind::DirectGrid {
                        Tensor::zeros(s)
                    } else {
                        Tensor::from_fn(s, |_| normal.sample(&mut r))
                    }
                })
                .collect()
        })
        .collect();
    let mut mlp = (kind != RepresentationKind::DirectGrid).then(|| {
        let mut sizes = vec![shapes.iter().map(|s| if kind == RepresentationKind::Triplanar { s[0] } else { 1 }).sum()];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers));
        sizes.push(1);
        Mlp::new(&sizes, true, -3.0, &mut r)
    });
    let mut mlp_opt = Adam::new(fit.lr_decoder);
    let mut lat_opt: Vec<Adam> = volumes.iter().map(|_| Adam::new(fit.lr_latent)).collect();
    for step in 0..fit.steps {
        let tape = Tape::new();
        let mv = mlp.as_ref().map(|m| m.on_tape(&tape, true));
        let lat_vars: Vec<Vec<Var>> = latents
            .iter()
            .map(|ls| ls.iter().map(|t| tape.param(t.clone())).collect())
            .collect();
        let mut total: Option<Var> = None;
        for (vi, (v, lv)) in volumes.iter().zip(&lat_vars).enumerate() {
            let pts = uniform_points(fit.batch, &[fit.seed, step as u64, vi as u64, 0x5452]);
            let target = Tensor::new(&[pts.len()], pts.iter().map(|&p| v.sample(p)).collect())?;
            let l = predict(kind, lv, mv.as_ref(), &pts)?.mse(&target)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l)?,
            });
        }
        let loss = total.unwrap().scale(1.0 / volumes.len() as f32)?;
        if !loss.item().is_finite() {
            return Err(NimbusError::Numerical(format!(
                "{} fit diverged at step {step}",
                kind.name()
            )));
        }
        let g = tape.backward(&loss)?;
        let t = step as f32 / fit.steps.max(1) as f32;
        let s = fit.lr_floor + (1.0 - fit.lr_floor) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
        if let (Some(m), Some(mv)) = (mlp.as_mut(), mv.as_ref()) {
            let grads: Vec<Tensor> = mv.leaves().map(|v| g.wrt(v)).collect();
            mlp_opt.lr = fit.lr_decoder * s;
            mlp_opt.step(&mut m.tensors_mut(), &grads)?;
        }
        for ((ls, lv), opt) in latents.iter_mut().zip(&lat_vars).zip(&mut lat_opt) {
            let grads: Vec<Tensor> = lv.iter().map(|v| g.wrt(v)).collect();
            opt.lr = fit.lr_latent * s;
            opt.step(&mut ls.iter_mut().collect::<Vec<_>>(), &grads)?;
        }
    }
    Ok(BaselineModel { kind, latents, mlp })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub representation: String,
    pub latent_params: usize,
    pub decoder_params: usize,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

fn mean_rows(rows: &[MetricRow]) -> MetricRow {
    let n = rows.len() as f64;
    MetricRow {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    }
}

/// Fits the monoplanar codec and the triplanar and dense-grid baselines on
/// the same volumes and reports metrics averaged over volumes. The three
/// latent budgets must agree within 5%.
pub fn benchmark_representations(
    volumes: &[DenseGrid3],
    cfg: &MonoplanarConfig,
    fit: &FitConfig,
) -> Result<Vec<BenchmarkRow>> {
    let mono = latent_param_count(RepresentationKind::Monoplanar, cfg);
    for kind in [RepresentationKind::Triplanar, RepresentationKind::DenseGrid] {
        let n = latent_param_count(kind, cfg);
        if (n as f64 - mono as f64).abs() > 0.05 * mono as f64 {
            return Err(NimbusError::Config(format!(
                "{} budget {n} is not within 5% of monoplanar {mono}",
                kind.name()
            )));
        }
    }
    let mut rows = Vec::new();
    let m = fit_shared_decoder(volumes, cfg, fit)?;
    let metrics_of = |grids: Vec<DenseGrid3>| -> Result<MetricRow> {
        let r: Vec<MetricRow> = grids
            .iter()
            .zip(volumes)
            .map(|(g, v)| metrics::compare(g, v))
            .collect::<Result<_>>()?;
        Ok(mean_rows(&r))
    };
    let grids = m
        .latents
        .iter()
        .map(|l| m.decoder.decode_grid(l, cfg.grid_extents))
        .collect::<Result<Vec<_>>>()?;
    rows.push(BenchmarkRow {
        representation: "monoplanar".into(),
        latent_params: mono,
        decoder_params: m.decoder.param_count(),
        metrics: metrics_of(grids)?,
    });
    for kind in [RepresentationKind::Triplanar, RepresentationKind::DenseGrid] {
        let b = fit_baseline(kind, volumes, cfg, fit)?;
        let grids = (0..volumes.len())
            .map(|i| b.decode_grid(i, cfg.grid_extents))
            .collect::<Result<Vec<_>>>()?;
        rows.push(BenchmarkRow {
            representation: kind.name().into(),
            latent_params: latent_param_count(kind, cfg),
            decoder_params: b.mlp.as_ref().map_or(0, |m| m.param_count()),
            metrics: metrics_of(grids)?,
        });
    }
    Ok(rows)
}

/// Table-shaped CSV: one row per representation.
pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from("representation,latent_params,decoder_params,psnr_db,rmse,mae,ssim_center_slice\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{:.6},{:.6},{:.4}\n",
            r.representation, r.latent_params, r.decoder_params, r.metrics.psnr, r.metrics.rmse, r.metrics.mae, r.metrics.ssim
        ));
    }
    s
}

/// Decoder-independent parameter accounting for the monoplanar codec.
pub fn compression_report(d: &DecoderParams) -> (usize, usize, f64) {
    let c = &d.config;
    (c.latent_len(), c.voxel_count(), c.compression_ratio())
}
