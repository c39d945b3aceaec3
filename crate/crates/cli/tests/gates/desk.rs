//! Desk-scale codec and diffusion gates, plus the shared state later gates reuse.

use std::path::PathBuf;
use std::time::Instant;

use nimbus::cloudgen::{build_dataset, Dihedral};
use nimbus::diffusion::*;
use nimbus::metrics;
use nimbus::monoplanar::*;
use nimbus::DenseGrid3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Report;

pub const FIT_STEPS: usize = 1500;
pub const PRIOR_STEPS: usize = 3000;

pub fn denoiser() -> DenoiserConfig {
    DenoiserConfig {
        channels: 8,
        base_channels: 32,
        time_dim: 64,
    }
}

pub struct Desk {
    pub cfg: MonoplanarConfig,
    pub vols: Vec<DenseGrid3>,
    /// A cloud from the same generator that no fit has seen.
    pub held: DenseGrid3,
    pub decoder: DecoderParams,
    pub latents: Vec<LatentCode>,
}

/// State shared between gates. Setting `NIMBUS_ACCEPTANCE_CACHE` to a
/// directory keeps the fitted codec and prior between runs.
pub struct Context {
    pub work: tempfile::TempDir,
    cache: Option<PathBuf>,
    desk: Option<Desk>,
    prior: Option<DiffusionModel>,
}

impl Default for Context {
    fn default() -> Self {
        let cache = std::env::var_os("NIMBUS_ACCEPTANCE_CACHE").map(PathBuf::from);
        if let Some(c) = &cache {
            std::fs::create_dir_all(c).unwrap();
        }
        Self {
            work: tempfile::tempdir().unwrap(),
            cache,
            desk: None,
            prior: None,
        }
    }
}

impl Context {
    fn cached(&self, name: &str) -> Option<PathBuf> {
        self.cache.as_ref().map(|c| c.join(name)).filter(|p| p.exists())
    }

    pub fn desk(&mut self) -> &Desk {
        if self.desk.is_none() {
            let cfg = MonoplanarConfig::default();
            let ds = build_dataset(0, 5, 1, false, 1);
            let vols: Vec<DenseGrid3> = ds.train.iter().map(|d| d.materialize(cfg.grid_extents).unwrap()).collect();
            let held = ds.held_out[0].materialize(cfg.grid_extents).unwrap();
            let (decoder, latents) = match self.cached("decoder.ckpt") {
                Some(p) => {
                    let lats = (0..vols.len())
                        .map(|i| LatentCode::load(&p.with_file_name(format!("latent_{i}.lat"))).unwrap())
                        .collect();
                    (DecoderParams::load(&p).unwrap(), lats)
                }
                None => {
                    let fit = fit_shared_decoder(&vols, &cfg, &desk_fit()).unwrap();
                    if let Some(c) = &self.cache {
                        fit.decoder.save(&c.join("decoder.ckpt")).unwrap();
                        for (i, l) in fit.latents.iter().enumerate() {
                            std::fs::write(c.join(format!("latent_{i}.lat")), l.to_bytes()).unwrap();
                        }
                    }
                    (fit.decoder, fit.latents)
                }
            };
            self.desk = Some(Desk {
                cfg,
                vols,
                held,
                decoder,
                latents,
            });
        }
        self.desk.as_ref().unwrap()
    }

    /// Denoiser trained on the dihedral copies of the desk latents.
    pub fn prior(&mut self) -> (&Desk, &DiffusionModel) {
        self.desk();
        if self.prior.is_none() {
            let model = match self.cached("prior.ckpt") {
                Some(p) => DiffusionModel::load(&p).unwrap(),
                None => {
                    let data = dihedral_augment(&self.desk.as_ref().unwrap().latents).unwrap();
                    let train = TrainConfig {
                        steps: PRIOR_STEPS,
                        batch: 8,
                        log_every: 250,
                        checkpoint_every: 0,
                        ..Default::default()
                    };
                    let path = self.cache.as_ref().map(|c| c.join("prior.ckpt"));
                    train_denoiser(&data, &NoiseSchedule::linear(), &denoiser(), &train, path.as_deref())
                        .unwrap()
                        .model
                }
            };
            self.prior = Some(model);
        }
        (self.desk.as_ref().unwrap(), self.prior.as_ref().unwrap())
    }
}

pub fn desk_fit() -> FitConfig {
    FitConfig {
        steps: FIT_STEPS,
        log_every: 1000,
        ..Default::default()
    }
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

pub fn codec(ctx: &mut Context, r: &mut Report) {
    let cfg = MonoplanarConfig::default();
    let d = DecoderParams::init(&cfg, 11).unwrap();
    let theta = cfg.random_latent(12, 0.7);
    let base = d.decode_grid(&theta, cfg.grid_extents).unwrap();
    let worst = Dihedral::all()
        .iter()
        .map(|&op| {
            let lhs = d.decode_grid(&theta.apply_dihedral(op).unwrap(), cfg.grid_extents).unwrap();
            max_abs(lhs.data(), op.apply_grid(&base).unwrap().data())
        })
        .fold(0.0f32, f32::max);
    r.check("dihedral equivariance", worst < 1e-5, format!("8 ops, max abs {worst:.1e}"));

    let mut exact = true;
    for n in [2usize, 3, 5, 16] {
        let delta = 2.0 / (n as f64 - 1.0);
        for y in [-1.0f32, -0.37, 0.0, 0.5, 1.0] {
            let raw = window_offsets(y, n);
            let clamped = window_positions(y, n);
            exact &= raw.len() == n;
            for k in 0..n {
                exact &= (raw[k] as f64 - (y as f64 - 1.0 + k as f64 * delta)).abs() < 1e-6;
                exact &= clamped[k] == raw[k].clamp(-1.0, 1.0);
            }
        }
    }
    r.check("window positions", exact, "N = 2, 3, 5, 16");

    let t0 = Instant::now();
    let desk = ctx.desk();
    let psnrs: Vec<f64> = desk
        .latents
        .iter()
        .zip(&desk.vols)
        .map(|(l, v)| metrics::psnr(desk.decoder.decode_grid(l, v.extents()).unwrap().data(), v.data()).unwrap())
        .collect();
    let low = psnrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = psnrs.iter().map(|p| format!("{p:.2}")).collect();
    r.check(
        "desk fit PSNR",
        low >= 30.0,
        format!("{} dB after {FIT_STEPS} steps ({:.0}s)", shown.join("/"), t0.elapsed().as_secs_f64()),
    );

    let (latent, voxels, ratio) = compression_report(&desk.decoder);
    r.check("compression ratio", ratio >= 15.0, format!("{voxels} voxels / {latent} latent = {ratio:.1}x"));

    let fit = FitConfig {
        steps: 300,
        log_every: 300,
        eval_points: 8192,
        ..Default::default()
    };
    let rows = benchmark_representations(&desk.vols, &desk.cfg, &fit).unwrap();
    let csv = benchmark_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let shaped = lines.len() == 4
        && lines[0].split(',').count() == 7
        && lines[1..]
            .iter()
            .zip(["monoplanar", "triplanar", "dense_grid"])
            .all(|(l, n)| l.starts_with(n) && l.split(',').count() == 7);
    let mut order: Vec<&BenchmarkRow> = rows.iter().collect();
    order.sort_by(|a, b| b.metrics.psnr.total_cmp(&a.metrics.psnr));
    let order: Vec<String> = order
        .iter()
        .map(|r| format!("{} {:.1}", r.representation, r.metrics.psnr))
        .collect();
    r.check("benchmark CSV", shaped, format!("PSNR order at 300 steps: {}", order.join(" > ")));
}

pub fn diffusion(ctx: &mut Context, r: &mut Report) {
    let s = NoiseSchedule::linear();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [8usize, 32, 32];
    let x0 = gaussian(&shape, &mut rng);
    let eps = gaussian(&shape, &mut rng);
    let mut worst = 0.0f32;
    for t in [1usize, 10, 100, 300, 500] {
        let back = s.predict_x0(&s.noise_with(&x0, t, &eps).unwrap(), t, &eps).unwrap();
        worst = worst.max(max_abs(back.data(), x0.data()));
    }
    r.check("predict_x0 round trip", worst < 1e-5, format!("max abs {worst:.1e} for t ≤ 500"));

    let oracle = OracleDenoiser {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    let mut worst = 0.0f32;
    for eta in [0.0, 1.0] {
        let cfg = DdimConfig {
            eta,
            ..Default::default()
        };
        let out = ddim_sample(&oracle, &s, &cfg, &shape, &mut rng, None).unwrap();
        worst = worst.max(max_abs(out.data(), x0.data()));
    }
    r.check("oracle DDIM", worst < 1e-4, format!("max abs {worst:.1e} at η = 0 and 1"));

    // Codec latents keep white, pixel-scale detail that a translation
    // equivariant denoiser cannot memorize at small t; smooth structured
    // planes of the same shape isolate the optimizer from that.
    let structured: Vec<LatentCode> = (0..4)
        .map(|k| {
            LatentCode::new(ndtape::Tensor::from_fn(&shape, |i| {
                let (c, y, x) = (i / 1024, (i / 32) % 32, i % 32);
                (x as f32 * 0.2 * (k + 1) as f32 + c as f32).sin() * (y as f32 * 0.15 + k as f32).cos()
            }))
            .unwrap()
        })
        .collect();
    let encoded = ctx.desk().latents.clone();
    for (name, lats) in [("overfit 4 structured latents", structured), ("overfit 4 encoded latents", encoded)] {
        let cfg = TrainConfig {
            steps: 5000,
            batch: 4,
            log_every: 250,
            checkpoint_every: 0,
            target_loss: Some(0.05),
            ..Default::default()
        };
        let t0 = Instant::now();
        let res = train_denoiser(&lats, &s, &denoiser(), &cfg, None).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let last = res.log.last().unwrap().loss;
        r.check(
            name,
            last < 0.05 && secs < 1800.0,
            format!("window loss {last:.4} at step {} ({secs:.0}s)", res.steps_run),
        );
    }
}
