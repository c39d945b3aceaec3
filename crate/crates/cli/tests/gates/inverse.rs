//! Posterior-sampling gates on the desk prior.

use std::time::Instant;

use nimbus::diffusion::*;
use nimbus::metrics;
use nimbus::posterior::*;
use nimbus::render::*;
use nimbus::DenseGrid3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Context, Report};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rmse(a: &[f32], b: &[f32]) -> f64 {
    metrics::rmse(a, b).unwrap()
}

pub fn dps(ctx: &mut Context, r: &mut Report) {
    let (desk, model) = ctx.prior();
    let pr = Prior::new(model, &desk.decoder).unwrap();
    let y = pr.to_standard(&desk.latents[2]);
    let meas = Measurement::identity(y.clone()).unwrap();

    let mut same = true;
    for eta in [0.0, 1.0] {
        let cfg = DpsConfig {
            zeta: 0.0,
            ddim: DdimConfig {
                eta,
                ..Default::default()
            },
            ..Default::default()
        };
        let guided = dps_sample(&pr, &meas, &cfg, &mut rng(5), None).unwrap();
        let plain = ddim_sample(model, &model.schedule, &cfg.ddim, &model.latent_shape, &mut rng(5), None).unwrap();
        same &= guided.z == plain;
    }
    r.check("zero guidance is unconditional", same, "bitwise at η = 0 and 1");

    let latent = DpsConfig {
        scale: 3.0,
        ..Default::default()
    };
    let res = dps_sample(&pr, &meas, &latent, &mut rng(8), None).unwrap();
    let e = rmse(res.z.data(), y.data());
    r.check("identity recovery", e < 0.1, format!("latent RMSE {e:.4}"));

    let cfg = DpsConfig::default();
    let pts = coarse_jittered_points([8, 4, 8], 11);
    let sr = superresolve(&pr, &coarse_sample(&desk.held, &pts), &pts, &cfg, &mut rng(12)).unwrap();
    r.check("super-resolution", sr.consistency < 0.05, format!("coarse RMSE {:.4} on {} points", sr.consistency, pts.len()));

    let mask = DenseGrid3::from_fn(desk.cfg.grid_extents, |c| if c[0] < 0.0 { 1.0 } else { 0.0 });
    // One diffuse-denoise round pulls the held-out cloud closer to its visible half.
    let restart = DpsConfig {
        restarts: 1,
        ..cfg.clone()
    };
    let inp = inpaint(&pr, &desk.held, &mask, &restart, &mut rng(20)).unwrap();
    let e = masked_rmse(&inp.grid, &desk.held, &mask).unwrap();
    r.check("inpainting", e < 0.05, format!("visible-half RMSE {e:.4}"));

    let cam = Camera::orbit(30.0, 20.0, 3.2, 40.0, 32, 32);
    let yt = transmittance_image(&desk.held, 8.0, &cam, 96).unwrap();
    let tr = reconstruct_from_transmittance(&pr, &yt, &cam, 8.0, 96, &cfg, &mut rng(30)).unwrap();
    r.check("transmittance", tr.consistency < 0.05, format!("image RMSE {:.4}", tr.consistency));
}

pub const TRUE_BACKGROUND: f32 = 0.5;

fn eval_render(grid: &DenseGrid3, phi: &RenderParams, camera: &Camera, seed: u64) -> Image {
    let cfg = RenderConfig {
        spp: 256,
        seed,
        ..Default::default()
    };
    render(grid, phi, camera, &cfg).unwrap()
}

fn orbit(az: f32) -> Camera {
    Camera::orbit(az, 15.0, 3.2, 40.0, 24, 24)
}

pub fn pdps_config() -> PdpsConfig {
    PdpsConfig {
        phi_steps: 10,
        phi_lr: 0.05,
        free: PhiFree {
            background: true,
            ..Default::default()
        },
        dps: DpsConfig {
            ddim: DdimConfig {
                steps: 50,
                stride: 20,
                eta: 1.0,
            },
            ..Default::default()
        },
        refine_steps: 20,
        render: RenderConfig {
            spp: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn pdps(ctx: &mut Context, r: &mut Report) {
    let (desk, model) = ctx.prior();
    let pr = Prior::new(model, &desk.decoder).unwrap();
    let mut truth = RenderParams {
        background: Some(Background::Uniform([TRUE_BACKGROUND; 3])),
        ..Default::default()
    };
    let azimuths = [20.0, 140.0, 260.0];
    let views: Vec<View> = azimuths
        .iter()
        .enumerate()
        .map(|(i, &az)| {
            let camera = orbit(az);
            let image = eval_render(&desk.held, &truth, &camera, 900 + i as u64);
            View { camera, image }
        })
        .collect();
    let novel: Vec<(Camera, Image)> = [80.0, 200.0]
        .iter()
        .enumerate()
        .map(|(i, &az)| {
            let c = orbit(az);
            let img = eval_render(&desk.held, &truth, &c, 950 + i as u64);
            (c, img)
        })
        .collect();
    let cfg = pdps_config();
    let phi0 = {
        truth.background = Some(Background::Uniform([0.3; 3]));
        truth
    };

    let mut novel_rmse = Vec::new();
    for n in [1usize, 3] {
        let t0 = Instant::now();
        let res = pdps_reconstruct(&pr, &views[..n], &phi0, None, &cfg, 17).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let tag = format!("{n}-view");
        r.check(&format!("{tag} not aborted"), res.aborted.is_none(), format!("{:?}", res.aborted));
        let c = &res.counters;
        r.check(
            &format!("{tag} schedule"),
            c.phi_optimizations == cfg.passes && c.posterior_draws == cfg.passes && c.refined == cfg.refine_set(),
            format!("{} φ-opts, {} draws, refined {:?}", c.phi_optimizations, c.posterior_draws, c.refined),
        );
        let bg = res.log.last().unwrap().background.unwrap();
        let rel = (bg - TRUE_BACKGROUND).abs() / TRUE_BACKGROUND;
        r.check(&format!("{tag} background"), rel < 0.1, format!("{bg:.3} vs {TRUE_BACKGROUND}"));
        if n == 1 {
            let img = eval_render(&res.grid, &res.phi, &views[0].camera, 1900);
            let e = rmse(&img.data, &views[0].image.data);
            r.check("1-view re-render", e < 0.05, format!("RMSE {e:.4}"));
        }
        let e = novel
            .iter()
            .enumerate()
            .map(|(i, (c, img))| rmse(&eval_render(&res.grid, &res.phi, c, 1950 + i as u64).data, &img.data).powi(2))
            .sum::<f64>()
            / novel.len() as f64;
        novel_rmse.push(e.sqrt());
        r.check(&format!("{tag} time"), secs <= 1800.0, format!("{secs:.0}s"));
    }
    r.check(
        "novel views improve with 3 views",
        novel_rmse[1] < novel_rmse[0],
        format!("{:.4} (3 views) vs {:.4} (1 view)", novel_rmse[1], novel_rmse[0]),
    );
}
