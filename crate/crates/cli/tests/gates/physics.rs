//! Renderer gradient and physics gates.

use std::f64::consts::PI;
use std::time::Instant;

use nimbus::render::*;
use nimbus::DenseGrid3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Context, Report};

fn richardson(h: f32, f: impl Fn(f32) -> f64) -> f64 {
    let d = |h: f32| (f(h) - f(-h)) / (2.0 * h as f64);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

fn weighted(img: &Image, adj: &Image) -> f64 {
    img.data.iter().zip(&adj.data).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn gradients(_: &mut Context, r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = DenseGrid3::new([8, 8, 8], (0..512).map(|_| rng.random_range(0.2..1.0)).collect()).unwrap();
    let camera = Camera::orbit(25.0, 20.0, 4.0, 30.0, 4, 4);
    let phi = RenderParams {
        density_scale: 1.3,
        albedo: [0.9, 0.6, 0.3],
        hg_g: 0.4,
        environment: EnvMap::sky([1.0, 0.9, 0.8], [0.2, 0.3, 0.6]),
        background: None,
    };
    let steps = 96;
    let adj = Image::new(4, 4, 3, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let g = render_ea_backward(&grid, &phi, &camera, steps, &adj).unwrap();
    let loss = |grid: &DenseGrid3, p: &RenderParams| weighted(&render_ea(grid, p, &camera, steps).unwrap(), &adj);
    let rel = |fd: f64, a: f64| (fd - a).abs() / fd.abs().max(a.abs());

    // Probes whose derivative is below what an f32 image resolves at this
    // step are under the noise floor and skipped.
    let h = 0.2f32;
    let base = render_ea(&grid, &phi, &camera, steps).unwrap();
    let mag: f64 = base.data.iter().zip(&adj.data).map(|(&v, &w)| (v as f64 * w as f64).abs()).sum();
    let floor = 200.0 * f32::EPSILON as f64 * mag / h as f64;
    let (mut checked, mut worst) = (0, 0.0f64);
    for i in 0..grid.len() {
        let a = g.grid[i] as f64;
        if a.abs() < floor {
            continue;
        }
        let fd = richardson(h, |d| {
            let mut q = grid.clone();
            q.data_mut()[i] += d;
            loss(&q, &phi)
        });
        worst = worst.max(rel(fd, a));
        checked += 1;
    }
    r.check("density grid", worst < 1e-3 && checked > 100, format!("{checked} voxels, worst rel {worst:.1e}"));

    let hs = 1e-2f32;
    let with_s = |s: f32| {
        let mut q = phi.clone();
        q.density_scale = s;
        loss(&grid, &q)
    };
    let fd = (with_s(1.3 + hs) - with_s(1.3 - hs)) / (2.0 * hs as f64);
    let e = rel(fd, g.density_scale as f64);
    r.check("density scale", e < 1e-3, format!("rel {e:.1e}"));

    let mut worst = 0.0f64;
    for t in 0..phi.environment.texels.len() {
        let mut up = phi.clone();
        up.environment.texels[t] += 0.1;
        let mut dn = phi.clone();
        dn.environment.texels[t] -= 0.1;
        let fd = (loss(&grid, &up) - loss(&grid, &dn)) / 0.2;
        let a = g.environment[t] as f64;
        worst = worst.max((fd - a).abs() / a.abs().max(1e-3));
    }
    r.check("environment texels", worst < 1e-3, format!("{} texels, worst rel {worst:.1e}", phi.environment.texels.len()));
    let secs = t0.elapsed().as_secs_f64();
    r.check("runtime", secs < 60.0, format!("{secs:.1}s"));
}

pub fn physics(_: &mut Context, r: &mut Report) {
    let slab = DenseGrid3::filled([8, 8, 8], 1.0);
    let (a, b) = ([-1.0, 0.2, 0.0], [1.0, 0.2, 0.0]);
    let mut worst = 0.0f64;
    for s in [0.25f32, 0.8, 2.0] {
        let t = transmittance_quadrature(&slab, s, a, b, 256).unwrap() as f64;
        worst = worst.max((t - (-2.0 * s as f64).exp()).abs());
    }
    r.check("slab quadrature", worst < 1e-4, format!("max |T - e^-σd| {worst:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, n) = (0.8f32, 100_000);
    let want = (-(s as f64) * 2.0).exp();
    let samples: Vec<f64> = (0..n)
        .map(|_| transmittance_ratio_tracking(&slab, s, a, b, &mut rng).unwrap() as f64)
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let z = (mean - want).abs() / se;
    r.check("ratio tracking", z < 3.0, format!("{mean:.5} vs {want:.5}, {z:.2} SE"));

    let mut worst = 0.0f64;
    for g in [-0.5f32, 0.0, 0.6, 0.9] {
        let m = 20_000;
        let integral: f64 = (0..m)
            .map(|i| {
                let c = -1.0 + (i as f64 + 0.5) * 2.0 / m as f64;
                hg_phase(c as f32, g).unwrap() as f64
            })
            .sum::<f64>()
            * 2.0
            / m as f64
            * 2.0
            * PI;
        worst = worst.max((integral - 1.0).abs());
    }
    r.check("HG normalization", worst < 1e-2, format!("max |∫p - 1| {worst:.1e}"));

    let camera = Camera::orbit(20.0, 10.0, 4.0, 35.0, 6, 4);
    let mut phi = RenderParams {
        background: Some(Background::Uniform([0.25, 0.5, 0.75])),
        ..Default::default()
    };
    let empty = DenseGrid3::filled([8, 8, 8], 0.0);
    let path = render(&empty, &phi, &camera, &RenderConfig::default()).unwrap();
    let ea = render(&empty, &phi, &camera, &RenderConfig::ea(64)).unwrap();
    let exact_bg = path.data.chunks(3).chain(ea.data.chunks(3)).all(|c| c == [0.25, 0.5, 0.75]);
    phi.background = None;
    let cfg = RenderConfig {
        pixel_jitter: false,
        spp: 3,
        ..Default::default()
    };
    let sky = render(&empty, &phi, &camera, &cfg).unwrap();
    let mut exact_env = true;
    for y in 0..4 {
        for x in 0..6 {
            exact_env &= sky.pixel(x, y) == phi.environment.lookup(camera.center_ray(x, y).dir);
        }
    }
    r.check("zero density shows background", exact_bg && exact_env, format!("uniform {exact_bg}, environment {exact_env}"));
}
