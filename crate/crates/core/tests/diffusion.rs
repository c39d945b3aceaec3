mod common;

use ndtape::Tensor;
use nimbus::cloudgen::Dihedral;
use nimbus::diffusion::*;
use nimbus::monoplanar::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn plane(shape: &[usize], seed: u64, std: f32) -> Tensor {
    let mut r = rng(seed);
    gaussian(shape, &mut r).map(|v| v * std)
}

fn small_net() -> DenoiserConfig {
    DenoiserConfig {
        channels: 8,
        base_channels: 16,
        time_dim: 32,
    }
}

/// Random non-zero output layer so predictions depend on the input.
fn noisy_model(shape: [usize; 3]) -> DiffusionModel {
    let mut p = DenoiserParams::init(&small_net(), 3).unwrap();
    let mut r = rng(4);
    for (name, t) in p.tensors.iter_mut() {
        if name == "out.w" {
            *t = Tensor::from_fn(t.shape(), |_| r.random::<f32>() * 0.02 - 0.01);
        }
    }
    DiffusionModel::new(p, NoiseSchedule::linear(), Standardizer::identity(shape[0]), shape).unwrap()
}

#[test]
fn schedule_is_monotone_with_pinned_endpoints() {
    let s = NoiseSchedule::linear();
    assert_eq!(s.len(), 1000);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-12);
    assert!((s.beta(1000) - 2e-2).abs() < 1e-12);
    for t in 1..=1000 {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    assert!(s.alpha_bar(1000) < 1e-3);
    assert!(s.alpha_bar(1000) > 0.0);
    assert!(NoiseSchedule::new(ScheduleConfig {
        steps: 10,
        beta_start: 0.5,
        beta_end: 0.1
    })
    .is_err());
}

#[test]
fn noising_limits_and_correlation() {
    let s = NoiseSchedule::linear();
    let x0 = plane(&[8, 4, 4], 1, 1.0);
    let mut r = rng(2);
    let (x1, _) = s.forward_noise(&x0, 1, &mut r).unwrap();
    let d = x1.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(d < 0.05, "t=1 drift {d}");
    assert!(s.forward_noise(&x0, 0, &mut r).is_err());
    assert!(s.forward_noise(&x0, 1001, &mut r).is_err());

    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    let n = 1000;
    for _ in 0..n {
        let a: f32 = r.sample(rand_distr::StandardNormal);
        let (b, _) = s.forward_noise(&Tensor::scalar(a), 1000, &mut r).unwrap();
        let (a, b) = (a as f64, b.item() as f64);
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let nf = n as f64;
    let cov = sxy / nf - sx * sy / nf / nf;
    let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
    assert!(corr.abs() < 0.1, "corr {corr}");
}

#[test]
fn noised_variance_matches_mixture() {
    let s = NoiseSchedule::linear();
    let mut r = rng(9);
    let n = 20_000;
    for t in [1usize, 50, 250, 600, 1000] {
        let mut m = (0.0f64, 0.0f64);
        for _ in 0..n {
            let x0 = 2.0 * r.sample::<f32, _>(rand_distr::StandardNormal);
            let (xt, _) = s.forward_noise(&Tensor::scalar(x0), t, &mut r).unwrap();
            m.0 += xt.item() as f64;
            m.1 += (xt.item() as f64).powi(2);
        }
        let var = m.1 / n as f64 - (m.0 / n as f64).powi(2);
        let a = s.alpha_bar(t);
        let want = a * 4.0 + (1.0 - a);
        assert!((var / want - 1.0).abs() < 0.05, "t={t} var {var} want {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predict_x0_inverts_forward_noise(seed in 0u64..1000, t in 1usize..=1000) {
        let s = NoiseSchedule::linear();
        let x0 = plane(&[2, 4, 4], seed, 1.5);
        let eps = plane(&[2, 4, 4], seed + 7777, 1.0);
        let xt = s.noise_with(&x0, t, &eps).unwrap();
        let back = s.predict_x0(&xt, t, &eps).unwrap();
        let renoised = s.noise_with(&back, t, &eps).unwrap();
        let tol = 1e-6 * (1.0 + 1.0 / s.alpha_bar(t).sqrt()) as f32 * 4.0;
        for i in 0..x0.len() {
            prop_assert!((renoised.data()[i] - xt.data()[i]).abs() < 1e-5);
            prop_assert!((back.data()[i] - x0.data()[i]).abs() < tol.max(1e-5) || s.alpha_bar(t).sqrt() < 0.05);
        }
    }
}

#[test]
fn round_trip_is_tight_where_signal_remains() {
    let s = NoiseSchedule::linear();
    let x0 = plane(&[8, 8, 8], 5, 1.0);
    let eps = plane(&[8, 8, 8], 6, 1.0);
    for t in [1usize, 10, 100, 300, 500] {
        let back = s.predict_x0(&s.noise_with(&x0, t, &eps).unwrap(), t, &eps).unwrap();
        let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "t={t} err {err}");
    }
}

#[test]
fn zero_noise_estimate_rescales() {
    let s = NoiseSchedule::linear();
    let xt = plane(&[3, 4, 4], 8, 1.0);
    for t in [1usize, 400, 1000] {
        let x0 = s.predict_x0(&xt, t, &Tensor::zeros(xt.shape())).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (a, b) in x0.data().iter().zip(xt.data()) {
            assert!(((*a as f64) - (*b as f64) / k).abs() < 1e-6 * (1.0 + (*b as f64 / k).abs()));
        }
    }
}

#[test]
fn ddim_timesteps_and_sigma() {
    let s = NoiseSchedule::linear();
    let cfg = DdimConfig::default();
    let ts = cfg.timesteps(&s, None).unwrap();
    assert_eq!(ts.len(), 100);
    assert_eq!(ts[0], (1000, 990));
    assert_eq!(*ts.last().unwrap(), (10, 0));
    let odd = cfg.timesteps(&s, Some(455)).unwrap();
    assert_eq!(odd[0], (455, 445));
    assert_eq!(*odd.last().unwrap(), (5, 0));
    assert!(DdimConfig { steps: 101, ..cfg.clone() }.timesteps(&s, None).is_err());
    assert!(DdimConfig { eta: 1.5, ..cfg.clone() }.timesteps(&s, None).is_err());
    assert_eq!(s.ddim_sigma(500, 490, 0.0), 0.0);
    assert_eq!(s.ddim_sigma(10, 0, 1.0), 0.0);
    // η = 1 reproduces the DDPM posterior variance.
    let (a, ap) = (s.alpha_bar(500), s.alpha_bar(499));
    let ddpm = ((1.0 - ap) / (1.0 - a) * (1.0 - a / ap)).sqrt();
    assert!((s.ddim_sigma(500, 499, 1.0) - ddpm).abs() < 1e-15);
}

#[test]
fn oracle_ddim_recovers_latent() {
    let s = NoiseSchedule::linear();
    let x0 = plane(&[8, 8, 8], 11, 1.0);
    let oracle = OracleDenoiser {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    for eta in [0.0, 1.0] {
        let cfg = DdimConfig {
            eta,
            ..Default::default()
        };
        let out = ddim_sample(&oracle, &s, &cfg, &[8, 8, 8], &mut rng(12), None).unwrap();
        let err = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "eta {eta} err {err}");
    }
}

#[test]
fn restart_from_noised_level_returns_latent() {
    let s = NoiseSchedule::linear();
    let x0 = plane(&[8, 8, 8], 13, 1.0);
    let oracle = OracleDenoiser {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    for k in [600usize, 455, 30] {
        let (xk, _) = s.forward_noise(&x0, k, &mut rng(k as u64)).unwrap();
        let out = ddim_sample(&oracle, &s, &DdimConfig::default(), &[8, 8, 8], &mut rng(1), Some((xk, k))).unwrap();
        let err = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "k={k} err {err}");
    }
}

#[test]
fn deterministic_sampling_is_a_pure_function() {
    let shape = [8usize, 8, 8];
    let m = noisy_model(shape);
    let cfg = DdimConfig {
        steps: 10,
        stride: 100,
        eta: 0.0,
    };
    let a = ddim_sample(&m, &m.schedule, &cfg, &shape, &mut rng(21), None).unwrap();
    let b = ddim_sample(&m, &m.schedule, &cfg, &shape, &mut rng(21), None).unwrap();
    assert_eq!(a, b);
    // With η = 0 only the start noise matters.
    let start = gaussian(&shape, &mut rng(21));
    let c = ddim_sample(&m, &m.schedule, &cfg, &shape, &mut rng(99), Some((start, 1000))).unwrap();
    assert_eq!(a, c);
    let stochastic = DdimConfig { eta: 1.0, ..cfg };
    let d = ddim_sample(&m, &m.schedule, &stochastic, &shape, &mut rng(21), None).unwrap();
    let e = ddim_sample(&m, &m.schedule, &stochastic, &shape, &mut rng(21), None).unwrap();
    assert_eq!(d, e);
    assert_ne!(a, d);
}

#[test]
fn denoiser_shapes_and_untrained_loss() {
    let cfg = small_net();
    assert!(cfg.check_plane(&[8, 6, 8]).is_err());
    assert!(cfg.check_plane(&[4, 8, 8]).is_err());
    let shape = [8usize, 16, 16];
    let m = DiffusionModel::new(DenoiserParams::init(&cfg, 0).unwrap(), NoiseSchedule::linear(), Standardizer::identity(8), shape).unwrap();
    let x = plane(&shape, 1, 1.0);
    let eps = m.predict(&x, 500).unwrap();
    assert_eq!(eps.shape(), x.shape());
    assert!(eps.data().iter().all(|&v| v == 0.0));
    let lats: Vec<LatentCode> = (0..4).map(|i| LatentCode::new(plane(&shape, 30 + i, 1.0)).unwrap()).collect();
    let loss = denoising_loss(&m, &lats, 16, 0).unwrap();
    assert!((loss - 1.0).abs() < 0.01, "untrained loss {loss}");
}

#[test]
fn timestep_features_are_distinct_and_bounded() {
    let f = timestep_features(&[1, 2, 500, 1000], 32);
    assert_eq!(f.shape(), &[4, 32]);
    assert!(f.data().iter().all(|v| v.abs() <= 1.0));
    assert_ne!(&f.data()[..32], &f.data()[32..64]);
}

#[test]
fn shuffled_targets_plateau_at_unit_loss() {
    let shape = [8usize, 16, 16];
    let data: Vec<Tensor> = (0..4).map(|i| plane(&shape, 40 + i, 1.0)).collect();
    let s = NoiseSchedule::linear();
    let mut tr = Trainer::new(DenoiserParams::init(&small_net(), 1).unwrap(), &NoiseSchedule::linear(), 1e-3);
    let mut r = rng(41);
    let mut tail = Vec::new();
    for step in 0..300 {
        let (x, ts, _) = noised_batch(&data, &s, 8, &mut r).unwrap();
        let unrelated = gaussian(&[8, 8, 16, 16], &mut r);
        let l = tr.step(&x, &ts, &unrelated).unwrap();
        if step >= 200 {
            tail.push(l);
        }
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "control plateau {mean}");
}

#[test]
fn checkpoint_round_trip() {
    let shape = [8usize, 8, 8];
    let mut m = noisy_model(shape);
    m.standardizer = Standardizer {
        mean: (0..8).map(|i| i as f32 * 0.1).collect(),
        std: (0..8).map(|i| 1.0 + i as f32).collect(),
    };
    m.train_steps = 17;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.ntc");
    m.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("prior.json")).unwrap()).unwrap();
    assert_eq!(json["schedule"]["steps"], 1000);
    assert_eq!(json["denoiser"]["base_channels"], 16);
    assert_eq!(json["train_steps"], 17);
    let back = DiffusionModel::load(&path).unwrap();
    assert_eq!(back, m);
    let x = plane(&shape, 3, 1.0);
    assert_eq!(back.predict(&x, 321).unwrap(), m.predict(&x, 321).unwrap());

    let mut bad = json.clone();
    bad["surprise"] = serde_json::json!(1);
    std::fs::write(dir.path().join("prior.json"), serde_json::to_vec(&bad).unwrap()).unwrap();
    assert!(DiffusionModel::load(&path).is_err());
}

#[test]
fn standardizer_round_trip_and_unit_scale() {
    let raw: Vec<Tensor> = (0..6)
        .map(|i| Tensor::from_fn(&[3, 4, 4], |j| 5.0 + (j / 16) as f32 * 3.0 + ((i * 31 + j) as f32).sin() * (1 + j / 16) as f32))
        .collect();
    let s = Standardizer::fit(&raw).unwrap();
    let z: Vec<Tensor> = raw.iter().map(|t| s.forward(t)).collect();
    let refit = Standardizer::fit(&z).unwrap();
    for c in 0..3 {
        assert!(refit.mean[c].abs() < 1e-5);
        assert!((refit.std[c] - 1.0).abs() < 1e-4);
    }
    for (a, b) in raw.iter().zip(&z) {
        let back = s.inverse(b);
        for (x, y) in a.data().iter().zip(back.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn gated_skip_starts_closed() {
    let p = DenoiserParams::init(&small_net(), 0).unwrap();
    let gain = &p.tensors.iter().find(|(n, _)| n == "skip.gain").unwrap().1;
    assert_eq!(gain.data(), &[0.0]);
}

#[test]
fn overfits_four_latents() {
    let shape = [8usize, 16, 16];
    let lats: Vec<LatentCode> = (0..4)
        .map(|k| {
            LatentCode::new(Tensor::from_fn(&shape, |i| {
                let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
                (x as f32 * 0.2 * (k + 1) as f32 + c as f32).sin() * (y as f32 * 0.15 + k as f32).cos()
            }))
            .unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        steps: 2000,
        batch: 8,
        log_every: 250,
        checkpoint_every: 0,
        ..Default::default()
    };
    let res = train_denoiser(&lats, &NoiseSchedule::linear(), &small_net(), &cfg, None).unwrap();
    let untrained = DiffusionModel::new(
        DenoiserParams::init(&small_net(), 0).unwrap(),
        NoiseSchedule::linear(),
        res.model.standardizer.clone(),
        shape,
    )
    .unwrap();
    let start = denoising_loss(&untrained, &lats, 8, 1).unwrap();
    let last = res.log.last().unwrap().loss;
    assert!(start / last >= 3.0, "start {start} last {last}");
    assert!(last < 0.15, "{:?}", res.log);
}

#[test]
fn periodic_checkpoints_are_loadable() {
    let shape = [8usize, 8, 8];
    let lats: Vec<LatentCode> = (0..2).map(|i| LatentCode::new(plane(&shape, 60 + i, 1.0)).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.ntc");
    let cfg = TrainConfig {
        steps: 6,
        batch: 2,
        log_every: 2,
        checkpoint_every: 3,
        ..Default::default()
    };
    let res = train_denoiser(&lats, &NoiseSchedule::linear(), &small_net(), &cfg, Some(&path)).unwrap();
    assert_eq!(res.log.len(), 3);
    let back = DiffusionModel::load(&path).unwrap();
    assert_eq!(back.train_steps, 6);
    assert_eq!(back, res.model);
    let bad = TrainConfig { batch: 0, ..cfg };
    assert!(train_denoiser(&lats, &NoiseSchedule::linear(), &small_net(), &bad, None).is_err());
}

#[test]
fn trained_prior_reduces_loss_threefold() {
    let p = common::compact_prior();
    let untrained = DiffusionModel::new(
        DenoiserParams::init(&common::compact_net(), 0).unwrap(),
        p.model.schedule.clone(),
        p.model.standardizer.clone(),
        p.model.latent_shape,
    )
    .unwrap();
    let init = denoising_loss(&untrained, &p.fit.latents, 8, 3).unwrap();
    let last = p.log.last().unwrap().loss;
    assert!(init / last >= 3.0, "init {init} last {last}");
}

#[test]
fn loss_is_consistent_under_dihedral_transforms() {
    let p = common::compact_prior();
    let base = denoising_loss(&p.model, &p.fit.latents, 16, 7).unwrap();
    let mut ratios = Vec::new();
    for d in Dihedral::all() {
        let moved: Vec<LatentCode> = p.fit.latents.iter().map(|l| l.apply_dihedral(d).unwrap()).collect();
        let l = denoising_loss(&p.model, &moved, 16, 7).unwrap();
        ratios.push(l / base);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 1.0).abs() < 0.1, "ratios {ratios:?}");
}

#[test]
fn unconditional_samples_look_like_training_clouds() {
    let p = common::compact_prior();
    let train_max = p.vols.iter().map(|v| v.max()).fold(0.0f32, f32::max);
    let occ: Vec<f64> = p.vols.iter().map(|v| v.occupancy(0.05)).collect();
    let (lo, hi) = (
        occ.iter().cloned().fold(f64::INFINITY, f64::min),
        occ.iter().cloned().fold(0.0, f64::max),
    );
    let mut r = rng(70);
    let ancestral = DdimConfig {
        eta: 1.0,
        ..Default::default()
    };
    let mut sample_occ = Vec::new();
    for _ in 0..64 {
        let l = generate(&p.model, &ancestral, &mut r).unwrap();
        let g = p.fit.decoder.decode_grid(&l, p.cfg.grid_extents).unwrap();
        assert!(g.data().iter().all(|&v| v >= 0.0));
        assert!(g.max() <= 1.5 * train_max, "sample max {} vs train max {train_max}", g.max());
        sample_occ.push(g.occupancy(0.05));
    }
    let mean = sample_occ.iter().sum::<f64>() / 64.0;
    assert!(mean >= 0.5 * lo && mean <= 1.5 * hi, "sample occupancy {mean} vs train [{lo}, {hi}]");
    let inside = sample_occ.iter().filter(|&&o| o >= 0.5 * lo && o <= 1.5 * hi).count();
    assert!(inside >= 56, "{inside}/64 samples inside the band; {sample_occ:?}");
}
