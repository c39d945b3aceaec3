//! Every CLI command run twice from the same configs must write identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nimbus::diffusion::{DdimConfig, DenoiserConfig, TrainConfig};
use nimbus::monoplanar::{EncodeConfig, FitConfig, MonoplanarConfig};
use nimbus::posterior::{DpsConfig, PdpsConfig, PhiFree};
use nimbus::render::{Background, Camera, RenderConfig, RenderParams};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Context, Report};

fn tiny_codec() -> MonoplanarConfig {
    MonoplanarConfig {
        latent_size: 8,
        hidden: 16,
        hidden_layers: 2,
        grid_extents: [16, 8, 16],
        ..Default::default()
    }
}

fn quick_dps() -> DpsConfig {
    DpsConfig {
        ddim: DdimConfig {
            steps: 10,
            stride: 100,
            eta: 1.0,
        },
        ..Default::default()
    }
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(format!("{name}.json"));
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

/// Argument lists of the whole pipeline, in dependency order. Config paths
/// are relative to the config directory.
fn pipeline(cfgs: &Path) -> Vec<Vec<String>> {
    let c = |name: &str, v: Value| write_config(cfgs, name, &v).display().to_string();
    let prior = json!({ "model": "../runs/prior/model.ckpt", "decoder": "../runs/codec/decoder.ckpt" });
    let camera = |az: f32, res: usize| serde_json::to_value(Camera::orbit(az, 15.0, 3.2, 40.0, res, res)).unwrap();
    let mut phi = RenderParams {
        background: Some(Background::Uniform([0.5; 3])),
        ..Default::default()
    };
    let truth_phi = serde_json::to_value(&phi).unwrap();
    phi.background = Some(Background::Uniform([0.3; 3]));
    let pdps = PdpsConfig {
        passes: 2,
        phi_steps: 2,
        free: PhiFree {
            background: true,
            ..Default::default()
        },
        dps: quick_dps(),
        refine_steps: 2,
        guide_steps: 16,
        render: RenderConfig {
            spp: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let fit = FitConfig {
        steps: 40,
        batch: 512,
        eval_points: 1024,
        log_every: 20,
        ..Default::default()
    };
    let vols = json!(["../runs/gen/train_0000.vol", "../runs/gen/train_0001.vol"]);
    let held = "../runs/gen/held_0000.vol";
    let s = |v: &[&str]| v.iter().map(|a| a.to_string()).collect::<Vec<_>>();
    vec![
        s(&["gen", "--config", &c("gen", json!({ "count": 3, "held_out": 1, "extents": [16, 8, 16], "seed": 4, "out": "../runs/gen" }))]),
        s(&["codec", "train", "--config", &c("codec_train", json!({ "volumes": vols, "monoplanar": tiny_codec(), "fit": fit, "out": "../runs/codec" }))]),
        s(&[
            "codec",
            "encode",
            "--config",
            &c(
                "codec_encode",
                json!({
                    "decoder": "../runs/codec/decoder.ckpt",
                    "volumes": [held],
                    "sampler": "saliency",
                    "encode": EncodeConfig { steps: 30, batch: 512, eval_points: 1024, log_every: 10, ..Default::default() },
                    "out": "../runs/encode",
                }),
            ),
        ]),
        s(&["codec", "decode", "--decoder", "runs/codec/decoder.ckpt", "--latent", "runs/codec/train_0000.lat", "--out", "runs/decode"]),
        s(&["codec", "bench", "--decoder", "runs/codec/decoder.ckpt", "--out", "runs/compression"]),
        s(&[
            "diffusion",
            "train",
            "--config",
            &c(
                "prior",
                json!({
                    "latents": ["../runs/codec"],
                    "denoiser": DenoiserConfig { channels: 8, base_channels: 8, time_dim: 16 },
                    "train": TrainConfig { steps: 20, batch: 4, log_every: 10, checkpoint_every: 10, ..Default::default() },
                    "out": "../runs/prior",
                }),
            ),
        ]),
        s(&[
            "diffusion",
            "sample",
            "--count",
            "2",
            "--config",
            &c(
                "sample",
                json!({ "model": "../runs/prior/model.ckpt", "decoder": "../runs/codec/decoder.ckpt", "seed": 3, "ddim": quick_dps().ddim, "out": "../runs/sample" }),
            ),
        ]),
        s(&[
            "superres",
            "--restarts",
            "1",
            "--config",
            &c("superres", json!({ "prior": prior, "seed": 5, "observation": held, "coarse": [4, 2, 4], "dps": quick_dps(), "out": "../runs/superres" })),
        ]),
        s(&["inpaint", "--config", &c("inpaint", json!({ "prior": prior, "seed": 6, "observation": held, "dps": quick_dps(), "out": "../runs/inpaint" }))]),
        s(&[
            "transmit",
            "--config",
            &c(
                "transmit",
                json!({ "prior": prior, "seed": 7, "observation": { "volume": held }, "camera": camera(30.0, 12), "steps": 32, "dps": quick_dps(), "out": "../runs/transmit" }),
            ),
        ]),
        s(&[
            "interp",
            "--config",
            &c(
                "interp",
                json!({
                    "prior": prior, "seed": 8, "a": "../runs/codec/train_0000.lat", "b": "../runs/codec/train_0001.lat",
                    "alphas": [0.0, 0.5, 1.0], "dps": quick_dps(), "out": "../runs/interp",
                }),
            ),
        ]),
        s(&[
            "reconstruct",
            "--config",
            &c(
                "reconstruct",
                json!({
                    "prior": prior,
                    "seed": 9,
                    "views": [{ "camera": camera(20.0, 8) }],
                    "truth": { "volume": held, "phi": truth_phi, "render": RenderConfig { spp: 4, ..Default::default() } },
                    "phi0": phi,
                    "pdps": pdps,
                    "novel_views": [camera(140.0, 8)],
                    "out": "../runs/reconstruct",
                }),
            ),
        ]),
        s(&[
            "bench",
            "--reps",
            "mono,grid",
            "--config",
            &c(
                "bench",
                json!({ "count": 2, "seed": 2, "monoplanar": tiny_codec(), "fit": FitConfig { steps: 10, ..fit.clone() }, "out": "../runs/bench" }),
            ),
        ]),
        s(&["metrics", "--ref", "runs/gen/train_0000.vol", "--test", "runs/decode/train_0000.vol", "--out", "runs/metrics"]),
    ]
}

fn nimbus(dir: &Path, args: &[String], env_threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nimbus"));
    cmd.current_dir(dir).args(args).env_remove("NIMBUS_THREADS");
    if let Some(t) = env_threads {
        cmd.env("NIMBUS_THREADS", t);
    }
    cmd.output().unwrap()
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn error_json(o: &Output) -> Option<Value> {
    serde_json::from_slice::<Value>(String::from_utf8_lossy(&o.stderr).trim().as_bytes()).ok()
}

pub fn reproducibility(ctx: &mut Context, r: &mut Report) {
    let dir = ctx.work.path().join("repro");
    let cfgs = dir.join("configs");
    std::fs::create_dir_all(&cfgs).unwrap();
    let steps = pipeline(&cfgs);
    let mut hashes = Vec::new();
    for (round, threads) in [(1, Some("2")), (2, None)] {
        let _ = std::fs::remove_dir_all(dir.join("runs"));
        for args in &steps {
            let mut args = args.clone();
            if threads.is_none() {
                args.splice(0..0, ["--threads".to_string(), "1".to_string()]);
            }
            let o = nimbus(&dir, &args, threads);
            if !o.status.success() {
                r.check(
                    &format!("round {round}: {}", args.join(" ")),
                    false,
                    String::from_utf8_lossy(&o.stderr).trim().to_string(),
                );
                return;
            }
        }
        hashes.push(hash_tree(&dir.join("runs")));
    }
    let (a, b) = (&hashes[0], &hashes[1]);
    let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    let commands: std::collections::BTreeSet<String> = steps
        .iter()
        .map(|s| s.iter().take_while(|a| !a.starts_with("--")).cloned().collect::<Vec<_>>().join(" "))
        .collect();
    r.check(
        "identical artifacts",
        differing.is_empty() && !a.is_empty(),
        format!(
            "{} files from {} commands, 2 vs 1 threads; differing: {:?}",
            a.len(),
            commands.len(),
            differing
        ),
    );

    let bad = write_config(&cfgs, "bad", &json!({ "count": 1, "colour": "grey" }));
    let o = nimbus(&dir, &["gen".into(), "--config".into(), bad.display().to_string()], None);
    let j = error_json(&o);
    r.check(
        "unknown key exits 1",
        o.status.code() == Some(1) && j.is_some_and(|j| j["exit_code"] == 1 && j["error"] == "config"),
        format!("exit {:?}", o.status.code()),
    );
    let args: Vec<String> = ["codec", "decode", "--decoder", "missing.ckpt", "--latent", "missing.lat", "--out", "runs/x"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let o = nimbus(&dir, &args, None);
    let j = error_json(&o);
    r.check(
        "missing file exits 3",
        o.status.code() == Some(3) && j.is_some_and(|j| j["exit_code"] == 3),
        format!("exit {:?}", o.status.code()),
    );
}
