//! Forward values of primitives and samplers against independent scalar
//! reference evaluators, plus the tape's linearity property.

use std::rc::Rc;

use ndtape::{Padding, Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f32]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(a.matmul(&i).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softplus_at_zero_is_ln2() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1]));
    assert!((x.softplus().unwrap().item() - std::f32::consts::LN_2).abs() < 1e-6);
}

#[test]
fn conv_of_impulse_reproduces_kernel() {
    let tape = Tape::new();
    let mut img = Tensor::zeros(&[1, 1, 5, 5]);
    img.data_mut()[2 * 5 + 2] = 1.0;
    let k: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    let x = tape.constant(img);
    let w = tape.constant(t(&[1, 1, 3, 3], &k));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = x.conv2d(&w, &b, Padding::Zero).unwrap();
    // Cross-correlation places the kernel flipped around the impulse.
    for dy in 0..3 {
        for dx in 0..3 {
            let v = y.data()[(1 + dy) * 5 + (1 + dx)];
            assert_eq!(v, k[(2 - dy) * 3 + (2 - dx)]);
        }
    }
    assert_eq!(y.data().iter().filter(|v| **v != 0.0).count(), 9);
}

#[test]
fn replicate_padding_keeps_constant_planes_constant() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.3));
    let w = tape.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32 * 0.37).sin()));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = x.conv2d(&w, &b, Padding::Replicate).unwrap().upsample2x().unwrap();
    for c in 0..3 {
        let plane = &y.data()[c * 64..(c + 1) * 64];
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-6));
    }
}

/// Scalar Catmull-Rom in polynomial form, written independently of the
/// weight-based sampler.
fn catmull_rom_ref(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    0.5 * (2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

fn bicubic_ref(plane: &[f32], h: usize, w: usize, u: f32, v: f32) -> f64 {
    let cy = (((u as f64) + 1.0) * 0.5 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let cx = (((v as f64) + 1.0) * 0.5 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let iy = (cy.floor() as i64).min(h as i64 - 2);
    let ix = (cx.floor() as i64).min(w as i64 - 2);
    let at = |y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        plane[y * w + x] as f64
    };
    let rows: Vec<f64> = (-1..=2)
        .map(|dy| {
            let y = iy + dy;
            catmull_rom_ref(at(y, ix - 1), at(y, ix), at(y, ix + 1), at(y, ix + 2), cx - ix as f64)
        })
        .collect();
    catmull_rom_ref(rows[0], rows[1], rows[2], rows[3], cy - iy as f64)
}

fn trilinear_ref(g: &[f32], e: [usize; 3], p: [f32; 3]) -> f64 {
    let c: Vec<f64> = (0..3)
        .map(|a| (((p[a] as f64) + 1.0) * 0.5 * (e[a] - 1) as f64).clamp(0.0, (e[a] - 1) as f64))
        .collect();
    let mut acc = 0.0;
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                // Tent weights summed over every node: independent of stencil logic.
                let wx = (1.0 - (c[0] - x as f64).abs()).max(0.0);
                let wy = (1.0 - (c[1] - y as f64).abs()).max(0.0);
                let wz = (1.0 - (c[2] - z as f64).abs()).max(0.0);
                acc += wx * wy * wz * g[(x * e[1] + y) * e[2] + z] as f64;
            }
        }
    }
    acc
}

#[test]
fn bicubic_constant_and_nodes() {
    let tape = Tape::new();
    let plane = tape.constant(Tensor::full(&[2, 4, 5], 0.75));
    let uv = tape.constant(t(&[3, 2], &[0.13, -0.77, 1.5, 0.2, -1.0, 1.0]));
    let s = plane.sample_bicubic_2d(&uv).unwrap();
    assert!(s.data().iter().all(|v| (v - 0.75).abs() < 1e-6));

    let vals = Tensor::from_fn(&[1, 4, 5], |i| (i as f32 * 1.3).cos());
    let plane = tape.constant(vals.clone());
    // Node (2, 3): u = -1 + 2*2/3, v = -1 + 2*3/4.
    let uv = tape.constant(t(&[1, 2], &[-1.0 + 4.0 / 3.0, 0.5]));
    let s = plane.sample_bicubic_2d(&uv).unwrap();
    assert!((s.item() - vals.data()[2 * 5 + 3]).abs() < 1e-5);

    let bad = tape.constant(t(&[1, 2], &[f32::NAN, 0.0]));
    assert!(plane.sample_bicubic_2d(&bad).is_err());
    let small = tape.constant(Tensor::zeros(&[1, 3, 5]));
    assert!(small.sample_bicubic_2d(&uv).is_err());
}

#[test]
fn linear_1d_examples() {
    let tape = Tape::new();
    let v = tape.constant(t(&[3], &[0.0, 1.0, 0.0]));
    assert_eq!(v.sample_linear_1d(0.0).unwrap().item(), 1.0);
    assert_eq!(v.sample_linear_1d(-0.5).unwrap().item(), 0.5);
    let w = tape.constant(t(&[4], &[3.0, 1.0, 4.0, 1.5]));
    assert_eq!(w.sample_linear_1d(-1.0).unwrap().item(), 3.0);
    assert_eq!(w.sample_linear_1d(1.0).unwrap().item(), 1.5);
    assert_eq!(w.sample_linear_1d(7.0).unwrap().item(), 1.5);
}

#[test]
fn trilinear_constant_and_vertex() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2, 3, 4], 0.4));
    let pts = Rc::new(vec![[0.1, -0.3, 0.9], [1.2, -2.0, 0.0]]);
    let s = g.sample_trilinear_3d(pts).unwrap();
    assert!(s.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    let vals = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
    let g = tape.constant(vals);
    // Vertex (1, 2, 1) at (1, 1, -1/3).
    let s = g.sample_trilinear_3d(Rc::new(vec![[1.0, 1.0, -1.0 / 3.0]])).unwrap();
    assert!((s.item() - ((1 * 3 + 2) * 4 + 1) as f32).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bicubic_matches_reference(seed in 0u64..1000, u in -1.2f32..1.2, v in -1.2f32..1.2) {
        let (h, w) = (5usize, 7usize);
        let vals = Tensor::from_fn(&[1, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 500.0 - 1.0);
        let tape = Tape::new();
        let plane = tape.constant(vals.clone());
        let uv = tape.constant(t(&[1, 2], &[u, v]));
        let got = plane.sample_bicubic_2d(&uv).unwrap().item() as f64;
        let want = bicubic_ref(vals.data(), h, w, u, v);
        prop_assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn trilinear_matches_reference(seed in 0u64..1000, x in -1.1f32..1.1, y in -1.1f32..1.1, z in -1.1f32..1.1) {
        let e = [3usize, 4, 5];
        let vals = Tensor::from_fn(&e, |i| ((i as u64 * 40503 + seed) % 997) as f32 / 997.0);
        let tape = Tape::new();
        let g = tape.constant(vals.clone());
        let got = g.sample_trilinear_3d(Rc::new(vec![[x, y, z]])).unwrap().item() as f64;
        let want = trilinear_ref(vals.data(), e, [x, y, z]);
        prop_assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    /// Backward of a sum of losses equals the sum of separate backwards.
    #[test]
    fn backward_is_linear(seed in 0u64..500) {
        let data = Tensor::from_fn(&[2, 3], |i| (((i as u64 + 1) * 7919 + seed) % 200) as f32 / 100.0 - 1.0);
        let w = Tensor::from_fn(&[3, 2], |i| (((i as u64 + 3) * 104729 + seed) % 200) as f32 / 100.0 - 1.0);
        let f1 = |x: &ndtape::Var, w: &ndtape::Var| x.matmul(w).unwrap().gelu().unwrap().sum().unwrap();
        let f2 = |x: &ndtape::Var| x.softplus().unwrap().square().unwrap().mean().unwrap();

        let grads = |which: u8| {
            let tape = Tape::new();
            let x = tape.param(data.clone());
            let wv = tape.constant(w.clone());
            let loss = match which {
                0 => f1(&x, &wv),
                1 => f2(&x),
                _ => f1(&x, &wv).add(&f2(&x)).unwrap(),
            };
            tape.backward(&loss).unwrap().wrt(&x)
        };
        let (a, b, c) = (grads(0), grads(1), grads(2));
        for i in 0..6 {
            prop_assert!((a.data()[i] + b.data()[i] - c.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn nt01_roundtrip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
        let n = vals.len();
        let t = Tensor::new(&[n], vals).unwrap();
        let back = Tensor::read_from(&mut t.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
