use nimbus::cloudgen::*;
use nimbus::{DenseGrid3, NimbusError};
use proptest::prelude::*;

const DESK: [usize; 3] = [64, 32, 64];

fn rmse(a: &DenseGrid3, b: &DenseGrid3) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    (s / a.len() as f64).sqrt()
}

#[test]
fn same_seed_is_bitwise_identical() {
    let a = generate_cloud(&CloudSpec::random(7, DESK)).unwrap();
    let b = generate_cloud(&CloudSpec::random(7, DESK)).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = generate_cloud(&CloudSpec::random(8, DESK)).unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn full_erosion_is_empty() {
    let mut s = CloudSpec::random(7, DESK);
    s.erosion_threshold = 1.0;
    assert!(matches!(generate_cloud(&s), Err(NimbusError::EmptyField(_))));
}

#[test]
fn zero_radii_is_empty() {
    let mut s = CloudSpec::random(3, DESK);
    for p in &mut s.puffs {
        p.radii = [0.0; 3];
    }
    assert!(matches!(generate_cloud(&s), Err(NimbusError::EmptyField(_))));
}

#[test]
fn default_spec_occupancy_band() {
    let g = generate_cloud(&CloudSpec::default()).unwrap();
    let occ = g.occupancy(0.05);
    assert!((0.05..=0.5).contains(&occ), "occupancy {occ}");
    for seed in 1..10 {
        let occ = generate_cloud(&CloudSpec::random(seed, DESK)).unwrap().occupancy(0.05);
        assert!((0.05..=0.5).contains(&occ), "seed {seed}: occupancy {occ}");
    }
}

#[test]
fn flat_base_cumulus_statistics() {
    for seed in 0..10 {
        let g = generate_cloud(&CloudSpec::random(seed, DESK)).unwrap();
        let (lo, hi) = g.vertical_half_means();
        assert!(lo >= hi, "seed {seed}: {lo} < {hi}");
        assert_eq!(g.boundary_max(2), 0.0);
        assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn flips_are_involutions() {
    let g = generate_cloud(&CloudSpec::random(5, DESK)).unwrap();
    for op in [AugmentOp::FlipX, AugmentOp::FlipZ, AugmentOp::TransposeXz] {
        let once = apply_volume_transform(&g, op).unwrap();
        assert_ne!(once.data(), g.data());
        let twice = apply_volume_transform(&once, op).unwrap();
        assert_eq!(twice.to_bytes(), g.to_bytes(), "{op:?}");
        assert!((once.mass() - g.mass()).abs() < 1e-9 * g.mass());
    }
}

#[test]
fn transpose_swaps_horizontal_moments() {
    let g = DenseGrid3::from_fn([16, 8, 16], |p| {
        (1.0 - ((p[0] - 0.4) / 0.3).powi(2) - ((p[2] + 0.2) / 0.5).powi(2) - p[1].powi(2)).max(0.0)
    });
    let t = apply_volume_transform(&g, AugmentOp::TransposeXz).unwrap();
    let (cg, ct) = (g.centroid(), t.centroid());
    assert!((cg[0] - ct[2]).abs() < 1e-6 && (cg[2] - ct[0]).abs() < 1e-6);
    assert!((cg[1] - ct[1]).abs() < 1e-6);
    assert!((cg[0] - 0.4).abs() < 0.05 && (cg[2] + 0.2).abs() < 0.05);
}

#[test]
fn transpose_requires_square_plane() {
    let g = DenseGrid3::zeros([16, 8, 12]);
    assert!(apply_volume_transform(&g, AugmentOp::TransposeXz).is_err());
}

#[test]
fn full_turn_reproduces_field() {
    let g = generate_cloud(&CloudSpec::random(2, DESK)).unwrap();
    let r = apply_volume_transform(
        &g,
        AugmentOp::XyRotation {
            angle: std::f32::consts::TAU,
        },
    )
    .unwrap();
    assert!(rmse(&g, &r) < 1e-3, "{}", rmse(&g, &r));
}

#[test]
fn quarter_turn_matches_dihedral_permutation() {
    // A quarter turn maps (x, z) to (-z, x), i.e. transpose then flip x.
    let g = generate_cloud(&CloudSpec::random(4, DESK)).unwrap();
    let r = apply_xy(
        &g,
        XyTransform {
            angle: std::f32::consts::FRAC_PI_2,
            scale: 1.0,
        },
    );
    let d = Dihedral {
        transpose: true,
        flip_x: true,
        flip_z: false,
    };
    let p = d.apply_grid(&g).unwrap();
    assert!(rmse(&r, &p) < 1e-4, "{}", rmse(&r, &p));
}

#[test]
fn rotations_conserve_mass_and_scales_scale_it() {
    let g = generate_cloud(&CloudSpec::random(9, DESK)).unwrap();
    for t in xy_transforms(14) {
        let rot = apply_xy(&g, XyTransform { angle: t.angle, scale: 1.0 });
        let ratio = rot.mass() / g.mass();
        assert!((ratio - 1.0).abs() < 0.02, "angle {}: {ratio}", t.angle);
        let both = apply_xy(&g, t);
        let expect = (t.scale * t.scale) as f64;
        let ratio = both.mass() / g.mass() / expect;
        assert!((ratio - 1.0).abs() < 0.02, "{t:?}: {ratio}");
        assert_eq!(both.boundary_max(2), 0.0);
    }
}

#[test]
fn fourteen_transforms_family() {
    let t = xy_transforms(14);
    assert_eq!(t.len(), 14);
    assert_eq!(t[0].scale, 0.95);
    assert_eq!(t[1].scale, 1.05);
    assert!((t[13].angle - std::f32::consts::TAU * 6.0 / 7.0).abs() < 1e-6);
    assert!(t.iter().all(|x| (0.9..=1.1).contains(&x.scale)));
    assert_eq!(xy_transforms(1), vec![XyTransform::IDENTITY]);
}

#[test]
fn dataset_counts() {
    assert_eq!(build_dataset(0, 2, 14, true, 0).len(), 224);
    assert_eq!(build_dataset(0, 1, 1, false, 0).len(), 1);
    assert_eq!(build_dataset(0, 4, 3, false, 1).held_out.len(), 3);
}

#[test]
fn split_is_by_cloud() {
    let ds = build_dataset(42, 10, 14, true, 3);
    let train: std::collections::HashSet<u32> = ds.train.iter().map(|d| d.cloud_id).collect();
    let held: std::collections::HashSet<u32> = ds.held_out.iter().map(|d| d.cloud_id).collect();
    assert_eq!(train.len(), 7);
    assert_eq!(held.len(), 3);
    assert!(train.is_disjoint(&held));
    let train_seeds: std::collections::HashSet<u64> = ds.train.iter().map(|d| d.cloud_seed).collect();
    assert!(ds.held_out.iter().all(|d| !train_seeds.contains(&d.cloud_seed)));
}

#[test]
fn dataset_reproducible_from_master_seed() {
    let a = build_dataset(5, 3, 2, true, 1);
    let b = build_dataset(5, 3, 2, true, 1);
    assert_eq!(a.train, b.train);
    let va = a.held_out[5].materialize([16, 8, 16]).unwrap();
    let vb = b.held_out[5].materialize([16, 8, 16]).unwrap();
    assert_eq!(va.to_bytes(), vb.to_bytes());
    assert_ne!(build_dataset(6, 3, 2, true, 1).train[0].cloud_seed, a.train[0].cloud_seed);
}

#[test]
fn dihedral_group_table() {
    let all = Dihedral::all();
    let mut codes: Vec<u8> = all.iter().map(|d| d.code()).collect();
    codes.sort();
    codes.dedup();
    assert_eq!(codes.len(), 8);
    for a in all {
        assert_eq!(a.compose(Dihedral::IDENTITY), a);
        assert_eq!(a.compose(a.inverse()), Dihedral::IDENTITY);
        let row: std::collections::HashSet<u8> = all.iter().map(|&b| a.compose(b).code()).collect();
        assert_eq!(row.len(), 8, "each row of the Cayley table is a permutation");
        for b in all {
            for c in all {
                assert_eq!(a.compose(b).compose(c), a.compose(b.compose(c)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_action_is_a_homomorphism(a in 0usize..8, b in 0usize..8, seed in 0u64..1000) {
        let g = DenseGrid3::from_fn([6, 3, 6], |p| {
            ((p[0] * 3.1 + seed as f32).sin() + (p[2] * 1.7).cos() * p[1]).abs()
        });
        let (da, db) = (Dihedral::all()[a], Dihedral::all()[b]);
        let seq = da.apply_grid(&db.apply_grid(&g).unwrap()).unwrap();
        let once = da.compose(db).apply_grid(&g).unwrap();
        prop_assert_eq!(seq.data(), once.data());
    }

    #[test]
    fn generated_densities_in_unit_interval(seed in 0u64..10_000) {
        let g = generate_cloud(&CloudSpec::random(seed, [24, 12, 24])).unwrap();
        prop_assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(g.boundary_max(2), 0.0);
        let (lo, hi) = g.vertical_half_means();
        prop_assert!(lo >= hi);
    }
}
