mod common;

use pournet::metrics;
use pournet::phantom::{generate_atlas, PhantomSpec};
use pournet::ppgm::*;
use pournet::{Volume3D, VolumeKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nvol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
    Volume3D::new(dims, [2.0; 3], VolumeKind::MuNormalized, data).unwrap()
}

fn random_atlas(n: usize, dims: [usize; 3], seed: u64) -> AtlasDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = dims.iter().product();
    let entries = (0..n).map(|i| (format!("e{i:03}"), nvol(dims, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()))).collect();
    AtlasDataset::new(entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn atlas_match_equals_brute_force(seed in any::<u64>(), n in 1usize..20) {
        let atlas = random_atlas(n, [4, 5, 6], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q = nvol([4, 5, 6], (0..120).map(|_| rng.gen_range(0.0..1.0)).collect());
        let m = atlas_match(&q, &atlas).unwrap();
        let (i, mse) = common::oracle::brute_force(&q, &atlas);
        prop_assert_eq!(m.index, i);
        prop_assert!((m.mse - mse).abs() <= 1e-12 * mse.max(1.0));
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    let v = nvol([2, 2, 2], vec![0.5; 8]);
    let far = nvol([2, 2, 2], vec![0.0; 8]);
    let atlas = AtlasDataset::new(vec![("c".into(), v.clone()), ("a".into(), far), ("b".into(), v.clone())]).unwrap();
    assert_eq!(atlas.id(0), "a");
    let m = atlas_match(&v, &atlas).unwrap();
    assert_eq!((m.index, m.mse), (1, 0.0));
}

#[test]
fn atlas_entry_of_a_query_matches_itself() {
    let spec = PhantomSpec { size: 16, ..PhantomSpec::default() };
    let atlas = generate_atlas(12, &spec, 5).unwrap();
    for i in 0..atlas.len() {
        let m = atlas_match(atlas.volume(i), &atlas).unwrap();
        assert_eq!(m.index, i);
        assert_eq!(m.mse, 0.0);
    }
    assert_eq!(atlas.id(11), "0011");
}

#[test]
fn atlas_rejects_mixed_shapes_kinds_and_duplicates() {
    let a = nvol([2, 2, 2], vec![0.0; 8]);
    let b = nvol([2, 2, 4], vec![0.0; 16]);
    assert!(AtlasDataset::new(vec![]).is_err());
    assert!(AtlasDataset::new(vec![("a".into(), a.clone()), ("b".into(), b)]).is_err());
    assert!(AtlasDataset::new(vec![("a".into(), a.clone()), ("a".into(), a.clone())]).is_err());
    let raw = Volume3D::new([2, 2, 2], [2.0; 3], VolumeKind::Mu, vec![0.0; 8]).unwrap();
    assert!(AtlasDataset::new(vec![("a".into(), raw)]).is_err());
}

#[test]
fn atlas_directory_round_trip() {
    let atlas = random_atlas(5, [4, 4, 4], 9);
    let dir = tempfile::tempdir().unwrap();
    atlas.write_dir(dir.path()).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    assert_eq!(AtlasDataset::load_dir(dir.path()).unwrap(), atlas);
}

#[test]
fn query_on_another_grid_is_resampled() {
    let atlas = AtlasDataset::new(vec![
        ("lo".into(), nvol([4, 4, 4], vec![0.2; 64])),
        ("hi".into(), nvol([4, 4, 4], vec![0.8; 64])),
    ])
    .unwrap();
    let q = nvol([8, 8, 8], vec![0.75; 512]);
    let m = atlas_match(&q, &atlas).unwrap();
    assert_eq!(atlas.id(m.index), "hi");
    assert!((m.mse - 0.0025).abs() < 1e-7);
    assert_eq!(atlas_match_coarse(&q, &atlas, 2).unwrap().index, m.index);
    assert!(atlas_match_coarse(&q, &atlas, 3).is_err());
}

#[test]
fn zero_field_warp_is_identity_and_integer_shift_moves_voxels() {
    let dims = [6, 7, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = nvol(dims, (0..336).map(|_| rng.gen_range(0.0..1.0)).collect());
    assert_eq!(warp(&v, &DeformationField::zeros(dims)).unwrap(), v);

    let w = warp(&v, &DeformationField::constant(dims, [2.0, -1.0, 1.0])).unwrap();
    for z in 0..7 {
        for y in 1..7 {
            for x in 0..4 {
                assert_eq!(w.get(x, y, z), v.get(x + 2, y - 1, z + 1));
            }
        }
    }
}

#[test]
fn fractional_warp_of_a_ramp_is_exact_inside() {
    let dims = [10, 10, 10];
    let ramp = |x: f64, y: f64, z: f64| 0.1 * x - 0.05 * y + 0.02 * z;
    let data = (0..1000).map(|i| ramp((i % 10) as f64, ((i / 10) % 10) as f64, (i / 100) as f64) as f32).collect();
    let v = nvol(dims, data);
    let d = [0.3, -0.6, 1.25];
    let w = warp(&v, &DeformationField::constant(dims, d)).unwrap();
    for z in 1..8 {
        for y in 1..8 {
            for x in 1..8 {
                let want = ramp(x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]);
                assert!((f64::from(w.get(x, y, z)) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn jacobian_fraction_detects_folding() {
    let dims = [8, 8, 8];
    assert_eq!(DeformationField::zeros(dims).jacobian_positive_fraction(), 1.0);
    assert_eq!(DeformationField::constant(dims, [3.0, 1.0, 0.0]).jacobian_positive_fraction(), 1.0);
    // u_x = -2x compresses past zero: det = 1 - 2 < 0 everywhere
    let fold = DeformationField::from_fn(dims, |x, _, _| [-2.0 * x as f64, 0.0, 0.0]);
    assert_eq!(fold.jacobian_positive_fraction(), 0.0);
    let f = DeformationField::from_fn(dims, |x, y, z| [0.1 * x as f64, -0.2 * y as f64, 0.05 * z as f64]);
    assert!((f.mean_magnitude() - {
        let mut s = 0.0;
        for i in 0..512 {
            let d = f.at(i);
            s += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
        s / 512.0
    })
    .abs()
        < 1e-12);
}

#[test]
fn resized_field_scales_displacements() {
    let f = DeformationField::constant([4, 4, 4], [1.0, -0.5, 2.0]);
    let r = f.resized([8, 8, 16]).unwrap();
    assert_eq!(r.dims(), [8, 8, 16]);
    for i in 0..r.len() {
        let d = r.at(i);
        assert!((d[0] - 2.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6 && (d[2] - 8.0).abs() < 1e-6);
    }
}

#[test]
fn demons_recovers_a_one_voxel_shift_at_16() {
    let (fixed, body) = common::smooth_phantom(4, 16);
    let (moving, truth) = common::moving_for(&fixed, |_| [1.0, 0.0, -1.0]);
    let (field, warped) = demons_register(&fixed, &moving, &DemonsConfig::default()).unwrap();
    let voxels = common::interior(&body, fixed.dims(), 2);
    let epe = common::endpoint_error(&field, &truth, &voxels);
    assert!(epe < 0.5, "endpoint error {epe}");
    assert!(metrics::mse(&warped, &fixed).unwrap() < 0.1 * metrics::mse(&moving, &fixed).unwrap());
    assert!(field.jacobian_positive_fraction() > 0.99);
}

#[test]
fn demons_of_identical_images_stays_at_identity() {
    let (fixed, _) = common::smooth_phantom(5, 16);
    let (field, warped) = demons_register(&fixed, &fixed, &DemonsConfig::default()).unwrap();
    assert_eq!(field, DeformationField::zeros(fixed.dims()));
    assert_eq!(warped, fixed);
}

#[test]
fn demons_rejects_bad_inputs() {
    let a = nvol([8, 8, 8], vec![0.0; 512]);
    let b = nvol([8, 8, 4], vec![0.0; 256]);
    assert!(demons_register(&a, &b, &DemonsConfig::default()).is_err());
    let bad = DemonsConfig { pyramid_levels: 2, ..DemonsConfig::default() };
    assert!(demons_register(&a, &a, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn demons_never_increases_mse(seed in 0u64..1000, other in 0u64..1000) {
        let (fixed, _) = common::smooth_phantom(seed, 16);
        let (moving, _) = common::smooth_phantom(other + 1000, 16);
        let cfg = DemonsConfig { iterations: vec![10, 10, 5], ..DemonsConfig::default() };
        let (field, warped) = demons_register(&fixed, &moving, &cfg).unwrap();
        prop_assert!(metrics::mse(&warped, &fixed).unwrap() <= metrics::mse(&moving, &fixed).unwrap());
        prop_assert!(field.is_finite());
    }
}

#[test]
fn prior_report_is_consistent() {
    let spec = PhantomSpec { size: 16, ..PhantomSpec::default() };
    let atlas = generate_atlas(8, &spec, 77).unwrap();
    let (query, _) = common::smooth_phantom(3, 16);
    let (prior, index, rep) = generate_prior(&query, &atlas, &DemonsConfig::default()).unwrap();
    assert_eq!(index, atlas_match(&query, &atlas).unwrap().index);
    assert_eq!(rep.matched_index, index);
    assert_eq!(rep.matched_id, atlas.id(index));
    assert_eq!(prior.dims(), query.dims());
    assert!(rep.registered_mse <= rep.matched_mse);
    assert!(rep.registered_psnr >= rep.matched_psnr);
    assert!((rep.registered_mse - metrics::mse(&prior, &query).unwrap()).abs() < 1e-12);
    let text = rep.to_string();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with(&format!("matched_index={index}\nmatched_id={}\n", atlas.id(index))));
}
