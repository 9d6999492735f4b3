use std::path::Path;

use pournet::cascade::*;
use pournet::ournet::{init_params, OurNetConfig};
use pournet::phantom::{degrade, generate_atlas, generate_phantom, DegradeParams, PhantomSpec};
use pournet::ppgm::generate_prior;
use pournet::rng;
use pournet::{Volume3D, VolumeKind};
use proptest::prelude::*;

fn tiny_net() -> OurNetConfig {
    OurNetConfig { base_channels: 2, frb_rseb_count: 1, se_reduction: 1, ..OurNetConfig::default() }
}

fn case(seed: u64, size: usize) -> Case {
    let (mu, lam) = generate_phantom(&PhantomSpec { seed, size, ..PhantomSpec::default() }).unwrap();
    let (l, m) = degrade(&mu, &lam, 0.1, seed, &DegradeParams::default()).unwrap();
    Case::new(format!("c{seed}"), CaseInputs::new(l, m).unwrap(), mu).unwrap()
}

fn small_cfg(n: usize) -> CascadeConfig {
    let mut cfg = CascadeConfig::uniform(n, tiny_net());
    cfg.train = TrainSettings { steps: 3, batch_size: 2, patches_per_volume: 4, patch_size: 8, ..TrainSettings::default() };
    cfg.demons.iterations = vec![5, 5, 5];
    cfg
}

#[test]
fn patch_corners_are_uniform() {
    // 9 admissible positions per axis; chi-square with 8 degrees of freedom
    let (dims, size, n) = ([12, 12, 12], [4, 4, 4], 9000);
    let corners = patch_corners(dims, n, size, &mut rng::stream(3, "patches")).unwrap();
    const CRITICAL_8DOF_P001: f64 = 26.12;
    for axis in 0..3 {
        let mut counts = [0usize; 9];
        for c in &corners {
            counts[c[axis]] += 1;
        }
        let expected = n as f64 / 9.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CRITICAL_8DOF_P001, "axis {axis}: chi2 {chi2} counts {counts:?}");
    }
    assert!(patch_corners(dims, 1, [13, 4, 4], &mut rng::stream(3, "patches")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn patches_are_aligned_crops(seed in any::<u64>(), size in 1usize..6) {
        let dims = [7, 6, 9];
        let mk = |k: f32| Volume3D::new(dims, [2.0; 3], VolumeKind::Mu, (0..378).map(|i| i as f32 + k * 1000.0).collect()).unwrap();
        let (a, b) = (mk(0.0), mk(1.0));
        let patches = patch_sampler(&[&a, &b], 5, size, seed).unwrap();
        prop_assert_eq!(&patches, &patch_sampler(&[&a, &b], 5, size, seed).unwrap());
        for p in &patches {
            let c = p.corner;
            prop_assert!((0..3).all(|ax| c[ax] + size <= dims[ax]));
            let mut k = 0;
            for z in 0..size {
                for y in 0..size {
                    for x in 0..size {
                        prop_assert_eq!(p.volumes[0][k], a.get(c[0] + x, c[1] + y, c[2] + z));
                        prop_assert_eq!(p.volumes[1][k], p.volumes[0][k] + 1000.0);
                        k += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn patch_sampler_checks_its_inputs() {
    let a = Volume3D::filled([8, 8, 8], [2.0; 3], VolumeKind::Mu, 0.0).unwrap();
    let b = Volume3D::filled([8, 8, 4], [2.0; 3], VolumeKind::Mu, 0.0).unwrap();
    assert!(patch_sampler(&[], 1, 4, 0).is_err());
    assert!(patch_sampler(&[&a, &b], 1, 4, 0).is_err());
    let corners = |seed| patch_sampler(&[&a], 8, 4, seed).unwrap().into_iter().map(|p| p.corner).collect::<Vec<_>>();
    assert_ne!(corners(0), corners(1));
}

#[test]
fn sliding_with_a_volume_sized_window_equals_whole_inference() {
    let c = case(1, 16);
    let net = OurNetConfig { in_channels: 2, ..tiny_net() };
    let params = init_params::<f32>(&net, 5).unwrap();
    let whole = infer_volume(&c.inputs, None, &params, &net).unwrap();
    assert_eq!(whole.kind(), VolumeKind::MuNormalized);
    assert_eq!(infer_sliding(&c.inputs, None, &params, &net, 16, 8).unwrap(), whole);
    assert_eq!(infer_sliding(&c.inputs, None, &params, &net, 32, 8).unwrap(), whole);
}

#[test]
fn disjoint_windows_tile_the_volume() {
    let c = case(2, 16);
    let net = OurNetConfig { in_channels: 2, ..tiny_net() };
    let params = init_params::<f32>(&net, 6).unwrap();
    let tiled = infer_sliding(&c.inputs, None, &params, &net, 8, 8).unwrap();
    for corner in [[0, 0, 0], [8, 0, 8], [8, 8, 8]] {
        let sub = |v: &Volume3D| Volume3D::new([8; 3], v.spacing(), v.kind(), crop(v.data(), [16; 3], corner, [8; 3])).unwrap();
        let inputs = CaseInputs::new(sub(&c.inputs.lambda), sub(&c.inputs.mu_mlaa)).unwrap();
        let want = infer_volume(&inputs, None, &params, &net).unwrap();
        assert_eq!(crop(tiled.data(), [16; 3], corner, [8; 3]), want.data());
    }
}

#[test]
fn volumes_off_the_multiple_of_four_grid_are_padded() {
    let (mu, lam) = generate_phantom(&PhantomSpec { size: 16, ..PhantomSpec::default() }).unwrap();
    let cut = |v: &Volume3D| Volume3D::new([14, 16, 15], v.spacing(), v.kind(), crop(v.data(), [16; 3], [1, 0, 0], [14, 16, 15])).unwrap();
    let inputs = CaseInputs::new(cut(&lam), cut(&mu)).unwrap();
    let net = OurNetConfig { in_channels: 2, ..tiny_net() };
    let params = init_params::<f32>(&net, 7).unwrap();
    let out = infer_volume(&inputs, None, &params, &net).unwrap();
    assert_eq!(out.dims(), [14, 16, 15]);
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn single_stage_cascade_is_plain_inference() {
    let c = case(3, 16);
    let cfg = small_cfg(1);
    let params = init_params::<f32>(&cfg.stages[0], 8).unwrap();
    let atlas = generate_atlas(4, &PhantomSpec { size: 16, ..PhantomSpec::default() }, 1).unwrap();
    let out = run_pour(&c.inputs, std::slice::from_ref(&params), &atlas, &cfg).unwrap();
    assert_eq!(out.mu, infer_volume(&c.inputs, None, &params, &cfg.stages[0]).unwrap());
    assert!(out.priors.is_empty() && out.reports.is_empty());
}

#[test]
fn second_stage_sees_the_registered_prior() {
    let c = case(4, 16);
    let cfg = small_cfg(2);
    let stages = vec![init_params::<f32>(&cfg.stages[0], 9).unwrap(), init_params::<f32>(&cfg.stages[1], 10).unwrap()];
    let atlas = generate_atlas(4, &PhantomSpec { size: 16, ..PhantomSpec::default() }, 1).unwrap();
    let out = run_pour(&c.inputs, &stages, &atlas, &cfg).unwrap();
    assert_eq!(out.stage_outputs.len(), 2);
    let (prior, _, report) = generate_prior(&out.stage_outputs[0], &atlas, &cfg.demons).unwrap();
    assert_eq!(out.priors, vec![prior.clone()]);
    assert_eq!(out.reports, vec![report]);
    assert_eq!(out.mu, infer_volume(&c.inputs, Some(&prior), &stages[1], &cfg.stages[1]).unwrap());
    assert!(run_pour(&c.inputs, &[], &atlas, &cfg).is_err());
    assert!(run_pour(&c.inputs, &[stages[0].clone(), stages[1].clone(), stages[1].clone()], &atlas, &cfg).is_err());
}

#[test]
fn later_stages_refuse_to_train_without_priors() {
    let c = case(5, 16);
    let cfg = small_cfg(2);
    let material = [StageCase { case: &c, prior: None }];
    assert!(Trainer::new(2, &material, &cfg).is_err());
    assert!(Trainer::new(3, &material, &cfg).is_err());
    assert!(Trainer::new(0, &material, &cfg).is_err());
    assert!(Trainer::new(1, &[], &cfg).is_err());
    let prior = c.mu_gt.clone();
    assert!(Trainer::new(2, &[StageCase { case: &c, prior: Some(&prior) }], &cfg).is_ok());
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let cases = [case(6, 16), case(7, 16)];
    let material: Vec<StageCase> = cases.iter().map(|case| StageCase { case, prior: None }).collect();
    let cfg = small_cfg(1);
    let (pa, la) = train_stage(1, &material, &cfg).unwrap();
    let (pb, lb) = train_stage(1, &material, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
    assert_eq!(la.losses.len(), 3);
    assert_eq!(la.to_string().lines().next().unwrap(), format!("1\t{:.8e}", la.losses[0]));
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(train_stage(1, &material, &other).unwrap().1, la);
}

#[test]
fn cascade_training_writes_checkpoints_logs_and_cached_priors() {
    let cases = [case(8, 16), case(9, 16)];
    let atlas = generate_atlas(4, &PhantomSpec { size: 16, ..PhantomSpec::default() }, 2).unwrap();
    let cfg = small_cfg(2);
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let (stages, logs) = train_cascade(&cases, &atlas, &cfg, Some(dir.path()), &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!((stages.len(), logs.len()), (2, 2));
    assert_eq!(lines.len(), 3);
    for k in 1..=2 {
        assert!(dir.path().join(checkpoint_name(k)).exists());
        assert_eq!(std::fs::read_to_string(dir.path().join(format!("stage{k}.log"))).unwrap(), logs[k - 1].to_string());
    }
    assert_eq!(load_stages(dir.path(), 2).unwrap(), stages);
    let cached = dir.path().join("priors").join("stage2").join("c8.vvol");
    assert!(cached.exists());

    // a second call reads the cache instead of recomputing
    let marker = Volume3D::filled([16; 3], [2.0; 3], VolumeKind::MuNormalized, 0.25).unwrap();
    pournet::volume::write_volume(&marker, &cached).unwrap();
    let priors = stage_priors(2, &cases, &stages, &atlas, &cfg, Some(&dir.path().join("priors"))).unwrap();
    assert_eq!(priors[0], marker);
    assert_ne!(priors[1], marker);
    assert!(stage_priors(1, &cases, &stages, &atlas, &cfg, None).is_err());
}

#[test]
fn manifest_round_trips_and_names_cases_by_folder() {
    let text = "case_0001/lambda_mlaa_f0.1.vvol\tcase_0001/mu_mlaa_f0.1.vvol\tcase_0001/mu_gt.vvol\ttrain\n\
                /abs/case_0002/l.vvol\t/abs/case_0002/m.vvol\t/abs/case_0002/g.vvol\ttest\n";
    let m = TrainingManifest::parse(&format!("# header\n\n{text}"), Path::new("/data")).unwrap();
    assert_eq!(m.records.len(), 2);
    assert_eq!(m.records[0].lambda, Path::new("/data/case_0001/lambda_mlaa_f0.1.vvol"));
    assert_eq!(m.records[0].id(), "case_0001");
    assert_eq!(m.records[1].id(), "case_0002");
    assert_eq!(m.split(Split::Test).count(), 1);
    assert_eq!(TrainingManifest::parse(&m.to_text(), Path::new("/elsewhere")).unwrap(), m);
    assert!(TrainingManifest::parse("a\tb\tc\n", Path::new("/")).is_err());
    assert!(TrainingManifest::parse("a\tb\tc\tholdout\n", Path::new("/")).is_err());
}

#[test]
fn manifest_cases_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (mu, lam) = generate_phantom(&PhantomSpec { size: 16, ..PhantomSpec::default() }).unwrap();
    let (l, m) = degrade(&mu, &lam, 0.1, 0, &DegradeParams::default()).unwrap();
    let folder = dir.path().join("case_0007");
    std::fs::create_dir(&folder).unwrap();
    for (name, v) in [("lambda.vvol", &l), ("mu_mlaa.vvol", &m), ("mu_gt.vvol", &mu)] {
        pournet::volume::write_volume(v, folder.join(name)).unwrap();
    }
    let path = dir.path().join("manifest.tsv");
    std::fs::write(&path, "case_0007/lambda.vvol\tcase_0007/mu_mlaa.vvol\tcase_0007/mu_gt.vvol\tval\n").unwrap();
    let cases = TrainingManifest::load(&path).unwrap().load_cases(Split::Val).unwrap();
    assert_eq!(cases.len(), 1);
    assert_eq!(cases[0].id, "case_0007");
    assert_eq!(cases[0].inputs, CaseInputs::new(l, m).unwrap());
    assert_eq!(cases[0].mu_gt.kind(), VolumeKind::MuNormalized);
}

#[test]
fn case_inputs_reject_wrong_kinds_and_shapes() {
    let (mu, lam) = generate_phantom(&PhantomSpec { size: 16, ..PhantomSpec::default() }).unwrap();
    assert!(CaseInputs::new(mu.clone(), lam.clone()).is_err());
    let other = generate_phantom(&PhantomSpec { size: 20, ..PhantomSpec::default() }).unwrap().0;
    assert!(CaseInputs::new(lam.clone(), other.clone()).is_err());
    let inputs = CaseInputs::new(lam, mu).unwrap();
    let wrong_prior = pournet::volume::normalize_mu(&other).unwrap();
    assert!(inputs.channels(Some(&wrong_prior)).is_err());
    assert_eq!(inputs.channels(None).unwrap().len(), 2);
}

#[test]
fn config_truncation_and_validation() {
    let cfg = CascadeConfig::uniform(3, tiny_net());
    assert_eq!(cfg.stages.iter().map(|s| s.in_channels).collect::<Vec<_>>(), vec![2, 3, 3]);
    assert_eq!(cfg.truncated(1).n_cascades(), 1);
    assert_eq!(cfg.truncated(9).n_cascades(), 3);
    let mut bad = cfg.clone();
    bad.inference = Inference::Sliding { window: 8, stride: 12 };
    assert!(bad.validate().is_err());
    assert!(CascadeConfig::uniform(0, tiny_net()).validate().is_err());
}
