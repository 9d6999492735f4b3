use pournet::metrics;
use pournet::phantom::*;
use pournet::volume::{gaussian_smooth, normalize_mu};
use pournet::VolumeKind;
use proptest::prelude::*;

fn spec(seed: u64, size: usize) -> PhantomSpec {
    PhantomSpec { seed, size, ..PhantomSpec::default() }
}

#[test]
fn phantoms_are_deterministic_per_seed() {
    let a = generate_phantom_labeled(&spec(3, 24)).unwrap();
    assert_eq!(a, generate_phantom_labeled(&spec(3, 24)).unwrap());
    assert_ne!(a.mu, generate_phantom_labeled(&spec(4, 24)).unwrap().mu);
    assert_eq!(a.mu.kind(), VolumeKind::Mu);
    assert_eq!(a.activity.kind(), VolumeKind::Activity);
    assert_eq!(a.mu.dims(), [24; 3]);
    assert_eq!(a.mu.spacing(), [2.0; 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tissues_carry_their_attenuation(seed in any::<u64>()) {
        let p = generate_phantom_labeled(&spec(seed, 16)).unwrap();
        let (lo, hi) = p.mu.min_max();
        prop_assert!(lo >= 0.0 && f64::from(hi) <= MU_BONE_MAX + 1e-6);
        prop_assert!(p.activity.min_max().0 >= 0.0);
        let n = 16;
        // corners are always outside the body
        for &i in &[0, n - 1, n * n * n - 1] {
            prop_assert_eq!(p.labels[i], Tissue::Background);
        }
        prop_assert!(p.labels.iter().any(|&t| t == Tissue::Lung));
        prop_assert!(p.labels.iter().any(|&t| t == Tissue::Soft));
        let mask = p.body_mask();
        prop_assert_eq!(mask.len(), p.mu.len());
        prop_assert!(mask.iter().filter(|&&m| m).count() > n * n * n / 8);
    }
}

#[test]
fn tissue_means_sit_near_their_nominal_values() {
    let p = generate_phantom_labeled(&spec(11, 32)).unwrap();
    let mean = |t: Tissue| {
        let v: Vec<f64> = p.labels.iter().zip(p.mu.data()).filter(|(l, _)| **l == t).map(|(_, &m)| f64::from(m)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    // edges are softened, so compare loosely
    assert!((mean(Tissue::Soft) - MU_SOFT).abs() < 0.01);
    assert!((mean(Tissue::Lung) - MU_LUNG).abs() < 0.02);
    assert!(mean(Tissue::Bone) > MU_SOFT);
    assert!(mean(Tissue::Background) < 0.01);
}

#[test]
fn undersized_or_misaligned_grids_are_rejected() {
    assert!(generate_phantom(&spec(0, 30)).is_err());
    assert!(generate_phantom(&spec(0, 4)).is_err());
    assert!(PhantomSpec { spacing_mm: 0.0, ..PhantomSpec::default() }.validate().is_err());
    assert!(PhantomSpec { lesions: (3, 1), ..PhantomSpec::default() }.validate().is_err());
}

#[test]
fn noiseless_degradation_without_crosstalk_is_pure_smoothing() {
    let (mu, lam) = generate_phantom(&spec(2, 16)).unwrap();
    let params = DegradeParams::noiseless();
    let (l, m) = degrade(&mu, &lam, 0.1, 9, &params).unwrap();
    assert_eq!(l, gaussian_smooth(&lam, params.fwhm_mm).unwrap());
    assert_eq!(m, gaussian_smooth(&mu, params.mu_fwhm_mm).unwrap());
    // without noise the count fraction has no effect
    assert_eq!(degrade(&mu, &lam, 0.025, 1, &params).unwrap(), (l, m));
}

#[test]
fn degradation_is_seeded_and_keeps_activity_mass() {
    let (mu, lam) = generate_phantom(&spec(2, 16)).unwrap();
    let p = DegradeParams::default();
    let a = degrade(&mu, &lam, 0.1, 5, &p).unwrap();
    assert_eq!(a, degrade(&mu, &lam, 0.1, 5, &p).unwrap());
    assert_ne!(a, degrade(&mu, &lam, 0.1, 6, &p).unwrap());
    assert!((a.0.sum() - lam.sum()).abs() < 1e-3 * lam.sum());
    assert!(degrade(&lam, &mu, 0.1, 5, &p).is_err());
}

#[test]
fn fewer_counts_give_worse_attenuation_estimates() {
    for index in 0..4 {
        let case = synthetic_case(index, &spec(21, 32), &COUNT_FRACTIONS, &DegradeParams::default()).unwrap();
        let gt = normalize_mu(&case.phantom.mu).unwrap();
        let rmse: Vec<f64> = case
            .degraded
            .iter()
            .map(|(_, _, m)| metrics::rmse(&normalize_mu(m).unwrap(), &gt).unwrap())
            .collect();
        assert!(rmse[0] < rmse[1] && rmse[1] < rmse[2], "case {index}: {rmse:?}");
    }
}

#[test]
fn synthetic_cases_are_indexed_and_share_noise_across_fractions() {
    let s = spec(8, 16);
    let p = DegradeParams::default();
    let a = synthetic_case(2, &s, &[0.1, 0.025], &p).unwrap();
    assert_eq!(a, synthetic_case(2, &s, &[0.1, 0.025], &p).unwrap());
    assert_ne!(a.phantom, synthetic_case(3, &s, &[0.1], &p).unwrap().phantom);
    assert_eq!(a.degraded.iter().map(|d| d.0).collect::<Vec<_>>(), vec![0.1, 0.025]);

    // with crosstalk and Poisson noise off, μ noise at 2.5 % is exactly twice that at 10 %
    let gauss_only = DegradeParams { full_counts: f64::INFINITY, crosstalk: 0.0, ..p };
    let b = synthetic_case(2, &s, &[0.1, 0.025], &gauss_only).unwrap();
    let clean = gaussian_smooth(&b.phantom.mu, gauss_only.mu_fwhm_mm).unwrap();
    let resid = |m: &pournet::Volume3D| -> Vec<f64> { m.data().iter().zip(clean.data()).map(|(a, c)| f64::from(a - c)).collect() };
    let (r10, r25) = (resid(&b.degraded[0].2), resid(&b.degraded[1].2));
    for (x, y) in r10.iter().zip(&r25) {
        assert!((2.0 * x - y).abs() < 1e-5, "{x} {y}");
    }
}

#[test]
fn atlas_entries_are_normalised_and_distinct() {
    let atlas = generate_atlas(6, &spec(0, 16), 42).unwrap();
    assert_eq!(atlas.len(), 6);
    assert_eq!(atlas.id(0), "0000");
    assert!(atlas.iter().all(|(_, v)| v.kind() == VolumeKind::MuNormalized));
    assert_ne!(atlas.volume(0), atlas.volume(1));
    assert_eq!(atlas, generate_atlas(6, &spec(99, 16), 42).unwrap());
    assert!(generate_atlas(0, &spec(0, 16), 42).is_err());
}
