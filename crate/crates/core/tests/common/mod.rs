#![allow(dead_code)]

pub mod oracle;

use pournet::phantom::{generate_phantom_labeled, PhantomSpec, Tissue};
use pournet::ppgm::{warp, DeformationField};
use pournet::volume::{gaussian_smooth, normalize_mu};
use pournet::Volume3D;

/// Normalised μ-map of phantom `seed`, blurred so that registration sees gradients everywhere.
pub fn smooth_phantom(seed: u64, size: usize) -> (Volume3D, Vec<bool>) {
    let p = generate_phantom_labeled(&PhantomSpec { seed, size, ..PhantomSpec::default() }).unwrap();
    let mu = gaussian_smooth(&normalize_mu(&p.mu).unwrap(), 6.0).unwrap();
    let body = p.labels.iter().map(|&t| t != Tissue::Background).collect();
    (mu, body)
}

/// Body voxels at least `margin` voxels from every face.
pub fn interior(body: &[bool], dims: [usize; 3], margin: usize) -> Vec<usize> {
    (0..body.len())
        .filter(|&i| {
            let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            body[i] && (0..3).all(|a| p[a] >= margin && p[a] + margin < dims[a])
        })
        .collect()
}

/// Builds `moving` such that `moving(x + u(x)) = fixed(x)` for the field `f`,
/// by warping `fixed` with the fixed-point inverse of `f`.
pub fn moving_for(fixed: &Volume3D, f: impl Fn([f64; 3]) -> [f64; 3]) -> (Volume3D, DeformationField) {
    let dims = fixed.dims();
    let truth = DeformationField::from_fn(dims, |x, y, z| f([x as f64, y as f64, z as f64]));
    let mut inv = DeformationField::zeros(dims);
    for _ in 0..50 {
        inv = DeformationField::from_fn(dims, |x, y, z| {
            let d = inv.at(x + dims[0] * (y + dims[1] * z));
            let q = f([x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]);
            [-q[0], -q[1], -q[2]]
        });
    }
    (warp(fixed, &inv).unwrap(), truth)
}

/// Mean endpoint error over `voxels`.
pub fn endpoint_error(field: &DeformationField, truth: &DeformationField, voxels: &[usize]) -> f64 {
    voxels
        .iter()
        .map(|&i| {
            let (a, b) = (field.at(i), truth.at(i));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / voxels.len() as f64
}
