//! Synthetic torso phantoms and low-count degradation.
//!
//! A phantom is an ellipsoidal body with two lungs, a spine rod, a few rib
//! arcs and optional hot lesions, drawn in a normalised `[-1, 1]³` frame and
//! rasterised on a cubic grid. Tissues carry 511 keV attenuation values and
//! a relative tracer uptake. [`degrade`] turns a ground-truth pair into the
//! noisy, smoothed activity/attenuation estimates a joint reconstruction
//! would give at reduced counts.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{contract_err, Error, Result};
use crate::ppgm::AtlasDataset;
use crate::rng;
use crate::volume::{gaussian_smooth, normalize_mu, smooth_buffer, Volume3D, VolumeKind, FWHM_PER_SIGMA};

pub const MU_SOFT: f64 = 0.096;
pub const MU_LUNG: f64 = 0.03;
pub const MU_BONE_MIN: f64 = 0.13;
pub const MU_BONE_MAX: f64 = 0.15;

/// Count fractions used throughout: full, 10 % and 2.5 %.
pub const COUNT_FRACTIONS: [f64; 3] = [1.0, 0.10, 0.025];

/// Tissue labels of the rasterised phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Soft = 1,
    Lung = 2,
    Bone = 3,
    Lesion = 4,
}

/// Closed interval a parameter is drawn from.
pub type Range = (f64, f64);

/// Anatomy and grid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Cubic grid extent; a multiple of 4.
    pub size: usize,
    pub spacing_mm: f32,
    /// Body semi-axes (x, y, z) as fractions of the half-extent.
    pub body_axes: [Range; 3],
    /// Largest offset of the body centre in x and y.
    pub body_shift: f64,
    /// Lung centre distance from the midline and semi-axes, relative to the body.
    pub lung_offset: Range,
    pub lung_axes: [Range; 3],
    pub spine_radius: Range,
    pub ribs: (usize, usize),
    pub rib_thickness: f64,
    pub lesions: (usize, usize),
    pub lesion_radius: Range,
    pub mu_bone: Range,
    pub uptake_soft: f64,
    pub uptake_lung: f64,
    pub uptake_bone: f64,
    pub uptake_lesion: Range,
    /// FWHM of the edge softening, in voxels.
    pub edge_fwhm_vox: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 32,
            spacing_mm: 2.0,
            body_axes: [(0.70, 0.82), (0.52, 0.66), (0.78, 0.86)],
            body_shift: 0.04,
            lung_offset: (0.38, 0.46),
            lung_axes: [(0.24, 0.32), (0.50, 0.62), (0.55, 0.70)],
            spine_radius: (0.08, 0.11),
            ribs: (2, 4),
            rib_thickness: 0.07,
            lesions: (0, 2),
            lesion_radius: (0.07, 0.11),
            mu_bone: (MU_BONE_MIN, MU_BONE_MAX),
            uptake_soft: 1.0,
            uptake_lung: 0.25,
            uptake_bone: 0.6,
            uptake_lesion: (3.0, 5.0),
            edge_fwhm_vox: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.size % 4 != 0 {
            return Err(Error::Config(format!("phantom size {} must be a multiple of 4 and at least 8", self.size)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::Config(format!("spacing {} must be positive", self.spacing_mm)));
        }
        let ranges = self
            .body_axes
            .iter()
            .chain(&self.lung_axes)
            .chain([&self.lung_offset, &self.spine_radius, &self.lesion_radius, &self.mu_bone, &self.uptake_lesion]);
        for &(lo, hi) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("invalid range ({lo}, {hi})")));
            }
        }
        if self.ribs.0 > self.ribs.1 || self.lesions.0 > self.lesions.1 {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        if self.mu_bone.1 > MU_BONE_MAX {
            return Err(Error::Config(format!("bone attenuation {} exceeds {MU_BONE_MAX}", self.mu_bone.1)));
        }
        // the body must fit with a one-voxel margin so the edge stays on the grid
        let margin = 2.0 / self.size as f64;
        for (i, &(_, hi)) in self.body_axes.iter().enumerate() {
            let shift = if i < 2 { self.body_shift } else { 0.0 };
            if hi + shift > 1.0 - margin {
                return contract_err(format!("body semi-axis {hi} with shift {shift} leaves the grid on axis {i}"));
            }
        }
        Ok(())
    }
}

/// A rasterised phantom with its tissue labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub mu: Volume3D,
    pub activity: Volume3D,
    pub labels: Vec<Tissue>,
}

impl Phantom {
    /// Voxels inside the body outline.
    pub fn body_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&t| t != Tissue::Background).collect()
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.c[i]) / self.r[i]).powi(2)).sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Rasterises one phantom drawn from `rng`.
pub fn phantom_from_rng<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.size;
    let shift = [rng.gen_range(-spec.body_shift..=spec.body_shift), rng.gen_range(-spec.body_shift..=spec.body_shift), 0.0];
    let body = Ellipsoid { c: shift, r: spec.body_axes.map(|r| draw(rng, r)) };
    let lung_off = draw(rng, spec.lung_offset) * body.r[0];
    let lung_r = [draw(rng, spec.lung_axes[0]) * body.r[0], draw(rng, spec.lung_axes[1]) * body.r[1], draw(rng, spec.lung_axes[2]) * body.r[2]];
    let lung_dz = rng.gen_range(0.0..0.15) * body.r[2];
    let lungs = [-1.0, 1.0].map(|s| Ellipsoid {
        c: [body.c[0] + s * lung_off, body.c[1] + 0.08 * body.r[1], body.c[2] + lung_dz],
        r: lung_r,
    });
    let spine_r = draw(rng, spec.spine_radius);
    let spine_c = [body.c[0], body.c[1] - body.r[1] + spine_r + 0.06];
    let mu_bone = draw(rng, spec.mu_bone);
    let n_ribs = rng.gen_range(spec.ribs.0..=spec.ribs.1);
    let ribs: Vec<f64> = (0..n_ribs)
        .map(|i| {
            let frac = (i as f64 + 0.5) / n_ribs as f64;
            body.c[2] + (frac * 1.2 - 0.6) * body.r[2] + rng.gen_range(-0.03..0.03)
        })
        .collect();
    let rib_half = spec.rib_thickness / 2.0;
    let n_lesions = rng.gen_range(spec.lesions.0..=spec.lesions.1);
    let mut lesions = Vec::with_capacity(n_lesions);
    while lesions.len() < n_lesions {
        let r = draw(rng, spec.lesion_radius);
        let c = [
            body.c[0] + rng.gen_range(-0.6..0.6) * body.r[0],
            body.c[1] + rng.gen_range(-0.5..0.5) * body.r[1],
            body.c[2] + rng.gen_range(-0.6..0.6) * body.r[2],
        ];
        // keep lesions well inside the body
        let inner = Ellipsoid { c: body.c, r: body.r.map(|a| (a - r - 0.04).max(1e-3)) };
        if inner.contains(c) {
            lesions.push((Ellipsoid { c, r: [r; 3] }, draw(rng, spec.uptake_lesion)));
        }
    }

    let mut mu = vec![0f64; n * n * n];
    let mut act = vec![0f64; n * n * n];
    let mut labels = vec![Tissue::Background; n * n * n];
    let coord = |i: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [coord(x), coord(y), coord(z)];
                if !body.contains(p) {
                    continue;
                }
                let i = (z * n + y) * n + x;
                let (mut m, mut a, mut t) = (MU_SOFT, spec.uptake_soft, Tissue::Soft);
                if lungs.iter().any(|l| l.contains(p)) {
                    (m, a, t) = (MU_LUNG, spec.uptake_lung, Tissue::Lung);
                }
                let in_spine = (p[0] - spine_c[0]).hypot(p[1] - spine_c[1]) <= spine_r;
                let ring = ((p[0] - body.c[0]) / body.r[0]).hypot((p[1] - body.c[1]) / body.r[1]);
                let anterior = p[1] - body.c[1] > 0.55 * body.r[1];
                let in_rib = !anterior
                    && (ring - (1.0 - 1.6 * rib_half)).abs() <= rib_half
                    && ribs.iter().any(|&rz| (p[2] - rz).abs() <= rib_half);
                if in_spine || in_rib {
                    (m, a, t) = (mu_bone, spec.uptake_bone, Tissue::Bone);
                }
                if let Some((_, up)) = lesions.iter().find(|(e, _)| e.contains(p)) {
                    (m, a, t) = (MU_SOFT, *up, Tissue::Lesion);
                }
                mu[i] = m;
                act[i] = a;
                labels[i] = t;
            }
        }
    }
    let sigma = spec.edge_fwhm_vox / FWHM_PER_SIGMA;
    smooth_buffer(&mut mu, [n; 3], [sigma; 3]);
    smooth_buffer(&mut act, [n; 3], [sigma; 3]);
    let spacing = [spec.spacing_mm; 3];
    Ok(Phantom {
        mu: Volume3D::from_f64([n; 3], spacing, VolumeKind::Mu, &mu)?,
        activity: Volume3D::from_f64([n; 3], spacing, VolumeKind::Activity, &act)?,
        labels,
    })
}

/// Phantom determined by `spec.seed`.
pub fn generate_phantom_labeled(spec: &PhantomSpec) -> Result<Phantom> {
    phantom_from_rng(spec, &mut rng::stream(spec.seed, "phantom"))
}

/// Ground-truth `(μ, λ)` pair determined by `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Volume3D)> {
    let p = generate_phantom_labeled(spec)?;
    Ok((p.mu, p.activity))
}

/// Noise model of [`degrade`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    /// Expected total counts at full dose; infinite means noiseless.
    pub full_counts: f64,
    /// Attenuation noise amplitude at full counts (cm⁻¹).
    pub mu_noise: f64,
    /// Activity-to-attenuation crosstalk amplitude (cm⁻¹).
    pub crosstalk: f64,
    /// Post-smoothing FWHM of the activity estimate (mm).
    pub fwhm_mm: f64,
    /// Post-smoothing FWHM of the attenuation estimate (mm).
    pub mu_fwhm_mm: f64,
    /// Correlation FWHM of the attenuation noise, in voxels.
    pub noise_fwhm_vox: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self { full_counts: 4e6, mu_noise: 0.0015, crosstalk: 0.002, fwhm_mm: 5.0, mu_fwhm_mm: 2.0, noise_fwhm_vox: 2.0 }
    }
}

impl DegradeParams {
    pub fn noiseless() -> Self {
        Self { full_counts: f64::INFINITY, mu_noise: 0.0, crosstalk: 0.0, ..Self::default() }
    }
}

/// Low-count activity and attenuation estimates `(λ_mlaa, μ_mlaa)`.
pub fn degrade(mu_gt: &Volume3D, lambda_gt: &Volume3D, count_fraction: f64, seed: u64, params: &DegradeParams) -> Result<(Volume3D, Volume3D)> {
    if !(count_fraction > 0.0 && count_fraction <= 1.0) {
        return contract_err(format!("count fraction {count_fraction} must lie in (0, 1]"));
    }
    if mu_gt.dims() != lambda_gt.dims() {
        return Err(Error::Shape(format!("μ dims {:?} differ from λ dims {:?}", mu_gt.dims(), lambda_gt.dims())));
    }
    if mu_gt.kind() != VolumeKind::Mu || lambda_gt.kind() != VolumeKind::Activity {
        return contract_err("degrade expects a μ-map and an activity volume");
    }
    let total = lambda_gt.sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("activity volume has no counts".into()));
    }
    let mut rng = rng::stream(seed, "degrade");
    let dims = mu_gt.dims();
    let spacing = mu_gt.spacing();

    let lam = lambda_gt.to_f64();
    let noisy: Vec<f64> = if params.full_counts.is_finite() {
        let expected = params.full_counts * count_fraction;
        let counts: Vec<f64> = lam
            .iter()
            .map(|&v| {
                let rate = v / total * expected;
                if rate > 0.0 {
                    Poisson::new(rate).map(|d| d.sample(&mut rng)).unwrap_or(rate)
                } else {
                    0.0
                }
            })
            .collect();
        let sum: f64 = counts.iter().sum();
        let scale = if sum > 0.0 { total / sum } else { 0.0 };
        counts.iter().map(|c| c * scale).collect()
    } else {
        lam
    };
    let lambda_mlaa = gaussian_smooth(&Volume3D::from_f64(dims, spacing, VolumeKind::Activity, &noisy)?, params.fwhm_mm)?;

    let mut mu = mu_gt.to_f64();
    if params.crosstalk != 0.0 {
        let mean = lambda_mlaa.mean();
        if mean > 0.0 {
            for (m, &l) in mu.iter_mut().zip(lambda_mlaa.data()) {
                *m += params.crosstalk * f64::from(l) / mean;
            }
        }
    }
    let mut mu_mlaa = gaussian_smooth(&Volume3D::from_f64(dims, spacing, VolumeKind::Mu, &mu)?, params.mu_fwhm_mm)?.to_f64();
    if params.mu_noise != 0.0 {
        let mut noise: Vec<f64> = (0..mu.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let s = params.noise_fwhm_vox / FWHM_PER_SIGMA;
        smooth_buffer(&mut noise, dims, [s; 3]);
        let n = noise.len() as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let amp = params.mu_noise / count_fraction.sqrt() / std.max(f64::MIN_POSITIVE);
        for (m, v) in mu_mlaa.iter_mut().zip(&noise) {
            *m += amp * (v - mean);
        }
    }
    Ok((lambda_mlaa, Volume3D::from_f64(dims, spacing, VolumeKind::Mu, &mu_mlaa)?))
}

/// A phantom with its degraded estimates at several count fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub phantom: Phantom,
    /// `(fraction, λ_mlaa, μ_mlaa)` in the order the fractions were given.
    pub degraded: Vec<(f64, Volume3D, Volume3D)>,
}

/// Case `index` of the `phantom` sub-stream of `spec.seed`.
///
/// All fractions share one noise seed, so lower counts scale the same noise
/// pattern up rather than drawing a new one.
pub fn synthetic_case(index: u64, spec: &PhantomSpec, fractions: &[f64], params: &DegradeParams) -> Result<SyntheticCase> {
    let phantom = phantom_from_rng(spec, &mut rng::indexed_stream(spec.seed, "phantom", index))?;
    let noise_seed: u64 = rng::indexed_stream(spec.seed, "noise", index).gen();
    let degraded = fractions
        .iter()
        .map(|&f| degrade(&phantom.mu, &phantom.activity, f, noise_seed, params).map(|(l, m)| (f, l, m)))
        .collect::<Result<_>>()?;
    Ok(SyntheticCase { phantom, degraded })
}

/// `n` normalised μ-maps drawn from the `atlas` sub-stream of `seed`, with ids `0000`, `0001`, ...
pub fn generate_atlas(n: usize, spec: &PhantomSpec, seed: u64) -> Result<AtlasDataset> {
    if n == 0 {
        return contract_err("atlas needs at least one entry");
    }
    let width = n.to_string().len().max(4);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let p = phantom_from_rng(spec, &mut rng::indexed_stream(seed, "atlas", i as u64))?;
        entries.push((format!("{i:0width$}"), normalize_mu(&p.mu)?));
    }
    AtlasDataset::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_validates() {
        PhantomSpec::default().validate().unwrap();
        assert!(PhantomSpec { size: 30, ..PhantomSpec::default() }.validate().is_err());
        let too_big = PhantomSpec { body_axes: [(0.9, 0.99), (0.5, 0.6), (0.8, 0.9)], ..PhantomSpec::default() };
        assert!(matches!(too_big.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn degrade_rejects_bad_fraction() {
        let (mu, lam) = generate_phantom(&PhantomSpec { size: 16, ..PhantomSpec::default() }).unwrap();
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(degrade(&mu, &lam, f, 0, &DegradeParams::default()).is_err());
        }
    }
}
