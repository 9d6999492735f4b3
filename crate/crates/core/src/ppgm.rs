//! Population-prior generation.
//!
//! A predicted μ-map is compared against every entry of an atlas of
//! reference μ-maps; the closest entry (smallest mean squared error, lowest
//! index on ties) is then deformed onto the prediction with diffeomorphic
//! demons and returned as the prior for the next cascade stage.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::metrics;
use crate::volume::{read_volume, resample_to, sample_trilinear, smooth_buffer, write_volume, Volume3D, VolumeKind};

/// Reference μ-maps ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasDataset {
    entries: Vec<(String, Volume3D)>,
}

impl AtlasDataset {
    /// Sorts entries by id; all must be normalised μ-maps of one shape.
    pub fn new(mut entries: Vec<(String, Volume3D)>) -> Result<Self> {
        if entries.is_empty() {
            return contract_err("atlas is empty");
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let dims = entries[0].1.dims();
        for (id, v) in &entries {
            if v.dims() != dims {
                return shape_err(format!("atlas entry {id} has dims {:?}, expected {dims:?}", v.dims()));
            }
            if v.kind() != VolumeKind::MuNormalized {
                return contract_err(format!("atlas entry {id} is not a normalised μ-map"));
            }
        }
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return contract_err("atlas ids must be unique");
        }
        Ok(Self { entries })
    }

    /// Loads every `.vvol` file of `dir`; ids are file stems.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut entries = Vec::new();
        for e in fs::read_dir(dir)? {
            let path = e?.path();
            if path.extension().and_then(|s| s.to_str()) != Some("vvol") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            entries.push((id, read_volume(&path)?));
        }
        Self::new(entries)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (id, v) in &self.entries {
            write_volume(v, dir.join(format!("{id}.vvol")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.entries[0].1.dims()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn volume(&self, i: usize) -> &Volume3D {
        &self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Volume3D)> {
        self.entries.iter().map(|(id, v)| (id.as_str(), v))
    }
}

/// Outcome of [`atlas_match`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub mse: f64,
}

fn mse_f64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - f64::from(y)).powi(2)).sum::<f64>() / a.len() as f64
}

/// Exhaustive arg-min of the mean squared error over the atlas at its native
/// resolution. `x_f` is resampled to the atlas grid first if needed.
pub fn atlas_match(x_f: &Volume3D, atlas: &AtlasDataset) -> Result<MatchResult> {
    atlas_match_coarse(x_f, atlas, 1)
}

/// As [`atlas_match`], after reducing both sides by `factor` along every axis.
pub fn atlas_match_coarse(x_f: &Volume3D, atlas: &AtlasDataset, factor: usize) -> Result<MatchResult> {
    if atlas.is_empty() {
        return contract_err("atlas is empty");
    }
    if factor == 0 || atlas.dims().iter().any(|&d| d % factor != 0) {
        return contract_err(format!("presample factor {factor} does not divide atlas dims {:?}", atlas.dims()));
    }
    let dims = atlas.dims().map(|d| d / factor);
    let query = resample_to(x_f, dims)?.to_f64();
    let mses: Vec<f64> = (0..atlas.len())
        .into_par_iter()
        .map(|i| {
            let entry = atlas.volume(i);
            if factor == 1 {
                Ok(mse_f64(&query, entry.data()))
            } else {
                Ok(mse_f64(&query, resample_to(entry, dims)?.data()))
            }
        })
        .collect::<Result<_>>()?;
    let mut best = MatchResult { index: 0, mse: mses[0] };
    for (i, &m) in mses.iter().enumerate().skip(1) {
        if m < best.mse {
            best = MatchResult { index: i, mse: m };
        }
    }
    Ok(best)
}

/// Per-voxel displacement in voxel units, x-fastest like [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    dims: [usize; 3],
    /// x, y and z components.
    pub u: [Vec<f64>; 3],
}

impl DeformationField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self { dims, u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn constant(dims: [usize; 3], d: [f64; 3]) -> Self {
        let n = dims.iter().product();
        Self { dims, u: d.map(|c| vec![c; n]) }
    }

    /// Field with `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> [f64; 3]) -> Self {
        let mut out = Self::zeros(dims);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = x + dims[0] * (y + dims[1] * z);
                    let d = f(x, y, z);
                    for a in 0..3 {
                        out.u[a][i] = d[a];
                    }
                }
            }
        }
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.u[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.u[0].is_empty()
    }

    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.u[0][i], self.u[1][i], self.u[2][i]]
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn mean_magnitude(&self) -> f64 {
        (0..self.len()).map(|i| norm(self.at(i))).sum::<f64>() / self.len() as f64
    }

    /// Fraction of interior voxels where `det(I + ∇u) > 0` (central differences).
    pub fn jacobian_positive_fraction(&self) -> f64 {
        let [nx, ny, nz] = self.dims;
        if nx < 3 || ny < 3 || nz < 3 {
            return 1.0;
        }
        let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let (mut pos, mut total) = (0usize, 0usize);
        for z in 1..nz - 1 {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let mut j = [[0.0; 3]; 3];
                    for (a, comp) in self.u.iter().enumerate() {
                        j[a][0] = (comp[idx(x + 1, y, z)] - comp[idx(x - 1, y, z)]) / 2.0;
                        j[a][1] = (comp[idx(x, y + 1, z)] - comp[idx(x, y - 1, z)]) / 2.0;
                        j[a][2] = (comp[idx(x, y, z + 1)] - comp[idx(x, y, z - 1)]) / 2.0;
                        j[a][a] += 1.0;
                    }
                    let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                    total += 1;
                    if det > 0.0 {
                        pos += 1;
                    }
                }
            }
        }
        pos as f64 / total as f64
    }

    /// Resamples onto `dims`, rescaling displacements to the new voxel size.
    pub fn resized(&self, dims: [usize; 3]) -> Result<Self> {
        if dims == self.dims {
            return Ok(self.clone());
        }
        let mut out = Self::zeros(dims);
        for a in 0..3 {
            let v = Volume3D::from_f64(self.dims, [1.0; 3], VolumeKind::Mu, &self.u[a])?;
            let r = resample_to(&v, dims)?;
            let scale = dims[a] as f64 / self.dims[a] as f64;
            out.u[a] = r.data().iter().map(|&x| f64::from(x) * scale).collect();
        }
        Ok(out)
    }

    fn smooth(&mut self, sigma: f64) {
        for c in &mut self.u {
            smooth_buffer(c, self.dims, [sigma; 3]);
        }
    }

    /// `(self ∘ other)(x) = other(x) + self(x + other(x))`.
    fn compose_after(&self, other: &Self) -> Self {
        let [nx, ny, nz] = self.dims;
        let mut out = Self::zeros(self.dims);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let d = other.at(i);
                    let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                    for a in 0..3 {
                        out.u[a][i] = d[a] + sample_trilinear(&self.u[a], self.dims, p);
                    }
                }
            }
        }
        out
    }

    /// `exp(self)` by scaling and squaring.
    fn exponentiate(&self, squarings: u32) -> Self {
        let scale = 0.5f64.powi(squarings as i32);
        let mut v = self.clone();
        for c in &mut v.u {
            c.iter_mut().for_each(|x| *x *= scale);
        }
        for _ in 0..squarings {
            v = v.compose_after(&v);
        }
        v
    }
}

fn norm(d: [f64; 3]) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn warp_buffer(moving: &[f64], dims: [usize; 3], field: &DeformationField) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(moving.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = field.at(x + nx * (y + ny * z));
                out.push(sample_trilinear(moving, dims, [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]));
            }
        }
    }
    out
}

/// `output(x) = moving(x + u(x))`, trilinear, clamped at the border.
pub fn warp(moving: &Volume3D, field: &DeformationField) -> Result<Volume3D> {
    if moving.dims() != field.dims() {
        return shape_err(format!("field dims {:?} differ from volume dims {:?}", field.dims(), moving.dims()));
    }
    let out = warp_buffer(&moving.to_f64(), moving.dims(), field);
    Volume3D::from_f64(moving.dims(), moving.spacing(), moving.kind(), &out)
}

/// Demons registration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonsConfig {
    pub pyramid_levels: usize,
    /// Iterations per level, coarsest first.
    pub iterations: Vec<usize>,
    /// σ (voxels) applied to each update before exponentiation.
    pub fluid_sigma: f64,
    /// σ (voxels) applied to the accumulated field.
    pub diffusion_sigma: f64,
    /// Intensity scale σ_x of the force normalisation.
    pub sigma_x: f64,
    /// A level stops early once the relative MSE change stays below this for 5 iterations.
    pub convergence_tol: f64,
    pub squarings: u32,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            iterations: vec![60, 40, 20],
            fluid_sigma: 1.0,
            diffusion_sigma: 1.5,
            sigma_x: 1.0,
            convergence_tol: 1e-5,
            squarings: 4,
        }
    }
}

impl DemonsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.iterations.len() != self.pyramid_levels {
            return Err(Error::Config(format!(
                "{} iteration counts given for {} pyramid levels",
                self.iterations.len(),
                self.pyramid_levels
            )));
        }
        if self.iterations.iter().any(|&n| n == 0) {
            return Err(Error::Config("iterations must be positive".into()));
        }
        for (name, v) in [("fluid_sigma", self.fluid_sigma), ("diffusion_sigma", self.diffusion_sigma), ("sigma_x", self.sigma_x)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

fn mse_buf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Central-difference gradient (voxel units), one-sided at the border.
fn gradient(img: &[f64], dims: [usize; 3]) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let mut g = [vec![0.0; img.len()], vec![0.0; img.len()], vec![0.0; img.len()]];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let pos = [x, y, z];
                for a in 0..3 {
                    let n = dims[a];
                    if n < 2 {
                        continue;
                    }
                    let lo = if pos[a] > 0 { i - strides[a] } else { i };
                    let hi = if pos[a] + 1 < n { i + strides[a] } else { i };
                    let span = ((pos[a] + 1).min(n - 1) - pos[a].saturating_sub(1)) as f64;
                    g[a][i] = (img[hi] - img[lo]) / span;
                }
            }
        }
    }
    g
}

/// Image pyramid level: block means over `2^level` voxels (dims must divide).
fn downsample(img: &[f64], dims: [usize; 3], f: usize) -> (Vec<f64>, [usize; 3]) {
    if f == 1 {
        return (img.to_vec(), dims);
    }
    let out_dims = dims.map(|d| d / f);
    let [ox, oy, oz] = out_dims;
    let mut out = vec![0.0; ox * oy * oz];
    let w = 1.0 / (f * f * f) as f64;
    for z in 0..oz * f {
        for y in 0..oy * f {
            for x in 0..ox * f {
                out[x / f + ox * (y / f + oy * (z / f))] += w * img[x + dims[0] * (y + dims[1] * z)];
            }
        }
    }
    (out, out_dims)
}

/// One demons iteration at a fixed resolution; returns the new field.
fn demons_step(fixed: &[f64], moving: &[f64], dims: [usize; 3], s: &DeformationField, cfg: &DemonsConfig) -> DeformationField {
    let w = warp_buffer(moving, dims, s);
    let g = gradient(&w, dims);
    let inv_sx2 = 1.0 / (cfg.sigma_x * cfg.sigma_x);
    let mut upd = DeformationField::zeros(dims);
    for i in 0..w.len() {
        let diff = fixed[i] - w[i];
        let g2 = g[0][i] * g[0][i] + g[1][i] * g[1][i] + g[2][i] * g[2][i];
        let denom = g2 + diff * diff * inv_sx2;
        if denom > 1e-12 {
            for a in 0..3 {
                upd.u[a][i] = diff * g[a][i] / denom;
            }
        }
    }
    upd.smooth(cfg.fluid_sigma);
    let v = upd.exponentiate(cfg.squarings);
    let mut next = s.compose_after(&v);
    next.smooth(cfg.diffusion_sigma);
    next
}

/// Diffeomorphic demons: finds `u` with `moving(x + u(x)) ≈ fixed(x)`.
///
/// Returns the field and the warped moving volume. The returned field is the
/// best full-resolution iterate, so the result never has a larger MSE than
/// the unregistered pair.
pub fn demons_register(fixed: &Volume3D, moving: &Volume3D, cfg: &DemonsConfig) -> Result<(DeformationField, Volume3D)> {
    cfg.validate()?;
    if fixed.dims() != moving.dims() {
        return shape_err(format!("fixed dims {:?} differ from moving dims {:?}", fixed.dims(), moving.dims()));
    }
    if !fixed.data().iter().chain(moving.data()).all(|v| v.is_finite()) {
        return contract_err("demons inputs must be finite");
    }
    let dims = fixed.dims();
    let (f_full, m_full) = (fixed.to_f64(), moving.to_f64());
    let identity_mse = mse_buf(&f_full, &m_full);
    let mut best = (identity_mse, DeformationField::zeros(dims));
    let mut field: Option<DeformationField> = None;
    for level in (0..cfg.pyramid_levels).rev() {
        let f = 1usize << level;
        if dims.iter().any(|&d| d % f != 0 || d / f < 4) {
            continue;
        }
        let (fx, ldims) = downsample(&f_full, dims, f);
        let (mv, _) = downsample(&m_full, dims, f);
        let mut s = match field.take() {
            Some(prev) => prev.resized(ldims)?,
            None => DeformationField::zeros(ldims),
        };
        let finest = level == 0;
        let iters = cfg.iterations[cfg.pyramid_levels - 1 - level];
        let mut prev_mse = mse_buf(&fx, &warp_buffer(&mv, ldims, &s));
        if finest && prev_mse < best.0 {
            best = (prev_mse, s.clone());
        }
        let mut calm = 0;
        for _ in 0..iters {
            s = demons_step(&fx, &mv, ldims, &s, cfg);
            let mse = mse_buf(&fx, &warp_buffer(&mv, ldims, &s));
            if !s.is_finite() || !mse.is_finite() {
                break;
            }
            if finest && mse < best.0 {
                best = (mse, s.clone());
            }
            let rel = (prev_mse - mse).abs() / prev_mse.max(1e-30);
            calm = if rel < cfg.convergence_tol { calm + 1 } else { 0 };
            prev_mse = mse;
            if calm >= 5 {
                break;
            }
        }
        field = Some(s);
    }
    let field = best.1;
    let warped = warp(moving, &field)?;
    Ok((field, warped))
}

/// Quantities reported for one prior generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorReport {
    pub matched_index: usize,
    pub matched_id: String,
    /// MSE of the matched entry against the query.
    pub matched_mse: f64,
    /// MSE of the registered entry against the query.
    pub registered_mse: f64,
    pub matched_psnr: f64,
    pub registered_psnr: f64,
}

impl fmt::Display for PriorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "matched_index={}", self.matched_index)?;
        writeln!(f, "matched_id={}", self.matched_id)?;
        writeln!(f, "matched_mse={:.6e}", self.matched_mse)?;
        writeln!(f, "registered_mse={:.6e}", self.registered_mse)?;
        writeln!(f, "matched_psnr={:.4}", self.matched_psnr)?;
        write!(f, "registered_psnr={:.4}", self.registered_psnr)
    }
}

/// Matches `x_f` against the atlas and registers the match onto it.
///
/// The prior is returned on the grid of `x_f`.
pub fn generate_prior(x_f: &Volume3D, atlas: &AtlasDataset, cfg: &DemonsConfig) -> Result<(Volume3D, usize, PriorReport)> {
    let m = atlas_match(x_f, atlas)?;
    let matched = resample_to(atlas.volume(m.index), x_f.dims())?.with_kind(x_f.kind());
    let (_, registered) = demons_register(x_f, &matched, cfg)?;
    let matched_mse = metrics::mse(&matched, x_f)?;
    let registered_mse = metrics::mse(&registered, x_f)?;
    let report = PriorReport {
        matched_index: m.index,
        matched_id: atlas.id(m.index).to_string(),
        matched_mse,
        registered_mse,
        matched_psnr: metrics::psnr(&matched, x_f)?,
        registered_psnr: metrics::psnr(&registered, x_f)?,
    };
    Ok((registered, m.index, report))
}
