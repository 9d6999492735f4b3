//! Dense scalar volumes, the VVOL1 file format and intensity preprocessing.

use std::fs;
use std::path::Path;

use crate::error::{contract_err, Error, Result};

/// Attenuation value used to scale μ-maps into unit range (cortical bone at 511 keV, cm⁻¹).
pub const MU_SCALE: f64 = 0.15;

/// Default σ of the activity tanh normalisation.
pub const ACTIVITY_SIGMA: f64 = 10.0;

/// FWHM = `FWHM_PER_SIGMA` · σ for a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.3548;

const MAGIC: &[u8; 5] = b"VVOL1";
const VERSION: u8 = 1;
/// Size of the fixed VVOL1 header: magic (5), version, kind tag, reserved zero,
/// 3 × u32 dims, 3 × f32 spacing.
pub const HEADER_LEN: usize = 32;

/// What the voxel values of a volume represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Activity,
    Mu,
    MuNormalized,
    ActivityNormalized,
}

impl VolumeKind {
    pub fn tag(self) -> u8 {
        match self {
            VolumeKind::Activity => 0,
            VolumeKind::Mu => 1,
            VolumeKind::MuNormalized => 2,
            VolumeKind::ActivityNormalized => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(VolumeKind::Activity),
            1 => Some(VolumeKind::Mu),
            2 => Some(VolumeKind::MuNormalized),
            3 => Some(VolumeKind::ActivityNormalized),
            _ => None,
        }
    }
}

/// A dense 3-D grid of `f32` values, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return contract_err(format!("volume dims must be positive, got {dims:?}"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return contract_err(format!("voxel spacing must be positive, got {spacing:?}"));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::SizeMismatch { expected, found: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return contract_err(format!("non-finite voxel value at index {i}"));
        }
        Ok(Self { dims, spacing, kind, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], kind: VolumeKind, value: f32) -> Result<Self> {
        Self::new(dims, spacing, kind, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume from an f64 buffer, rounding to f32.
    pub fn from_f64(dims: [usize; 3], spacing: [f32; 3], kind: VolumeKind, data: &[f64]) -> Result<Self> {
        Self::new(dims, spacing, kind, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Same geometry, new kind.
    pub fn with_kind(mut self, kind: VolumeKind) -> Self {
        self.kind = kind;
        self
    }

    /// Same geometry and kind, new values. Validates length and finiteness.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.kind, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Encodes the volume in the VVOL1 layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind.tag());
        out.push(0);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        debug_assert_eq!(out.len(), HEADER_LEN);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a VVOL1 byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("header truncated: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        if &bytes[0..5] != MAGIC {
            return Err(Error::Format("magic: expected \"VVOL1\"".into()));
        }
        if bytes[5] != VERSION {
            return Err(Error::Format(format!("version: expected {VERSION}, found {}", bytes[5])));
        }
        let kind = VolumeKind::from_tag(bytes[6])
            .ok_or_else(|| Error::Format(format!("kind: unknown tag {}", bytes[6])))?;
        if bytes[7] != 0 {
            return Err(Error::Format("reserved: byte 7 must be zero".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32_at(8 + 4 * i) as usize;
            if *d == 0 {
                return Err(Error::Format(format!("dims[{i}]: must be positive")));
            }
        }
        let mut spacing = [0f32; 3];
        for (i, s) in spacing.iter_mut().enumerate() {
            *s = f32_at(20 + 4 * i);
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::Format(format!("spacing[{i}]: must be positive, found {s}")));
            }
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = dims[0] * dims[1] * dims[2];
        if payload.len() != 4 * expected {
            return Err(Error::SizeMismatch { expected, found: payload.len() / 4 });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, spacing, kind, data)
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let bytes = fs::read(path)?;
    Volume3D::from_bytes(&bytes)
}

pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, vol.to_bytes())?;
    Ok(())
}

fn expect_kind(vol: &Volume3D, kind: VolumeKind, op: &str) -> Result<()> {
    if vol.kind != kind {
        return contract_err(format!("{op} expects a {kind:?} volume, got {:?}", vol.kind));
    }
    Ok(())
}

/// `tanh(v / mean / sigma_scale)` voxelwise.
pub fn normalize_activity(vol: &Volume3D, sigma_scale: f64) -> Result<Volume3D> {
    expect_kind(vol, VolumeKind::Activity, "normalize_activity")?;
    if !(sigma_scale > 0.0) {
        return contract_err("sigma_scale must be positive");
    }
    let mean = vol.mean();
    if !(mean > 0.0) {
        return Err(Error::Degenerate(format!("activity mean must be positive, got {mean}")));
    }
    let data = vol
        .data
        .iter()
        .map(|&v| (f64::from(v) / mean / sigma_scale).tanh() as f32)
        .collect();
    Ok(Volume3D { data, kind: VolumeKind::ActivityNormalized, ..vol.clone() })
}

/// Scales a μ-map by `1 / 0.15`. Negative values pass through.
pub fn normalize_mu(vol: &Volume3D) -> Result<Volume3D> {
    expect_kind(vol, VolumeKind::Mu, "normalize_mu")?;
    let data = vol.data.iter().map(|&v| (f64::from(v) / MU_SCALE) as f32).collect();
    Ok(Volume3D { data, kind: VolumeKind::MuNormalized, ..vol.clone() })
}

pub fn denormalize_mu(vol: &Volume3D) -> Result<Volume3D> {
    expect_kind(vol, VolumeKind::MuNormalized, "denormalize_mu")?;
    let data = vol.data.iter().map(|&v| (f64::from(v) * MU_SCALE) as f32).collect();
    Ok(Volume3D { data, kind: VolumeKind::Mu, ..vol.clone() })
}

/// Separable Gaussian smoothing with the given FWHM in millimetres.
///
/// Kernels are truncated at 4σ. Borders use half-sample symmetric reflection,
/// which keeps constants constant and preserves the volume sum.
pub fn gaussian_smooth(vol: &Volume3D, fwhm_mm: f64) -> Result<Volume3D> {
    if !(fwhm_mm > 0.0 && fwhm_mm.is_finite()) {
        return contract_err(format!("fwhm_mm must be positive, got {fwhm_mm}"));
    }
    let sigmas = [0, 1, 2].map(|a| fwhm_mm / (FWHM_PER_SIGMA * f64::from(vol.spacing[a])));
    let mut buf = vol.to_f64();
    smooth_buffer(&mut buf, vol.dims, sigmas);
    Volume3D::from_f64(vol.dims, vol.spacing, vol.kind, &buf)
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Half-sample symmetric reflection of `i` into `0..n` (…, 1, 0 | 0, 1, …, n-1 | n-1, …).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// In-place separable Gaussian smoothing of an x-fastest buffer; σ in voxels per axis.
/// Axes with σ below 1e-6 are left untouched.
pub(crate) fn smooth_buffer(data: &mut [f64], dims: [usize; 3], sigmas: [f64; 3]) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        if sigmas[axis] < 1e-6 {
            continue;
        }
        let kernel = gaussian_kernel(sigmas[axis]);
        let radius = (kernel.len() / 2) as isize;
        let n = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        line.resize(n, 0.0);
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for (i, l) in line.iter_mut().enumerate() {
                    *l = data[base + i * stride];
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        acc += w * line[reflect(i as isize + t as isize - radius, n)];
                    }
                    data[base + i * stride] = acc;
                }
            }
        }
    }
}

/// Trilinear resampling onto a new grid covering the same field of view
/// (voxel centres at `(i + 0.5) · n_src / n_dst - 0.5`, clamped to the border).
pub fn resample_to(vol: &Volume3D, dims: [usize; 3]) -> Result<Volume3D> {
    if dims.iter().any(|&d| d == 0) {
        return contract_err("target dims must be positive");
    }
    if dims == vol.dims {
        return Ok(vol.clone());
    }
    let src = vol.to_f64();
    let coords: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let ratio = vol.dims[a] as f64 / dims[a] as f64;
            (0..dims[a]).map(|i| (i as f64 + 0.5) * ratio - 0.5).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(sample_trilinear(&src, vol.dims, [coords[0][x], coords[1][y], coords[2][z]]));
            }
        }
    }
    let spacing = [0, 1, 2].map(|a| vol.spacing[a] * vol.dims[a] as f32 / dims[a] as f32);
    Volume3D::from_f64(dims, spacing, vol.kind, &out)
}

/// Trilinear sample of an x-fastest buffer at continuous voxel coordinates,
/// clamping to the edge outside the grid.
#[inline]
pub(crate) fn sample_trilinear(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, hi);
        let fl = c.floor();
        i0[a] = fl as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        f[a] = c - fl;
    }
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let c00 = data[idx(i0[0], i0[1], i0[2])] * (1.0 - f[0]) + data[idx(i1[0], i0[1], i0[2])] * f[0];
    let c10 = data[idx(i0[0], i1[1], i0[2])] * (1.0 - f[0]) + data[idx(i1[0], i1[1], i0[2])] * f[0];
    let c01 = data[idx(i0[0], i0[1], i1[2])] * (1.0 - f[0]) + data[idx(i1[0], i0[1], i1[2])] * f[0];
    let c11 = data[idx(i0[0], i1[1], i1[2])] * (1.0 - f[0]) + data[idx(i1[0], i1[1], i1[2])] * f[0];
    let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
    let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
    c0 * (1.0 - f[2]) + c1 * f[2]
}
