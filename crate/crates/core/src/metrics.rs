//! Volumetric image-quality metrics.
//!
//! PSNR takes its peak from the reference (`max − min`), so it is not
//! symmetric in its arguments. SSIM averages the usual luminance, contrast
//! and structure product over every fully-inside cubic window with uniform
//! weights and population (divide-by-N) window statistics.

use std::fmt;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::volume::Volume3D;

fn check_shapes(pred: &Volume3D, reference: &Volume3D) -> Result<()> {
    if pred.dims() != reference.dims() {
        return shape_err(format!("prediction dims {:?} differ from reference dims {:?}", pred.dims(), reference.dims()));
    }
    Ok(())
}

fn check_mask(mask: &[bool], n: usize) -> Result<usize> {
    if mask.len() != n {
        return shape_err(format!("mask has {} voxels, volumes have {n}", mask.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("mask selects no voxels".into()));
    }
    Ok(count)
}

fn selected<'a>(v: &'a Volume3D, mask: Option<&'a [bool]>) -> impl Iterator<Item = f64> + 'a {
    v.data()
        .iter()
        .enumerate()
        .filter(move |(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, &x)| f64::from(x))
}

fn masked_mse(pred: &Volume3D, reference: &Volume3D, mask: Option<&[bool]>) -> Result<f64> {
    check_shapes(pred, reference)?;
    let n = match mask {
        Some(m) => check_mask(m, pred.len())?,
        None => pred.len(),
    };
    let sum: f64 = selected(pred, mask).zip(selected(reference, mask)).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n as f64)
}

fn data_range(reference: &Volume3D, mask: Option<&[bool]>) -> f64 {
    let (lo, hi) = selected(reference, mask).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Mean squared error.
pub fn mse(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    masked_mse(pred, reference, None)
}

/// Root mean squared error.
pub fn rmse(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    Ok(mse(pred, reference)?.sqrt())
}

pub fn rmse_masked(pred: &Volume3D, reference: &Volume3D, mask: &[bool]) -> Result<f64> {
    Ok(masked_mse(pred, reference, Some(mask))?.sqrt())
}

fn psnr_from(range: f64, rmse: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::Degenerate("reference has zero data range".into()));
    }
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (range / rmse).log10())
}

/// `20·log10(range(ref) / rmse)` in dB; `+∞` when the volumes are equal.
pub fn psnr(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    let r = rmse(pred, reference)?;
    psnr_from(data_range(reference, None), r)
}

/// PSNR over mask voxels, with the range also taken over the mask.
pub fn psnr_masked(pred: &Volume3D, reference: &Volume3D, mask: &[bool]) -> Result<f64> {
    let r = rmse_masked(pred, reference, mask)?;
    psnr_from(data_range(reference, Some(mask)), r)
}

/// SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Overrides the reference range as the dynamic range `L`.
    pub data_range: Option<f64>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: None }
    }
}

/// Inclusive prefix sums over an `(nx+1)(ny+1)(nz+1)` grid.
struct Integral {
    dims: [usize; 3],
    s: Vec<f64>,
}

impl Integral {
    fn new(v: &[f64], [nx, ny, nz]: [usize; 3]) -> Self {
        let (sx, sy) = (nx + 1, ny + 1);
        let mut s = vec![0.0; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    s[at(x + 1, y + 1, z + 1)] = v[x + nx * (y + ny * z)] + s[at(x, y + 1, z + 1)] + s[at(x + 1, y, z + 1)]
                        + s[at(x + 1, y + 1, z)]
                        - s[at(x, y, z + 1)]
                        - s[at(x, y + 1, z)]
                        - s[at(x + 1, y, z)]
                        + s[at(x, y, z)];
                }
            }
        }
        Self { dims: [nx, ny, nz], s }
    }

    fn window(&self, [x, y, z]: [usize; 3], w: usize) -> f64 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.s[x + sx * (y + sy * z)];
        let (x1, y1, z1) = (x + w, y + w, z + w);
        at(x1, y1, z1) - at(x, y1, z1) - at(x1, y, z1) - at(x1, y1, z) + at(x, y, z1) + at(x, y1, z) + at(x1, y, z)
            - at(x, y, z)
    }
}

/// Mean structural similarity over all fully-inside `window³` blocks.
pub fn ssim(pred: &Volume3D, reference: &Volume3D, opts: &SsimOptions) -> Result<f64> {
    check_shapes(pred, reference)?;
    let dims = pred.dims();
    let w = opts.window;
    if w == 0 || dims.iter().any(|&d| d < w) {
        return contract_err(format!("volume {dims:?} is smaller than the {w}³ SSIM window"));
    }
    let l = opts.data_range.unwrap_or_else(|| data_range(reference, None));
    if !(l > 0.0) {
        return Err(Error::Degenerate("SSIM needs a positive data range".into()));
    }
    let (c1, c2) = ((opts.k1 * l).powi(2), (opts.k2 * l).powi(2));
    let (x, y) = (pred.to_f64(), reference.to_f64());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let [ix, iy, ixx, iyy, ixy] = [&x, &y, &xx, &yy, &xy].map(|v| Integral::new(v, dims));
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=dims[2] - w {
        for yy0 in 0..=dims[1] - w {
            for x0 in 0..=dims[0] - w {
                let p = [x0, yy0, z];
                let (mx, my) = (ix.window(p, w) / n, iy.window(p, w) / n);
                let vx = ixx.window(p, w) / n - mx * mx;
                let vy = iyy.window(p, w) / n - my * my;
                let cxy = ixy.window(p, w) / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-case metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub n_voxels: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr={:.4}\tssim={:.6}\trmse={:.6e}", self.psnr_db, self.ssim, self.rmse)
    }
}

/// PSNR, SSIM and RMSE of one case. With a mask, PSNR and RMSE are taken over
/// the mask voxels; SSIM is always windowed over the whole volume.
pub fn evaluate_case(pred: &Volume3D, reference: &Volume3D, mask: Option<&[bool]>, opts: &SsimOptions) -> Result<MetricReport> {
    let (rmse, psnr_db, n_voxels) = match mask {
        Some(m) => (rmse_masked(pred, reference, m)?, psnr_masked(pred, reference, m)?, check_mask(m, pred.len())?),
        None => (rmse(pred, reference)?, psnr(pred, reference)?, pred.len()),
    };
    Ok(MetricReport { psnr_db, ssim: ssim(pred, reference, opts)?, rmse, n_voxels })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean ± sample std of each metric over several cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub rmse: (f64, f64),
}

pub fn aggregate(rows: &[MetricReport]) -> Aggregate {
    let col = |f: fn(&MetricReport) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    Aggregate { psnr: col(|r| r.psnr_db), ssim: col(|r| r.ssim), rmse: col(|r| r.rmse) }
}

/// Tab-separated table: one `id, psnr, ssim, rmse` row per case and a final mean±std row.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("case_id\tpsnr\tssim\trmse\n");
    for (id, r) in rows {
        out.push_str(&format!("{id}\t{:.4}\t{:.6}\t{:.6e}\n", r.psnr_db, r.ssim, r.rmse));
    }
    let a = aggregate(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>());
    out.push_str(&format!(
        "mean±std\t{:.4}±{:.4}\t{:.6}±{:.6}\t{:.6e}±{:.6e}\n",
        a.psnr.0, a.psnr.1, a.ssim.0, a.ssim.1, a.rmse.0, a.rmse.1
    ));
    out
}
