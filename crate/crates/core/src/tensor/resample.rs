//! Spatial resampling of `(B, C, D, H, W)` feature maps.
//!
//! Upsampling is separable linear interpolation on voxel centres: output
//! voxel `o` reads the input at `(o + 0.5) / f - 0.5`, with linear
//! extrapolation from the two outermost samples at the borders. This is the
//! exact inverse geometry of `f³` average pooling, so pooling a linear ramp
//! and upsampling it back reproduces the ramp.

use super::Real;

/// Supported resampling factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resample {
    Up2,
    Up4,
    Down2,
    Down4,
}

impl Resample {
    pub fn factor(self) -> usize {
        match self {
            Resample::Up2 | Resample::Down2 => 2,
            Resample::Up4 | Resample::Down4 => 4,
        }
    }

    pub fn is_up(self) -> bool {
        matches!(self, Resample::Up2 | Resample::Up4)
    }

    /// Spatial extent after resampling, or `None` if a downsample does not divide.
    pub fn output_extent(self, n: usize) -> Option<usize> {
        let f = self.factor();
        if self.is_up() {
            Some(n * f)
        } else if n % f == 0 {
            Some(n / f)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(n: usize, f: usize) -> Vec<Tap> {
    (0..n * f)
        .map(|o| {
            if n == 1 {
                return Tap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 };
            }
            let src = (o as f64 + 0.5) / f as f64 - 0.5;
            let i0 = (src.floor().max(0.0) as usize).min(n - 2);
            let w1 = src - i0 as f64;
            Tap { i0, i1: i0 + 1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

/// Interpolates along the middle axis of a `[outer][n][inner]` buffer.
fn interp_axis<T: Real>(src: &[T], outer: usize, n: usize, inner: usize, taps: &[Tap]) -> Vec<T> {
    let m = taps.len();
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        let s = &src[o * n * inner..][..n * inner];
        let d = &mut out[o * m * inner..][..m * inner];
        for (j, t) in taps.iter().enumerate() {
            let (w0, w1) = (T::cast(t.w0), T::cast(t.w1));
            let a = &s[t.i0 * inner..][..inner];
            let b = &s[t.i1 * inner..][..inner];
            for ((dv, &av), &bv) in d[j * inner..][..inner].iter_mut().zip(a).zip(b) {
                *dv = w0 * av + w1 * bv;
            }
        }
    }
    out
}

/// Transpose of [`interp_axis`].
fn interp_axis_t<T: Real>(grad: &[T], outer: usize, n: usize, inner: usize, taps: &[Tap]) -> Vec<T> {
    let m = taps.len();
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let g = &grad[o * m * inner..][..m * inner];
        let d = &mut out[o * n * inner..][..n * inner];
        for (j, t) in taps.iter().enumerate() {
            let (w0, w1) = (T::cast(t.w0), T::cast(t.w1));
            let gj = &g[j * inner..][..inner];
            for (i, &gv) in gj.iter().enumerate() {
                d[t.i0 * inner + i] += w0 * gv;
                d[t.i1 * inner + i] += w1 * gv;
            }
        }
    }
    out
}

/// `bc` = batch·channels, `dims` = (D, H, W).
pub(crate) fn upsample<T: Real>(x: &[T], bc: usize, dims: [usize; 3], f: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let tx = taps(w, f);
    let ty = taps(h, f);
    let tz = taps(d, f);
    let a = interp_axis(x, bc * d * h, w, 1, &tx);
    let b = interp_axis(&a, bc * d, h, w * f, &ty);
    interp_axis(&b, bc, d, h * f * w * f, &tz)
}

pub(crate) fn upsample_backward<T: Real>(g: &[T], bc: usize, dims: [usize; 3], f: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let tx = taps(w, f);
    let ty = taps(h, f);
    let tz = taps(d, f);
    let b = interp_axis_t(g, bc, d, h * f * w * f, &tz);
    let a = interp_axis_t(&b, bc * d, h, w * f, &ty);
    interp_axis_t(&a, bc * d * h, w, 1, &tx)
}

/// Average pooling over `f³` blocks; `dims` are the input extents.
pub(crate) fn avg_pool<T: Real>(x: &[T], bc: usize, dims: [usize; 3], f: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / f, h / f, w / f);
    let scale = T::cast(1.0 / (f * f * f) as f64);
    let mut out = vec![T::zero(); bc * od * oh * ow];
    for c in 0..bc {
        let src = &x[c * d * h * w..][..d * h * w];
        let dst = &mut out[c * od * oh * ow..][..od * oh * ow];
        for z in 0..d {
            for y in 0..h {
                let row = &src[(z * h + y) * w..][..w];
                let drow = &mut dst[((z / f) * oh + y / f) * ow..][..ow];
                for (x_, &v) in row.iter().enumerate() {
                    drow[x_ / f] += v;
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(g: &[T], bc: usize, dims: [usize; 3], f: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / f, h / f, w / f);
    let scale = T::cast(1.0 / (f * f * f) as f64);
    let mut out = vec![T::zero(); bc * d * h * w];
    for c in 0..bc {
        let src = &g[c * od * oh * ow..][..od * oh * ow];
        let dst = &mut out[c * d * h * w..][..d * h * w];
        for z in 0..d {
            for y in 0..h {
                let grow = &src[((z / f) * oh + y / f) * ow..][..ow];
                let row = &mut dst[(z * h + y) * w..][..w];
                for (x_, v) in row.iter_mut().enumerate() {
                    *v = grow[x_ / f] * scale;
                }
            }
        }
    }
    out
}
