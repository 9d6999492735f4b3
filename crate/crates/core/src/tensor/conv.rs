//! Direct 3-D cross-correlation kernels.
//!
//! Inputs are zero-padded explicitly so the inner loops are branch-free.
//! Each output row is produced in blocks of `LANES` values held in a local
//! accumulator across all taps and input channels. Work is split over
//! (batch, output channel) in the forward pass, over (batch, input channel)
//! for the input gradient and over output channels for the weight gradient;
//! every element is owned by one task with a fixed summation order, so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::Real;

/// Widest output block of the forward kernel; wider blocks spill registers.
const LANES: usize = 16;
/// Accumulator width of the weight gradient, narrower because three taps are live at once.
const WLANES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    fn out_vol(&self) -> usize {
        self.output[0] * self.output[1] * self.output[2]
    }

    fn padded(&self) -> [usize; 3] {
        self.input.map(|n| n + 2 * self.pad)
    }
}

/// Copies `(B·C)` volumes of `dims` into zero-padded volumes.
fn pad_volumes<T: Real>(x: &[T], bc: usize, dims: [usize; 3], pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let [d, h, w] = dims;
    let [pd, ph, pw] = dims.map(|n| n + 2 * pad);
    let mut out = vec![T::zero(); bc * pd * ph * pw];
    for c in 0..bc {
        for z in 0..d {
            for y in 0..h {
                let src = &x[((c * d + z) * h + y) * w..][..w];
                let dst = (((c * pd) + z + pad) * ph + y + pad) * pw + pad;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    out
}

/// Output values `x0..x0 + N` of one row, accumulated over all taps and input channels.
#[inline(always)]
fn row_block<T: Real, const N: usize>(
    g: &ConvGeom,
    src: &[T],
    wco: &[T],
    (oz, oy, x0): (usize, usize, usize),
    bias: T,
) -> [T; N] {
    let [pd, ph, pw] = g.padded();
    let (k, s) = (g.k, g.stride);
    let k3 = k * k * k;
    let pvol = pd * ph * pw;
    let mut acc = [bias; N];
    if k == 3 && s == 1 {
        // three taps per row window; per lane the summation order matches the general loop
        for ci in 0..g.cin {
            let vol = &src[ci * pvol..][..pvol];
            for kz in 0..3 {
                for ky in 0..3 {
                    let p = &vol[((oz + kz) * ph + oy + ky) * pw + x0..][..N + 2];
                    let t = &wco[ci * 27 + (kz * 3 + ky) * 3..][..3];
                    let (w0, w1, w2) = (t[0], t[1], t[2]);
                    for l in 0..N {
                        let mut a = acc[l];
                        a += w0 * p[l];
                        a += w1 * p[l + 1];
                        a += w2 * p[l + 2];
                        acc[l] = a;
                    }
                }
            }
        }
        return acc;
    }
    for ci in 0..g.cin {
        let vol = &src[ci * pvol..][..pvol];
        for kz in 0..k {
            for ky in 0..k {
                let prow = &vol[((oz * s + kz) * ph + oy * s + ky) * pw..][..pw];
                let taps = &wco[ci * k3 + (kz * k + ky) * k..][..k];
                for (kx, &wv) in taps.iter().enumerate() {
                    if s == 1 {
                        let p: &[T; N] = prow[x0 + kx..][..N].try_into().unwrap();
                        for l in 0..N {
                            acc[l] += wv * p[l];
                        }
                    } else {
                        for (l, a) in acc.iter_mut().enumerate() {
                            *a += wv * prow[(x0 + l) * s + kx];
                        }
                    }
                }
            }
        }
    }
    acc
}

/// Correlates pre-padded input `(B, Cin, P)` with `(Cout, Cin, k³)` weights.
fn correlate<T: Real>(g: &ConvGeom, padded: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let [pd, ph, pw] = g.padded();
    let [od, oh, ow] = g.output;
    let k3 = g.k * g.k * g.k;
    let pvol = pd * ph * pw;
    let mut out = vec![T::zero(); g.batch * g.cout * g.out_vol()];
    out.par_chunks_mut(g.out_vol()).enumerate().for_each(|(idx, chunk)| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        let src = &padded[b * g.cin * pvol..][..g.cin * pvol];
        let wco = &weight[co * g.cin * k3..][..g.cin * k3];
        for oz in 0..od {
            for oy in 0..oh {
                let row = &mut chunk[(oz * oh + oy) * ow..][..ow];
                let mut x0 = 0;
                while x0 < ow {
                    let at = (oz, oy, x0);
                    let n = match ow - x0 {
                        r if r >= LANES => {
                            row[x0..x0 + LANES].copy_from_slice(&row_block::<T, LANES>(g, src, wco, at, bias[co]));
                            LANES
                        }
                        r if r >= 8 => {
                            row[x0..x0 + 8].copy_from_slice(&row_block::<T, 8>(g, src, wco, at, bias[co]));
                            8
                        }
                        _ => {
                            row[x0] = row_block::<T, 1>(g, src, wco, at, bias[co])[0];
                            1
                        }
                    };
                    x0 += n;
                }
            }
        }
    });
    out
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let padded = pad_volumes(input, g.batch * g.cin, g.input, g.pad);
    correlate(g, &padded, weight, bias)
}

pub(crate) fn backward_input<T: Real>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let k = g.k;
    let k3 = k * k * k;
    if g.stride == 1 && g.pad < k {
        // correlation of the output gradient with the flipped, transposed kernel
        let q = k - 1 - g.pad;
        let mut wt = vec![T::zero(); weight.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                let src = &weight[(co * g.cin + ci) * k3..][..k3];
                let dst = &mut wt[(ci * g.cout + co) * k3..][..k3];
                for (t, v) in src.iter().enumerate() {
                    dst[k3 - 1 - t] = *v;
                }
            }
        }
        let tg = ConvGeom {
            batch: g.batch,
            cin: g.cout,
            cout: g.cin,
            input: g.output,
            k,
            stride: 1,
            pad: q,
            output: g.input,
        };
        let padded = pad_volumes(grad_out, g.batch * g.cout, g.output, q);
        return correlate(&tg, &padded, &wt, &vec![T::zero(); g.cin]);
    }
    scatter_input(g, grad_out, weight)
}

/// General input gradient by scattering into a padded buffer.
fn scatter_input<T: Real>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let [pd, ph, pw] = g.padded();
    let [od, oh, ow] = g.output;
    let (k, s) = (g.k, g.stride);
    let k3 = k * k * k;
    let pvol = pd * ph * pw;
    let out_vol = g.out_vol();
    let mut gp = vec![T::zero(); g.batch * g.cin * pvol];
    gp.par_chunks_mut(pvol).enumerate().for_each(|(idx, chunk)| {
        let (b, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let gsrc = &grad_out[(b * g.cout + co) * out_vol..][..out_vol];
            let wb = (co * g.cin + ci) * k3;
            for oz in 0..od {
                for oy in 0..oh {
                    let grow = &gsrc[(oz * oh + oy) * ow..][..ow];
                    for kz in 0..k {
                        for ky in 0..k {
                            let dst = &mut chunk[((oz * s + kz) * ph + oy * s + ky) * pw..][..pw];
                            for kx in 0..k {
                                let wv = weight[wb + (kz * k + ky) * k + kx];
                                for (x, &gv) in grow.iter().enumerate() {
                                    dst[x * s + kx] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    crop_volumes(&gp, g.batch * g.cin, g.input, g.pad)
}

fn crop_volumes<T: Real>(x: &[T], bc: usize, dims: [usize; 3], pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let [d, h, w] = dims;
    let [pd, ph, pw] = dims.map(|n| n + 2 * pad);
    let mut out = Vec::with_capacity(bc * d * h * w);
    for c in 0..bc {
        for z in 0..d {
            for y in 0..h {
                let src = (((c * pd) + z + pad) * ph + y + pad) * pw + pad;
                out.extend_from_slice(&x[src..src + w]);
            }
        }
    }
    out
}

/// Lane-wise partial sums of `grad[o] · input[o·s + (kz, ky, kx0 + j)]` over one
/// output plane, for `K` consecutive x taps.
#[inline(always)]
fn plane_taps<T: Real, const K: usize>(
    g: &ConvGeom,
    gplane: &[T],
    vol: &[T],
    oz: usize,
    (kz, ky, kx0): (usize, usize, usize),
) -> [[T; WLANES]; K] {
    let [_, ph, pw] = g.padded();
    let [_, oh, ow] = g.output;
    let s = g.stride;
    let mut acc = [[T::zero(); WLANES]; K];
    for oy in 0..oh {
        let grow = &gplane[oy * ow..][..ow];
        let prow = &vol[((oz * s + kz) * ph + oy * s + ky) * pw..][..pw];
        let mut x0 = 0;
        if s == 1 {
            while x0 + WLANES <= ow {
                let gv: &[T; WLANES] = grow[x0..][..WLANES].try_into().unwrap();
                let p = &prow[x0 + kx0..][..WLANES + K - 1];
                for (j, a) in acc.iter_mut().enumerate() {
                    for l in 0..WLANES {
                        a[l] += gv[l] * p[l + j];
                    }
                }
                x0 += WLANES;
            }
        }
        for x in x0..ow {
            for (j, a) in acc.iter_mut().enumerate() {
                a[x % WLANES] += grow[x] * prow[x * s + kx0 + j];
            }
        }
    }
    acc
}

/// Returns `(grad_weight, grad_bias)`.
pub(crate) fn backward_params<T: Real>(g: &ConvGeom, grad_out: &[T], input: &[T]) -> (Vec<T>, Vec<T>) {
    let [pd, ph, pw] = g.padded();
    let [od, oh, ow] = g.output;
    let k = g.k;
    let k3 = k * k * k;
    let pvol = pd * ph * pw;
    let out_vol = g.out_vol();
    let plane = oh * ow;
    let padded = pad_volumes(input, g.batch * g.cin, g.input, g.pad);
    let mut grad_w = vec![T::zero(); g.cout * g.cin * k3];
    let grad_b: Vec<T> = grad_w
        .par_chunks_mut(g.cin * k3)
        .enumerate()
        .map(|(co, gw)| {
            let mut bias_acc = [T::zero(); WLANES];
            let mut acc = vec![[T::zero(); WLANES]; g.cin * k3];
            for b in 0..g.batch {
                let gsrc = &grad_out[(b * g.cout + co) * out_vol..][..out_vol];
                for (i, &v) in gsrc.iter().enumerate() {
                    bias_acc[i % WLANES] += v;
                }
                for oz in 0..od {
                    let gplane = &gsrc[oz * plane..][..plane];
                    for ci in 0..g.cin {
                        let vol = &padded[(b * g.cin + ci) * pvol..][..pvol];
                        for kz in 0..k {
                            for ky in 0..k {
                                let base = ci * k3 + (kz * k + ky) * k;
                                if k == 3 {
                                    let part = plane_taps::<T, 3>(g, gplane, vol, oz, (kz, ky, 0));
                                    for (a, p) in acc[base..base + 3].iter_mut().zip(&part) {
                                        for l in 0..WLANES {
                                            a[l] += p[l];
                                        }
                                    }
                                } else {
                                    for kx in 0..k {
                                        let [p] = plane_taps::<T, 1>(g, gplane, vol, oz, (kz, ky, kx));
                                        for l in 0..WLANES {
                                            acc[base + kx][l] += p[l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (dst, lanes) in gw.iter_mut().zip(&acc) {
                *dst = lanes.iter().fold(T::zero(), |s, &v| s + v);
            }
            bias_acc.iter().fold(T::zero(), |s, &v| s + v)
        })
        .collect();
    (grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 5).map(f64::from).collect();
        let p = pad_volumes(&x, 2, [3, 4, 5], 2);
        assert_eq!(p.len(), 2 * 7 * 8 * 9);
        assert_eq!(p.iter().sum::<f64>(), x.iter().sum::<f64>());
        assert_eq!(crop_volumes(&p, 2, [3, 4, 5], 2), x);
    }

    #[test]
    fn strided_input_gradient_paths_agree() {
        // stride-1 transposed path vs the scatter path on the same problem
        let g = ConvGeom { batch: 2, cin: 2, cout: 3, input: [4, 5, 6], k: 3, stride: 1, pad: 1, output: [4, 5, 6] };
        let go: Vec<f64> = (0..2 * 3 * 120).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 104729) % 89) as f64 / 89.0 - 0.5).collect();
        let a = backward_input(&g, &go, &w);
        let b = scatter_input(&g, &go, &w);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
