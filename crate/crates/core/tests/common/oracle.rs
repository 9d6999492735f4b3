use pournet::ppgm::AtlasDataset;
use pournet::Volume3D;

/// Plain first-minimum scan in f64.
pub fn brute_force(query: &Volume3D, atlas: &AtlasDataset) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..atlas.len() {
        let e = atlas.volume(i).data();
        let mut s = 0.0;
        for (q, a) in query.data().iter().zip(e) {
            s += (f64::from(*q) - f64::from(*a)).powi(2);
        }
        let m = s / e.len() as f64;
        if m < best.1 {
            best = (i, m);
        }
    }
    best
}

pub fn oracle_rmse(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = f64::from(a[i]) - f64::from(b[i]);
        s += d * d;
    }
    (s / a.len() as f64).sqrt()
}

pub fn oracle_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for &v in b {
        lo = lo.min(f64::from(v));
        hi = hi.max(f64::from(v));
    }
    20.0 * ((hi - lo) / oracle_rmse(a, b)).log10()
}

/// SSIM by direct summation over every window, two passes per window.
pub fn oracle_ssim(a: &[f32], b: &[f32], n: usize, w: usize, k1: f64, k2: f64) -> f64 {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for &v in b {
        lo = lo.min(f64::from(v));
        hi = hi.max(f64::from(v));
    }
    let l = hi - lo;
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let at = |v: &[f32], x: usize, y: usize, z: usize| f64::from(v[x + n * (y + n * z)]);
    let cnt = (w * w * w) as f64;
    let mut total = 0.0;
    let mut windows = 0.0;
    for z0 in 0..=n - w {
        for y0 in 0..=n - w {
            for x0 in 0..=n - w {
                let (mut ma, mut mb) = (0.0, 0.0);
                for z in z0..z0 + w {
                    for y in y0..y0 + w {
                        for x in x0..x0 + w {
                            ma += at(a, x, y, z);
                            mb += at(b, x, y, z);
                        }
                    }
                }
                ma /= cnt;
                mb /= cnt;
                let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                for z in z0..z0 + w {
                    for y in y0..y0 + w {
                        for x in x0..x0 + w {
                            let (da, db) = (at(a, x, y, z) - ma, at(b, x, y, z) - mb);
                            va += da * da;
                            vb += db * db;
                            cab += da * db;
                        }
                    }
                }
                va /= cnt;
                vb /= cnt;
                cab /= cnt;
                total += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows += 1.0;
            }
        }
    }
    total / windows
}
