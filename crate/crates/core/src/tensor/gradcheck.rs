//! Central finite-difference checks of analytic gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it is
//! independent of the backward implementation it checks.

use rand::seq::index::sample;

use super::graph::{Graph, Tensor};
use crate::error::Result;
use crate::rng;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input, over the checked coordinates.
    pub rel_errors: Vec<f64>,
    /// The same ratio over all checked coordinates of all inputs together.
    pub global_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares backward-pass gradients of `f` against central differences with
/// step `step`. Inputs with more than `max_coords` entries are checked on a
/// seeded random subset of coordinates.
pub fn check_gradients<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    step: f64,
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Tensor<'g, f64>]) -> Result<Tensor<'g, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let ts = inputs
            .iter()
            .map(|(s, d)| g.variable(s.clone(), d.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&g, &ts)?;
        g.backward(loss)?;
        ts.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect()
    };

    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let g = Graph::new();
        let ts = inputs
            .iter()
            .zip(data)
            .map(|((s, _), d)| g.constant(s.clone(), d.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&g, &ts)?.item())
    };

    let mut data: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut rng = rng::stream(seed, "gradcheck");
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for i in 0..inputs.len() {
        let n = data[i].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut a_sel = Vec::with_capacity(coords.len());
        let mut n_sel = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = data[i][c];
            data[i][c] = orig + step;
            let plus = eval(&data)?;
            data[i][c] = orig - step;
            let minus = eval(&data)?;
            data[i][c] = orig;
            a_sel.push(analytic[i][c]);
            n_sel.push((plus - minus) / (2.0 * step));
        }
        rel_errors.push(rel(&a_sel, &n_sel));
        all_a.extend(a_sel);
        all_n.extend(n_sel);
    }
    Ok(GradCheckReport { rel_errors, global_rel_error: rel(&all_a, &all_n), checked: all_a.len() })
}
