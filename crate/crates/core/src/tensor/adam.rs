use super::{ParamStore, Real};
use crate::error::{shape_err, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: store.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &[Vec<T>], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return shape_err(format!(
            "adam_step: {} parameters, {} gradients, {} moment buffers",
            store.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in store.iter().zip(grads).zip(&state.m) {
        if p.data.len() != g.len() || p.data.len() != m.len() {
            return shape_err(format!("adam_step: gradient of {} has {} values, expected {}", p.name, g.len(), p.data.len()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
    let (one_b1, one_b2) = (T::cast(1.0 - cfg.beta1), T::cast(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::cast(1.0 / bc1), T::cast(1.0 / bc2));
    let (lr, eps) = (T::cast(cfg.lr), T::cast(cfg.eps));
    for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![1], vec![v]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[vec![0.0]], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data, vec![0.3]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &[vec![1.0]], &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + eps)
        let expect = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((s.get("w").unwrap().data[0] - expect).abs() < 1e-15);
        assert!((s.get("w").unwrap().data[0] - (1.0 - 1e-4)).abs() < 1e-11);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &[vec![1.0, 2.0]], &mut st, &AdamConfig::default()).is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn matches_reference_formulas_over_ten_steps() {
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let mut s = ParamStore::new();
        s.insert("a", vec![3], vec![0.5, -0.25, 1.0]).unwrap();
        let mut st = AdamState::new(&s);
        let grad_at = |k: usize, i: usize| ((k * 3 + i) as f64 * 0.7).sin();

        // straight-line reference
        let mut p = [0.5, -0.25, 1.0];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for k in 0..10 {
            let g: Vec<f64> = (0..3).map(|i| grad_at(k, i)).collect();
            adam_step(&mut s, &[g.clone()], &mut st, &cfg).unwrap();
            let t = (k + 1) as i32;
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in s.get("a").unwrap().data.iter().zip(p) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert_eq!(st.t, 10);
    }
}
