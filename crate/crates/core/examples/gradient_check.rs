//! Central-difference check of the autodiff engine on a conv → relu → resample
//! chain in f64.

use pournet::tensor::{check_gradients, conv3d, Resample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pournet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = |shape: Vec<usize>| {
        let n = shape.iter().product();
        (shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
    };
    let inputs = [random(vec![1, 2, 8, 8, 8]), random(vec![3, 2, 3, 3, 3]), random(vec![3]), random(vec![1, 3, 4, 4, 4])];

    let report = check_gradients(&inputs, 1e-6, 64, 0, |_, t| {
        let h = conv3d(t[0], t[1], t[2], 1, 1)?.relu().resample(Resample::Down2)?;
        h.mse(t[3])
    })?;
    for (name, e) in ["input", "weight", "bias", "target"].iter().zip(&report.rel_errors) {
        println!("{name:>6}  rel error {e:.2e}");
    }
    println!("global  rel error {:.2e} over {} coordinates", report.global_rel_error, report.checked);
    Ok(())
}
