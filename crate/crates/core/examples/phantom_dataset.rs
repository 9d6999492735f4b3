//! Generates one synthetic case, degrades it at two count levels, writes the
//! volumes to a scratch folder and reports how far each estimate is from truth.
//!
//! cargo run --release --example phantom_dataset -- [SEED] [SIZE]

use pournet::metrics::{evaluate_case, format_table, SsimOptions};
use pournet::phantom::{synthetic_case, DegradeParams, PhantomSpec};
use pournet::volume::{normalize_mu, read_volume, write_volume};

fn main() -> pournet::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("SEED"));
    let size: usize = args.next().map_or(32, |s| s.parse().expect("SIZE"));

    let spec = PhantomSpec { seed, size, ..PhantomSpec::default() };
    let case = synthetic_case(0, &spec, &[0.1, 0.025], &DegradeParams::default())?;

    let dir = std::env::temp_dir().join(format!("pour_phantom_{seed}"));
    std::fs::create_dir_all(&dir)?;
    write_volume(&case.phantom.mu, dir.join("mu_gt.vvol"))?;
    write_volume(&case.phantom.activity, dir.join("lambda_gt.vvol"))?;

    let gt = normalize_mu(&case.phantom.mu)?;
    let mut rows = Vec::new();
    for (f, lambda, mu) in &case.degraded {
        let path = dir.join(format!("mu_mlaa_f{f}.vvol"));
        write_volume(mu, &path)?;
        write_volume(lambda, dir.join(format!("lambda_mlaa_f{f}.vvol")))?;
        assert_eq!(&read_volume(&path)?, mu);
        rows.push((format!("{}%", f * 100.0), evaluate_case(&normalize_mu(mu)?, &gt, None, &SsimOptions::default())?));
    }
    println!("wrote {}", dir.display());
    print!("{}", format_table(&rows));
    Ok(())
}
