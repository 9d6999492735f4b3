//! Trains a single stage on synthetic 10 % count cases and compares its test
//! PSNR with the raw low-count attenuation estimate.
//!
//! cargo run --release --example train_stage -- [STEPS]

use pournet::cascade::{infer_stage, train_stage, Case, CascadeConfig, CaseInputs, Inference, StageCase};
use pournet::metrics;
use pournet::ournet::OurNetConfig;
use pournet::phantom::{degrade, generate_phantom, DegradeParams, PhantomSpec};

fn case(seed: u64) -> pournet::Result<Case> {
    let (mu, lambda) = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })?;
    let (l, m) = degrade(&mu, &lambda, 0.1, seed, &DegradeParams::default())?;
    Case::new(format!("{seed:04}"), CaseInputs::new(l, m)?, mu)
}

fn main() -> pournet::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("STEPS"));
    let train: Vec<Case> = (0..8).map(case).collect::<pournet::Result<_>>()?;
    let test: Vec<Case> = (100..102).map(case).collect::<pournet::Result<_>>()?;

    let net = OurNetConfig { base_channels: 2, frb_rseb_count: 1, se_reduction: 1, ..OurNetConfig::default() };
    let mut cfg = CascadeConfig::uniform(1, net);
    cfg.train.steps = steps;
    cfg.train.patch_size = 8;
    cfg.train.adam.lr = 2e-3;
    cfg.inference = Inference::Sliding { window: 8, stride: 4 };

    let material: Vec<StageCase> = train.iter().map(|case| StageCase { case, prior: None }).collect();
    let (params, log) = train_stage(1, &material, &cfg)?;
    let k = log.losses.len() / 10;
    for (i, l) in log.losses.iter().enumerate().step_by(k.max(1)) {
        println!("step {:>5}  loss {l:.4e}", i + 1);
    }

    for c in &test {
        let pred = infer_stage(&c.inputs, None, &params, &cfg.stages[0], cfg.inference)?;
        println!(
            "case {}: mlaa {:.2} dB -> network {:.2} dB",
            c.id,
            metrics::psnr(&c.inputs.mu_mlaa, &c.mu_gt)?,
            metrics::psnr(&pred, &c.mu_gt)?
        );
    }
    Ok(())
}
