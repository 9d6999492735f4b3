//! Trains a two-stage cascade, where the second stage also sees a registered
//! atlas prior, and evaluates both stages on held-out cases.
//!
//! cargo run --release --example pour_cascade -- [STEPS]

use pournet::cascade::{run_pour, train_cascade, Case, CascadeConfig, CaseInputs, Inference};
use pournet::metrics::{evaluate_case, format_table, SsimOptions};
use pournet::ournet::OurNetConfig;
use pournet::phantom::{degrade, generate_atlas, generate_phantom, DegradeParams, PhantomSpec};

fn case(seed: u64) -> pournet::Result<Case> {
    let (mu, lambda) = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })?;
    let (l, m) = degrade(&mu, &lambda, 0.1, seed, &DegradeParams::default())?;
    Case::new(format!("{seed:04}"), CaseInputs::new(l, m)?, mu)
}

fn main() -> pournet::Result<()> {
    let steps = std::env::args().nth(1).map_or(200, |s| s.parse().expect("STEPS"));
    let train: Vec<Case> = (0..8).map(case).collect::<pournet::Result<_>>()?;
    let test: Vec<Case> = (100..102).map(case).collect::<pournet::Result<_>>()?;
    let atlas = generate_atlas(16, &PhantomSpec::default(), 1000)?;

    let net = OurNetConfig { base_channels: 2, frb_rseb_count: 1, se_reduction: 1, ..OurNetConfig::default() };
    let mut cfg = CascadeConfig::uniform(2, net);
    cfg.train.steps = steps;
    cfg.train.patch_size = 8;
    cfg.train.adam.lr = 2e-3;
    cfg.inference = Inference::Sliding { window: 8, stride: 4 };

    let (stages, _) = train_cascade(&train, &atlas, &cfg, None, &mut |line| println!("{line}"))?;

    let ssim = SsimOptions::default();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for c in &test {
        let out = run_pour(&c.inputs, &stages, &atlas, &cfg)?;
        println!("{}: prior from atlas entry {}", c.id, out.reports[0].matched_id);
        first.push((c.id.clone(), evaluate_case(&out.stage_outputs[0], &c.mu_gt, None, &ssim)?));
        second.push((c.id.clone(), evaluate_case(&out.mu, &c.mu_gt, None, &ssim)?));
    }
    println!("stage 1\n{}", format_table(&first));
    println!("stage 2\n{}", format_table(&second));
    Ok(())
}
