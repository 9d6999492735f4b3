//! Builds a phantom atlas, matches a held-out attenuation map against it and
//! registers the match with demons to form a prior.

use pournet::phantom::{generate_atlas, generate_phantom, PhantomSpec};
use pournet::ppgm::{atlas_match, generate_prior, DemonsConfig};
use pournet::volume::normalize_mu;

fn main() -> pournet::Result<()> {
    let spec = PhantomSpec { size: 32, ..PhantomSpec::default() };
    let atlas = generate_atlas(16, &spec, 1000)?;
    let (mu, _) = generate_phantom(&PhantomSpec { seed: 3, ..spec })?;
    let query = normalize_mu(&mu)?;

    let m = atlas_match(&query, &atlas)?;
    println!("nearest entry {} (mse {:.3e})", atlas.id(m.index), m.mse);

    let (prior, _, report) = generate_prior(&query, &atlas, &DemonsConfig::default())?;
    println!("{report}");
    println!("prior range {:?}", prior.min_max());
    Ok(())
}
