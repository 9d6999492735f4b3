//! Builds the network in each branch configuration and prints parameter counts
//! and the shapes of the three supervised heads for a 16³ two-channel input.

use pournet::ournet::{init_params, ournet_forward, OurNetConfig};
use pournet::tensor::{Graph, ParamStore};

fn main() -> pournet::Result<()> {
    for (unnet, ovnet) in [(true, true), (true, false), (false, true), (false, false)] {
        let cfg = OurNetConfig { base_channels: 4, frb_rseb_count: 2, enable_unnet: unnet, enable_ovnet: ovnet, ..OurNetConfig::default() };
        let params: ParamStore<f32> = init_params(&cfg, 0)?;
        let g = Graph::new();
        let x = g.constant(vec![1, 2, 16, 16, 16], vec![0.5; 2 * 4096])?;
        let out = ournet_forward(x, &params.bind(&g, false), &cfg)?;
        println!("unnet={unnet:<5} ovnet={ovnet:<5} params={:>7}  x_f={:?}", params.num_scalars(), out.x_f.shape());
        for b in &out.branches {
            println!("    {:?}: e3={:?} head={:?}", b.branch, b.features.e3.shape(), b.features.head.shape());
        }
    }
    Ok(())
}
