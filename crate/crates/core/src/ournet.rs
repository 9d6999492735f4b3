//! The over/under-representation network.
//!
//! Two encoder/decoder branches look at the input at different scales:
//! UnNet pools first (full, half, quarter resolution) and OvNet upsamples
//! first (full, double, quadruple resolution). Each branch ends in a
//! one-channel head and a self-attention connection gated by that head.
//! FuNet stays at full resolution: it concatenates the attended branch
//! features with a projection of the input, runs three restoration blocks
//! and adds resampled branch features after each block. All three heads are
//! supervised against the same target.
//!
//! Parameters live in a [`ParamStore`] under dotted names such as
//! `unnet.enc2.rseb1.ex1.weight` or `funet.fuse.o_d3.bias`; the configuration
//! can be recovered from a store with [`OurNetConfig::from_params`].

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{concat_channels, conv3d, dense, Bound, Graph, ParamStore, Real, Resample, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OurNetConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub frb_rseb_count: usize,
    pub se_reduction: usize,
    pub enable_unnet: bool,
    pub enable_ovnet: bool,
}

impl Default for OurNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            levels: 3,
            base_channels: 8,
            frb_rseb_count: 4,
            se_reduction: 2,
            enable_unnet: true,
            enable_ovnet: true,
        }
    }
}

/// The two encoder/decoder branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    UnNet,
    OvNet,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::UnNet => "unnet",
            Branch::OvNet => "ovnet",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Branch::UnNet => "u",
            Branch::OvNet => "o",
        }
    }

    /// Resampling from level `l` to level `l + 1`.
    fn step(self) -> Resample {
        match self {
            Branch::UnNet => Resample::Down2,
            Branch::OvNet => Resample::Up2,
        }
    }

    fn step_back(self) -> Resample {
        match self {
            Branch::UnNet => Resample::Up2,
            Branch::OvNet => Resample::Down2,
        }
    }

    /// Brings a level-`level` feature back to input resolution.
    fn to_input(self, level: usize) -> Option<Resample> {
        match (self, level) {
            (_, 1) => None,
            (Branch::UnNet, 2) => Some(Resample::Up2),
            (Branch::UnNet, _) => Some(Resample::Up4),
            (Branch::OvNet, 2) => Some(Resample::Down2),
            (Branch::OvNet, _) => Some(Resample::Down4),
        }
    }
}

impl OurNetConfig {
    /// Feature widths of levels 1..=3 of a branch.
    pub fn schedule(&self, branch: Branch) -> [usize; 3] {
        let c = self.base_channels;
        match branch {
            Branch::UnNet => [c, 2 * c, 4 * c],
            Branch::OvNet => [c, c, c],
        }
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut v = Vec::new();
        if self.enable_unnet {
            v.push(Branch::UnNet);
        }
        if self.enable_ovnet {
            v.push(Branch::OvNet);
        }
        v
    }

    /// Width of the FuNet feature stream.
    pub fn fusion_channels(&self) -> usize {
        self.base_channels * (1 + self.branches().len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != 3 {
            return Err(Error::Config(format!("levels must be 3, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.frb_rseb_count == 0 {
            return Err(Error::Config("in_channels, base_channels and frb_rseb_count must be positive".into()));
        }
        if self.se_reduction == 0 || self.base_channels < self.se_reduction {
            return Err(Error::Config(format!(
                "se_reduction {} must be positive and at most base_channels {}",
                self.se_reduction, self.base_channels
            )));
        }
        Ok(())
    }

    /// Recovers the configuration a store was built with.
    pub fn from_params<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let shape = |name: &str| {
            store
                .get(name)
                .map(|p| p.shape.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let init = shape("funet.init.conv.weight")?;
        let (base_channels, in_channels) = (init[0], init[1]);
        let se = shape("funet.frb1.rseb0.se1.weight")?;
        let fusion = se[1];
        let hidden = se[0];
        let mut frb_rseb_count = 0;
        while store.get(&format!("funet.frb1.rseb{frb_rseb_count}.ex1.weight")).is_some() {
            frb_rseb_count += 1;
        }
        let se_reduction = (1..=base_channels)
            .find(|r| (fusion / r).max(1) == hidden)
            .ok_or_else(|| Error::Format(format!("SE width {hidden} does not fit FuNet width {fusion}")))?;
        let cfg = Self {
            in_channels,
            levels: 3,
            base_channels,
            frb_rseb_count,
            se_reduction,
            enable_unnet: store.get("unnet.head.weight").is_some(),
            enable_ovnet: store.get("ovnet.head.weight").is_some(),
        };
        cfg.validate()?;
        if cfg.fusion_channels() != fusion {
            return Err(Error::Format(format!(
                "checkpoint FuNet width {fusion} inconsistent with base width {base_channels}"
            )));
        }
        Ok(cfg)
    }
}

struct Init<'a, T: Real, R: rand::Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    se_reduction: usize,
}

impl<T: Real, R: rand::Rng> Init<'_, T, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let fan_in = cin * k * k * k;
        let bound = (1.0 / fan_in as f64).sqrt();
        self.store.insert_uniform(format!("{name}.weight"), vec![cout, cin, k, k, k], bound, self.rng)?;
        self.store.insert_uniform(format!("{name}.bias"), vec![cout], bound, self.rng)
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (1.0 / fan_in as f64).sqrt();
        self.store.insert_uniform(format!("{name}.weight"), vec![fan_out, fan_in], bound, self.rng)?;
        self.store.insert_uniform(format!("{name}.bias"), vec![fan_out], bound, self.rng)
    }

    fn rseb(&mut self, name: &str, ch: usize) -> Result<()> {
        let hidden = (ch / self.se_reduction).max(1);
        self.conv(&format!("{name}.ex1"), ch, ch, 3)?;
        self.conv(&format!("{name}.ex2"), ch, ch, 3)?;
        self.dense(&format!("{name}.se1"), ch, hidden)?;
        self.dense(&format!("{name}.se2"), hidden, ch)
    }

    fn rseb_pair(&mut self, name: &str, ch: usize) -> Result<()> {
        self.rseb(&format!("{name}.rseb0"), ch)?;
        self.rseb(&format!("{name}.rseb1"), ch)
    }
}

/// Draws every parameter uniformly in `±sqrt(1 / fan_in)` from the `init` stream of `seed`.
pub fn init_params<T: Real>(cfg: &OurNetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, "init");
    let mut p = Init { store: &mut store, rng: &mut rng, se_reduction: cfg.se_reduction };
    for b in cfg.branches() {
        let n = b.prefix();
        let [c1, c2, c3] = cfg.schedule(b);
        p.conv(&format!("{n}.stem.conv"), cfg.in_channels, c1, 3)?;
        p.rseb(&format!("{n}.stem.rseb"), c1)?;
        p.rseb_pair(&format!("{n}.enc1"), c1)?;
        p.conv(&format!("{n}.level2.conv"), c1, c2, 3)?;
        p.rseb_pair(&format!("{n}.enc2"), c2)?;
        p.conv(&format!("{n}.level3.conv"), c2, c3, 3)?;
        p.rseb_pair(&format!("{n}.enc3"), c3)?;
        p.rseb_pair(&format!("{n}.dec3"), c3)?;
        p.conv(&format!("{n}.merge2.conv"), c3 + c2, c2, 3)?;
        p.rseb_pair(&format!("{n}.dec2"), c2)?;
        p.conv(&format!("{n}.merge1.conv"), c2 + c1, c1, 3)?;
        p.rseb_pair(&format!("{n}.dec1"), c1)?;
        p.conv(&format!("{n}.head"), c1, 1, 1)?;
        p.conv(&format!("{n}.att1"), c1, c1, 3)?;
        p.conv(&format!("{n}.att2"), 1, c1, 3)?;
    }
    let cf = cfg.fusion_channels();
    p.conv("funet.init.conv", cfg.in_channels, cfg.base_channels, 3)?;
    p.rseb("funet.init.rseb", cfg.base_channels)?;
    for k in 1..=3 {
        for i in 0..cfg.frb_rseb_count {
            p.rseb(&format!("funet.frb{k}.rseb{i}"), cf)?;
        }
        let level = 4 - k;
        for b in cfg.branches() {
            let width = cfg.schedule(b)[level - 1];
            for part in ["e", "d"] {
                p.conv(&format!("funet.fuse.{}_{part}{level}", b.short()), width, cf, 3)?;
            }
        }
    }
    p.conv("funet.out", cf, 1, 1)?;
    Ok(store)
}

fn conv_named<'g, T: Real>(x: Tensor<'g, T>, p: &Bound<'g, '_, T>, name: &str) -> Result<Tensor<'g, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let pad = w.shape()[2] / 2;
    conv3d(x, w, p.get(&format!("{name}.bias"))?, 1, pad)
}

/// Per-channel gates `sigmoid(dense2(relu(dense1(gap(f)))))` as a `(B, C)` tensor.
pub fn se_scales<'g, T: Real>(f: Tensor<'g, T>, p: &Bound<'g, '_, T>, prefix: &str) -> Result<Tensor<'g, T>> {
    let pooled = f.global_avg_pool()?;
    let hidden = dense(pooled, p.get(&format!("{prefix}.se1.weight"))?, p.get(&format!("{prefix}.se1.bias"))?)?;
    let gate = dense(hidden.relu(), p.get(&format!("{prefix}.se2.weight"))?, p.get(&format!("{prefix}.se2.bias"))?)?;
    Ok(gate.sigmoid())
}

/// Squeeze-and-excitation: rescales each channel of `f` by its gate.
pub fn se_layer<'g, T: Real>(f: Tensor<'g, T>, p: &Bound<'g, '_, T>, prefix: &str) -> Result<Tensor<'g, T>> {
    f.scale_channels(se_scales(f, p, prefix)?)
}

/// Residual squeeze-and-excitation block: `f + SE(conv(relu(conv(f))))`.
pub fn rseb_forward<'g, T: Real>(f: Tensor<'g, T>, p: &Bound<'g, '_, T>, prefix: &str) -> Result<Tensor<'g, T>> {
    let h = conv_named(f, p, &format!("{prefix}.ex1"))?.relu();
    let h = conv_named(h, p, &format!("{prefix}.ex2"))?;
    f.add(se_layer(h, p, prefix)?)
}

fn rseb_pair<'g, T: Real>(f: Tensor<'g, T>, p: &Bound<'g, '_, T>, prefix: &str) -> Result<Tensor<'g, T>> {
    let f = rseb_forward(f, p, &format!("{prefix}.rseb0"))?;
    rseb_forward(f, p, &format!("{prefix}.rseb1"))
}

/// Encoder and decoder features of one branch, finest level first.
#[derive(Debug, Clone, Copy)]
pub struct BranchFeatures<'g, T: Real> {
    pub e1: Tensor<'g, T>,
    pub e2: Tensor<'g, T>,
    pub e3: Tensor<'g, T>,
    pub d3: Tensor<'g, T>,
    pub d2: Tensor<'g, T>,
    pub d1: Tensor<'g, T>,
    pub head: Tensor<'g, T>,
}

impl<'g, T: Real> BranchFeatures<'g, T> {
    fn encoder(&self, level: usize) -> Tensor<'g, T> {
        [self.e1, self.e2, self.e3][level - 1]
    }

    fn decoder(&self, level: usize) -> Tensor<'g, T> {
        [self.d1, self.d2, self.d3][level - 1]
    }
}

fn check_divisible(shape: &[usize]) -> Result<()> {
    if shape.len() != 5 {
        return shape_err(format!("expected (B, C, D, H, W), got {shape:?}"));
    }
    if shape[2..].iter().any(|&n| n == 0 || n % 4 != 0) {
        return shape_err(format!("spatial extents {:?} must be positive multiples of 4", &shape[2..]));
    }
    Ok(())
}

/// Runs one encoder/decoder branch.
pub fn branch_forward<'g, T: Real>(
    x: Tensor<'g, T>,
    branch: Branch,
    p: &Bound<'g, '_, T>,
) -> Result<BranchFeatures<'g, T>> {
    check_divisible(&x.shape())?;
    let n = branch.prefix();
    let stem = rseb_forward(conv_named(x, p, &format!("{n}.stem.conv"))?, p, &format!("{n}.stem.rseb"))?;
    let e1 = rseb_pair(stem, p, &format!("{n}.enc1"))?;
    let l2 = conv_named(e1.resample(branch.step())?, p, &format!("{n}.level2.conv"))?;
    let e2 = rseb_pair(l2, p, &format!("{n}.enc2"))?;
    let l3 = conv_named(e2.resample(branch.step())?, p, &format!("{n}.level3.conv"))?;
    let e3 = rseb_pair(l3, p, &format!("{n}.enc3"))?;
    let d3 = rseb_pair(e3, p, &format!("{n}.dec3"))?;
    let m2 = concat_channels(&[d3.resample(branch.step_back())?, e2])?;
    let d2 = rseb_pair(conv_named(m2, p, &format!("{n}.merge2.conv"))?, p, &format!("{n}.dec2"))?;
    let m1 = concat_channels(&[d2.resample(branch.step_back())?, e1])?;
    let d1 = rseb_pair(conv_named(m1, p, &format!("{n}.merge1.conv"))?, p, &format!("{n}.dec1"))?;
    let head = conv_named(d1, p, &format!("{n}.head"))?;
    Ok(BranchFeatures { e1, e2, e3, d3, d2, d1, head })
}

/// The gate `sigmoid(P2(head))` of a branch's attention connection.
pub fn attention_map<'g, T: Real>(head: Tensor<'g, T>, p: &Bound<'g, '_, T>, branch: Branch) -> Result<Tensor<'g, T>> {
    Ok(conv_named(head, p, &format!("{}.att2", branch.prefix()))?.sigmoid())
}

/// `d1 + P1(d1) ⊙ sigmoid(P2(head))`.
pub fn attention_connect<'g, T: Real>(
    d1: Tensor<'g, T>,
    head: Tensor<'g, T>,
    p: &Bound<'g, '_, T>,
    branch: Branch,
) -> Result<Tensor<'g, T>> {
    let hs = head.shape();
    let ds = d1.shape();
    if hs.len() != 5 || hs[1] != 1 || hs[0] != ds[0] || hs[2..] != ds[2..] {
        return shape_err(format!("attention_connect: head {hs:?} is not a 1-channel map aligned with {ds:?}"));
    }
    let gate = attention_map(head, p, branch)?;
    let feat = conv_named(d1, p, &format!("{}.att1", branch.prefix()))?;
    d1.add(feat.mul(gate)?)
}

/// A branch's features together with its attended output.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput<'g, T: Real> {
    pub branch: Branch,
    pub features: BranchFeatures<'g, T>,
    pub att: Tensor<'g, T>,
}

/// The full-resolution fusion network; returns `X_F`.
pub fn funet_forward<'g, T: Real>(
    x: Tensor<'g, T>,
    branches: &[BranchOutput<'g, T>],
    p: &Bound<'g, '_, T>,
    cfg: &OurNetConfig,
) -> Result<Tensor<'g, T>> {
    let mut parts: Vec<Tensor<'g, T>> = branches.iter().map(|b| b.att).collect();
    parts.push(rseb_forward(conv_named(x, p, "funet.init.conv")?, p, "funet.init.rseb")?);
    let mut f = concat_channels(&parts)?;
    for k in 1..=3 {
        let mut h = f;
        for i in 0..cfg.frb_rseb_count {
            h = rseb_forward(h, p, &format!("funet.frb{k}.rseb{i}"))?;
        }
        f = f.add(h)?;
        let level = 4 - k;
        for b in branches {
            for (part, feat) in [("e", b.features.encoder(level)), ("d", b.features.decoder(level))] {
                let feat = match b.branch.to_input(level) {
                    Some(r) => feat.resample(r)?,
                    None => feat,
                };
                let name = format!("funet.fuse.{}_{part}{level}", b.branch.short());
                f = f.add(conv_named(feat, p, &name)?)?;
            }
        }
    }
    conv_named(f, p, "funet.out")
}

/// The three supervised heads and the intermediate branch outputs.
#[derive(Debug, Clone)]
pub struct OurNetOutput<'g, T: Real> {
    pub x_f: Tensor<'g, T>,
    pub x_u: Option<Tensor<'g, T>>,
    pub x_o: Option<Tensor<'g, T>>,
    pub branches: Vec<BranchOutput<'g, T>>,
}

/// Full forward pass.
pub fn ournet_forward<'g, T: Real>(x: Tensor<'g, T>, p: &Bound<'g, '_, T>, cfg: &OurNetConfig) -> Result<OurNetOutput<'g, T>> {
    let shape = x.shape();
    check_divisible(&shape)?;
    if shape[1] != cfg.in_channels {
        return shape_err(format!("input has {} channels, network expects {}", shape[1], cfg.in_channels));
    }
    let mut branches = Vec::new();
    for b in cfg.branches() {
        let features = branch_forward(x, b, p)?;
        let att = attention_connect(features.d1, features.head, p, b)?;
        branches.push(BranchOutput { branch: b, features, att });
    }
    let x_f = funet_forward(x, &branches, p, cfg)?;
    let head = |b: Branch| branches.iter().find(|o| o.branch == b).map(|o| o.features.head);
    Ok(OurNetOutput { x_f, x_u: head(Branch::UnNet), x_o: head(Branch::OvNet), branches })
}

/// Sum of the mean squared errors of every enabled head against `gt`.
pub fn total_loss<'g, T: Real>(out: &OurNetOutput<'g, T>, gt: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let mut loss = out.x_f.mse(gt)?;
    for h in [out.x_u, out.x_o].into_iter().flatten() {
        loss = loss.add(h.mse(gt)?)?;
    }
    Ok(loss)
}

/// Forward pass with frozen parameters; returns `X_F` values.
pub fn predict<T: Real>(store: &ParamStore<T>, cfg: &OurNetConfig, shape: Vec<usize>, input: Vec<T>) -> Result<Vec<T>> {
    let g = Graph::new();
    let p = store.bind(&g, false);
    let x = g.constant(shape, input)?;
    Ok(ournet_forward(x, &p, cfg)?.x_f.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c: usize) -> OurNetConfig {
        OurNetConfig { base_channels: c, se_reduction: 1, frb_rseb_count: 1, ..OurNetConfig::default() }
    }

    #[test]
    fn config_round_trips_through_params() {
        for cfg in [
            OurNetConfig::default(),
            OurNetConfig { in_channels: 3, enable_ovnet: false, ..small(2) },
            OurNetConfig { enable_unnet: false, enable_ovnet: false, se_reduction: 2, ..small(4) },
        ] {
            let store = init_params::<f32>(&cfg, 0).unwrap();
            assert_eq!(OurNetConfig::from_params(&store).unwrap(), cfg);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(OurNetConfig { levels: 4, ..OurNetConfig::default() }.validate().is_err());
        assert!(OurNetConfig { base_channels: 1, se_reduction: 2, ..OurNetConfig::default() }.validate().is_err());
        assert!(OurNetConfig { in_channels: 0, ..OurNetConfig::default() }.validate().is_err());
    }

    #[test]
    fn ovnet_schedule_is_flat() {
        let cfg = small(3);
        assert_eq!(cfg.schedule(Branch::OvNet), [3, 3, 3]);
        assert_eq!(cfg.schedule(Branch::UnNet), [3, 6, 12]);
        assert_eq!(cfg.fusion_channels(), 9);
    }
}
