//! Cascade orchestration: case records, patch sampling, per-stage training
//! and cascaded inference.
//!
//! Stage 1 sees `[λ, μ_mlaa]`. Every later stage sees `[λ, μ_mlaa, prior]`,
//! where the prior comes from running the frozen earlier stages and then
//! matching and registering an atlas entry to their prediction. Stages are
//! trained one after another and never touch each other's parameters.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::ournet::{init_params, ournet_forward, predict, total_loss, OurNetConfig};
use crate::ppgm::{generate_prior, AtlasDataset, DemonsConfig, PriorReport};
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore};
use crate::volume::{normalize_activity, normalize_mu, read_volume, write_volume, Volume3D, VolumeKind, ACTIVITY_SIGMA};

/// Optimisation and sampling settings shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patches_per_volume: usize,
    /// Cubic patch extent; a multiple of 4.
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { steps: 500, adam: AdamConfig::default(), batch_size: 4, patches_per_volume: 32, patch_size: 16, seed: 0 }
    }
}

/// How a whole volume is pushed through a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inference {
    /// One pass over the volume, padded to a multiple of 4.
    Whole,
    /// Overlapping cubic windows, averaged where they overlap.
    Sliding { window: usize, stride: usize },
}

impl fmt::Display for Inference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inference::Whole => write!(f, "whole"),
            Inference::Sliding { window, stride } => write!(f, "sliding:{window}:{stride}"),
        }
    }
}

impl FromStr for Inference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "whole" {
            return Ok(Inference::Whole);
        }
        let parts: Vec<&str> = s.split(':').collect();
        if let ["sliding", w, st] = parts.as_slice() {
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("inference: bad number {v:?}")));
            return Ok(Inference::Sliding { window: parse(w)?, stride: parse(st)? });
        }
        Err(Error::Config(format!("inference: expected \"whole\" or \"sliding:W:S\", got {s:?}")))
    }
}

/// Everything needed to train and run a cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// One network configuration per stage.
    pub stages: Vec<OurNetConfig>,
    pub demons: DemonsConfig,
    pub train: TrainSettings,
    pub inference: Inference,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self::uniform(2, OurNetConfig::default())
    }
}

impl CascadeConfig {
    /// `n` stages sharing `net`, with input widths fixed to 2 then 3.
    pub fn uniform(n: usize, net: OurNetConfig) -> Self {
        let stages = (1..=n).map(|k| OurNetConfig { in_channels: stage_inputs(k), ..net }).collect();
        Self { stages, demons: DemonsConfig::default(), train: TrainSettings::default(), inference: Inference::Whole }
    }

    pub fn n_cascades(&self) -> usize {
        self.stages.len()
    }

    /// The same settings with only the first `n` stages.
    pub fn truncated(&self, n: usize) -> Self {
        Self { stages: self.stages[..n.min(self.stages.len())].to_vec(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("n_cascades must be at least 1".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if s.in_channels != stage_inputs(i + 1) {
                return Err(Error::Config(format!(
                    "stage {} must take {} input channels, config has {}",
                    i + 1,
                    stage_inputs(i + 1),
                    s.in_channels
                )));
            }
        }
        let t = &self.train;
        if t.patch_size == 0 || t.patch_size % 4 != 0 {
            return Err(Error::Config(format!("patch_size {} must be a positive multiple of 4", t.patch_size)));
        }
        if t.batch_size == 0 || t.patches_per_volume == 0 {
            return Err(Error::Config("batch_size and patches_per_volume must be positive".into()));
        }
        if !(t.adam.lr > 0.0) || !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if let Inference::Sliding { window, stride } = self.inference {
            if window == 0 || window % 4 != 0 || stride == 0 || stride > window {
                return Err(Error::Config(format!("sliding inference needs window % 4 == 0 and 0 < stride ≤ window, got {window}/{stride}")));
            }
        }
        self.demons.validate()
    }
}

/// Input width of stage `k` (1-based).
pub fn stage_inputs(k: usize) -> usize {
    if k <= 1 {
        2
    } else {
        3
    }
}

/// Dataset partition a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("split: expected train, val or test, got {s:?}"))),
        }
    }
}

/// Split tags for `n` cases in index order: training first, then validation,
/// then test, with `max(1, round(0.2n))` test and `round(0.1n)` validation cases.
pub fn desk_splits(n: usize) -> Vec<Split> {
    let test = ((0.2 * n as f64).round() as usize).max(1).min(n);
    let val = ((0.1 * n as f64).round() as usize).min(n - test);
    let train = n - test - val;
    let mut v = vec![Split::Train; train];
    v.extend(std::iter::repeat(Split::Val).take(val));
    v.extend(std::iter::repeat(Split::Test).take(test));
    v
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub lambda: PathBuf,
    pub mu_mlaa: PathBuf,
    pub mu_gt: PathBuf,
    pub split: Split,
}

impl CaseRecord {
    /// Case name: the folder holding the activity file, or its stem.
    pub fn id(&self) -> String {
        let name = |p: Option<&std::ffi::OsStr>| p.map(|s| s.to_string_lossy().into_owned());
        name(self.lambda.parent().and_then(Path::file_name))
            .or_else(|| name(self.lambda.file_stem()))
            .unwrap_or_default()
    }
}

/// Tab-separated list of cases: `lambda  mu_mlaa  mu_gt  split` per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingManifest {
    pub records: Vec<CaseRecord>,
}

impl TrainingManifest {
    /// Parses manifest text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("manifest line {}: expected 4 tab-separated fields, found {}", i + 1, f.len())));
            }
            let path = |s: &str| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            records.push(CaseRecord { lambda: path(f[0]), mu_mlaa: path(f[1]), mu_gt: path(f[2]), split: f[3].parse()? });
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&fs::read_to_string(path)?, base)
    }

    /// Manifest text with paths written as given.
    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\t{}\n", r.lambda.display(), r.mu_mlaa.display(), r.mu_gt.display(), r.split))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Loads every case of `split`.
    pub fn load_cases(&self, split: Split) -> Result<Vec<Case>> {
        self.split(split).map(Case::load).collect()
    }
}

/// Normalised network inputs of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInputs {
    pub lambda: Volume3D,
    pub mu_mlaa: Volume3D,
}

impl CaseInputs {
    /// Normalises raw or already-normalised volumes and checks they line up.
    pub fn new(lambda: Volume3D, mu_mlaa: Volume3D) -> Result<Self> {
        let lambda = match lambda.kind() {
            VolumeKind::Activity => normalize_activity(&lambda, ACTIVITY_SIGMA)?,
            VolumeKind::ActivityNormalized => lambda,
            k => return contract_err(format!("activity input has kind {k:?}")),
        };
        let mu_mlaa = as_mu_normalized(mu_mlaa, "μ_mlaa input")?;
        if lambda.dims() != mu_mlaa.dims() {
            return shape_err(format!("λ dims {:?} differ from μ_mlaa dims {:?}", lambda.dims(), mu_mlaa.dims()));
        }
        Ok(Self { lambda, mu_mlaa })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.lambda.dims()
    }

    /// Input channels of a stage: `[λ, μ_mlaa]` plus the prior when given.
    pub fn channels<'a>(&'a self, prior: Option<&'a Volume3D>) -> Result<Vec<&'a Volume3D>> {
        let mut v = vec![&self.lambda, &self.mu_mlaa];
        if let Some(p) = prior {
            if p.dims() != self.dims() {
                return shape_err(format!("prior dims {:?} differ from input dims {:?}", p.dims(), self.dims()));
            }
            v.push(p);
        }
        Ok(v)
    }
}

fn as_mu_normalized(v: Volume3D, what: &str) -> Result<Volume3D> {
    match v.kind() {
        VolumeKind::Mu => normalize_mu(&v),
        VolumeKind::MuNormalized => Ok(v),
        k => contract_err(format!("{what} has kind {k:?}")),
    }
}

/// A case with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub inputs: CaseInputs,
    pub mu_gt: Volume3D,
}

impl Case {
    pub fn new(id: impl Into<String>, inputs: CaseInputs, mu_gt: Volume3D) -> Result<Self> {
        let mu_gt = as_mu_normalized(mu_gt, "μ_gt")?;
        if mu_gt.dims() != inputs.dims() {
            return shape_err(format!("μ_gt dims {:?} differ from input dims {:?}", mu_gt.dims(), inputs.dims()));
        }
        Ok(Self { id: id.into(), inputs, mu_gt })
    }

    pub fn load(record: &CaseRecord) -> Result<Self> {
        let inputs = CaseInputs::new(read_volume(&record.lambda)?, read_volume(&record.mu_mlaa)?)?;
        Self::new(record.id(), inputs, read_volume(&record.mu_gt)?)
    }
}

/// `n` patch corners drawn uniformly over every fully-inside position.
pub fn patch_corners(dims: [usize; 3], n: usize, size: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Vec<[usize; 3]>> {
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return contract_err(format!("patch {size:?} does not fit in volume {dims:?}"));
    }
    Ok((0..n).map(|_| [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - size[a]))).collect())
}

/// Copies the `size` block at `corner` out of an x-fastest buffer.
pub fn crop(data: &[f32], dims: [usize; 3], corner: [usize; 3], size: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
    for z in corner[2]..corner[2] + size[2] {
        for y in corner[1]..corner[1] + size[1] {
            let row = corner[0] + dims[0] * (y + dims[1] * z);
            out.extend_from_slice(&data[row..row + size[0]]);
        }
    }
    out
}

/// Aligned crops of co-registered volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub corner: [usize; 3],
    /// One buffer per input volume, in input order.
    pub volumes: Vec<Vec<f32>>,
}

/// `n` aligned cubic patches of extent `size` from `volumes`, reproducible from `seed`.
pub fn patch_sampler(volumes: &[&Volume3D], n: usize, size: usize, seed: u64) -> Result<Vec<Patch>> {
    let Some(first) = volumes.first() else {
        return contract_err("patch_sampler needs at least one volume");
    };
    let dims = first.dims();
    if volumes.iter().any(|v| v.dims() != dims) {
        return shape_err("patch_sampler volumes are not shape-identical");
    }
    let s = [size; 3];
    let corners = patch_corners(dims, n, s, &mut rng::stream(seed, "patches"))?;
    Ok(corners
        .into_iter()
        .map(|c| Patch { corner: c, volumes: volumes.iter().map(|v| crop(v.data(), dims, c, s)).collect() })
        .collect())
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl fmt::Display for TrainLog {
    /// `step<TAB>loss` lines, steps counted from 1.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(f, "{}\t{l:.8e}", i + 1)?;
        }
        Ok(())
    }
}

/// Training material of one stage: a case plus its prior for stages ≥ 2.
#[derive(Debug, Clone, Copy)]
pub struct StageCase<'a> {
    pub case: &'a Case,
    pub prior: Option<&'a Volume3D>,
}

struct PatchPool {
    /// Per sample: stacked input channels and the target.
    samples: Vec<(Vec<f32>, Vec<f32>)>,
    in_channels: usize,
    size: usize,
}

/// Step-by-step Adam training of one stage on patches.
pub struct Trainer {
    net: OurNetConfig,
    settings: TrainSettings,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    pool: PatchPool,
    order: Vec<usize>,
    cursor: usize,
    shuffle: ChaCha8Rng,
    log: TrainLog,
}

impl Trainer {
    /// Samples the patch pool and initialises stage `stage` (1-based) of `cfg`.
    pub fn new(stage: usize, cases: &[StageCase<'_>], cfg: &CascadeConfig) -> Result<Self> {
        cfg.validate()?;
        if stage == 0 || stage > cfg.n_cascades() {
            return contract_err(format!("stage {stage} outside 1..={}", cfg.n_cascades()));
        }
        if cases.is_empty() {
            return contract_err("training needs at least one case");
        }
        let net = cfg.stages[stage - 1];
        let t = cfg.train;
        let mut samples = Vec::with_capacity(cases.len() * t.patches_per_volume);
        for (i, sc) in cases.iter().enumerate() {
            let prior = match (stage, sc.prior) {
                (1, _) => None,
                (_, Some(p)) => Some(p),
                (_, None) => return contract_err(format!("stage {stage} needs a prior for case {:?}", sc.case.id)),
            };
            let vols = sc.case.inputs.channels(prior)?;
            let dims = sc.case.inputs.dims();
            let s = [t.patch_size; 3];
            let mut rng = rng::indexed_stream(t.seed, "patches", i as u64);
            for c in patch_corners(dims, t.patches_per_volume, s, &mut rng)? {
                let mut x = Vec::with_capacity(net.in_channels * t.patch_size.pow(3));
                for v in &vols[..net.in_channels] {
                    x.extend(crop(v.data(), dims, c, s));
                }
                samples.push((x, crop(sc.case.mu_gt.data(), dims, c, s)));
            }
        }
        let params = init_params::<f32>(&net, t.seed.wrapping_add(stage as u64 - 1))?;
        let adam = AdamState::new(&params);
        let order = (0..samples.len()).collect();
        Ok(Self {
            net,
            settings: t,
            params,
            adam,
            pool: PatchPool { samples, in_channels: net.in_channels, size: t.patch_size },
            order,
            cursor: usize::MAX,
            shuffle: rng::indexed_stream(t.seed, "batches", stage as u64),
            log: TrainLog::default(),
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.settings.batch_size)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order.shuffle(&mut self.shuffle);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One Adam step on the next batch; returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        let (c, p) = (self.pool.in_channels, self.pool.size);
        let mut x = Vec::with_capacity(batch.len() * c * p * p * p);
        let mut y = Vec::with_capacity(batch.len() * p * p * p);
        for &i in &batch {
            x.extend_from_slice(&self.pool.samples[i].0);
            y.extend_from_slice(&self.pool.samples[i].1);
        }
        let g = Graph::new();
        let bound = self.params.bind(&g, true);
        let input = g.constant(vec![batch.len(), c, p, p, p], x)?;
        let target = g.constant(vec![batch.len(), 1, p, p, p], y)?;
        let out = ournet_forward(input, &bound, &self.net)?;
        let loss = total_loss(&out, target)?;
        let value = f64::from(loss.item());
        if !value.is_finite() {
            return Err(Error::Degenerate(format!("training loss became {value} at step {}", self.log.losses.len() + 1)));
        }
        g.backward(loss)?;
        let grads = bound.grads();
        drop(bound);
        adam_step(&mut self.params, &grads, &mut self.adam, &self.settings.adam)?;
        self.log.losses.push(value);
        Ok(value)
    }

    pub fn steps_done(&self) -> usize {
        self.log.losses.len()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn finish(self) -> (ParamStore<f32>, TrainLog) {
        (self.params, self.log)
    }
}

/// Trains stage `stage` for the configured number of steps.
pub fn train_stage(stage: usize, cases: &[StageCase<'_>], cfg: &CascadeConfig) -> Result<(ParamStore<f32>, TrainLog)> {
    let mut trainer = Trainer::new(stage, cases, cfg)?;
    for _ in 0..cfg.train.steps {
        trainer.step()?;
    }
    Ok(trainer.finish())
}

fn stack(channels: &[&Volume3D]) -> Vec<f32> {
    channels.iter().flat_map(|v| v.data().iter().copied()).collect()
}

/// Edge-replicating pad of an x-fastest buffer at the high end of each axis.
fn pad_edge(data: &[f32], dims: [usize; 3], to: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(to[0] * to[1] * to[2]);
    for z in 0..to[2] {
        let zs = z.min(dims[2] - 1);
        for y in 0..to[1] {
            let ys = y.min(dims[1] - 1);
            let row = dims[0] * (ys + dims[1] * zs);
            out.extend_from_slice(&data[row..row + dims[0]]);
            out.extend(std::iter::repeat(data[row + dims[0] - 1]).take(to[0] - dims[0]));
        }
    }
    out
}

fn run_network(channels: &[&Volume3D], params: &ParamStore<f32>, net: &OurNetConfig) -> Result<Vec<f32>> {
    if channels.len() != net.in_channels {
        return shape_err(format!("stage expects {} input channels, got {}", net.in_channels, channels.len()));
    }
    let dims = channels[0].dims();
    let padded = dims.map(|d| d.div_ceil(4) * 4);
    let input: Vec<f32> = if padded == dims {
        stack(channels)
    } else {
        channels.iter().flat_map(|v| pad_edge(v.data(), dims, padded)).collect()
    };
    let shape = vec![1, channels.len(), padded[2], padded[1], padded[0]];
    let out = predict(params, net, shape, input)?;
    Ok(if padded == dims { out } else { crop(&out, padded, [0; 3], dims) })
}

/// Whole-volume prediction of one stage, in normalised μ units.
pub fn infer_volume(inputs: &CaseInputs, prior: Option<&Volume3D>, params: &ParamStore<f32>, net: &OurNetConfig) -> Result<Volume3D> {
    let channels = inputs.channels(prior)?;
    let out = run_network(&channels, params, net)?;
    Volume3D::new(inputs.dims(), inputs.lambda.spacing(), VolumeKind::MuNormalized, out)
}

/// Window start positions along one axis: every `stride`, plus a final flush window.
fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *v.last().unwrap() != n - window {
        v.push(n - window);
    }
    v
}

/// Prediction from overlapping `window³` crops, averaged where they overlap.
/// Axes shorter than the window are covered by a single (padded) crop.
pub fn infer_sliding(
    inputs: &CaseInputs,
    prior: Option<&Volume3D>,
    params: &ParamStore<f32>,
    net: &OurNetConfig,
    window: usize,
    stride: usize,
) -> Result<Volume3D> {
    if window == 0 || stride == 0 {
        return contract_err("window and stride must be positive");
    }
    let channels = inputs.channels(prior)?;
    let dims = inputs.dims();
    let size = dims.map(|d| d.min(window));
    let starts = dims.map(|d| window_starts(d, window, stride));
    let mut acc = vec![0f64; dims[0] * dims[1] * dims[2]];
    let mut hits = vec![0u32; acc.len()];
    for &z0 in &starts[2] {
        for &y0 in &starts[1] {
            for &x0 in &starts[0] {
                let corner = [x0, y0, z0];
                let crops: Vec<Volume3D> = channels
                    .iter()
                    .map(|v| Volume3D::new(size, v.spacing(), v.kind(), crop(v.data(), dims, corner, size)))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Volume3D> = crops.iter().collect();
                let out = run_network(&refs, params, net)?;
                for z in 0..size[2] {
                    for y in 0..size[1] {
                        for x in 0..size[0] {
                            let i = (x0 + x) + dims[0] * ((y0 + y) + dims[1] * (z0 + z));
                            acc[i] += f64::from(out[x + size[0] * (y + size[1] * z)]);
                            hits[i] += 1;
                        }
                    }
                }
            }
        }
    }
    let data: Vec<f64> = acc.iter().zip(&hits).map(|(a, &h)| a / f64::from(h)).collect();
    Volume3D::from_f64(dims, inputs.lambda.spacing(), VolumeKind::MuNormalized, &data)
}

/// One stage's prediction using the configured inference mode.
pub fn infer_stage(inputs: &CaseInputs, prior: Option<&Volume3D>, params: &ParamStore<f32>, net: &OurNetConfig, mode: Inference) -> Result<Volume3D> {
    match mode {
        Inference::Whole => infer_volume(inputs, prior, params, net),
        Inference::Sliding { window, stride } => infer_sliding(inputs, prior, params, net, window, stride),
    }
}

/// Everything a cascade run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct PourOutput {
    /// The last stage's prediction.
    pub mu: Volume3D,
    /// Prediction of every stage, in order.
    pub stage_outputs: Vec<Volume3D>,
    /// Priors fed to stages 2, 3, ...
    pub priors: Vec<Volume3D>,
    pub reports: Vec<PriorReport>,
}

/// Alternates stage inference and prior generation over `stages`.
pub fn run_pour(inputs: &CaseInputs, stages: &[ParamStore<f32>], atlas: &AtlasDataset, cfg: &CascadeConfig) -> Result<PourOutput> {
    if stages.is_empty() || stages.len() > cfg.n_cascades() {
        return contract_err(format!("need 1..={} stage checkpoints, got {}", cfg.n_cascades(), stages.len()));
    }
    let mut stage_outputs = Vec::with_capacity(stages.len());
    let mut priors: Vec<Volume3D> = Vec::new();
    let mut reports = Vec::new();
    for (k, params) in stages.iter().enumerate() {
        if k > 0 {
            let (prior, _, report) = generate_prior(&stage_outputs[k - 1], atlas, &cfg.demons)?;
            priors.push(prior);
            reports.push(report);
        }
        let out = infer_stage(inputs, priors.last(), params, &cfg.stages[k], cfg.inference)?;
        stage_outputs.push(out);
    }
    Ok(PourOutput { mu: stage_outputs.last().unwrap().clone(), stage_outputs, priors, reports })
}

/// Checkpoint file name of stage `k`.
pub fn checkpoint_name(k: usize) -> String {
    format!("stage{k}.pour")
}

/// Priors for stage `stage` from the frozen earlier stages, one per case.
///
/// With a `cache` directory, priors are read from and written to
/// `cache/stage{k}/{id}.vvol`; the directory must belong to a single run.
pub fn stage_priors(
    stage: usize,
    cases: &[Case],
    earlier: &[ParamStore<f32>],
    atlas: &AtlasDataset,
    cfg: &CascadeConfig,
    cache: Option<&Path>,
) -> Result<Vec<Volume3D>> {
    if stage < 2 || earlier.len() < stage - 1 {
        return contract_err(format!("priors for stage {stage} need {} frozen stages", stage.saturating_sub(1)));
    }
    let dir = cache.map(|c| c.join(format!("stage{stage}")));
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    cases
        .par_iter()
        .map(|case| {
            let path = dir.as_ref().map(|d| d.join(format!("{}.vvol", case.id)));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                return read_volume(p);
            }
            let pred = run_pour(&case.inputs, &earlier[..stage - 1], atlas, cfg)?;
            let (prior, _, _) = generate_prior(&pred.mu, atlas, &cfg.demons)?;
            if let Some(p) = &path {
                write_volume(&prior, p)?;
            }
            Ok(prior)
        })
        .collect()
}

/// Trains every stage in order. Checkpoints and the per-stage loss logs go to
/// `out_dir` when given, and `progress` receives one line per finished phase.
pub fn train_cascade(
    cases: &[Case],
    atlas: &AtlasDataset,
    cfg: &CascadeConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<(Vec<ParamStore<f32>>, Vec<TrainLog>)> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut stages = Vec::new();
    let mut logs = Vec::new();
    for k in 1..=cfg.n_cascades() {
        let priors = if k == 1 {
            None
        } else {
            let p = stage_priors(k, cases, &stages, atlas, cfg, out_dir.map(|d| d.join("priors")).as_deref())?;
            progress(&format!("stage {k}: priors ready for {} cases", p.len()));
            Some(p)
        };
        let material: Vec<StageCase<'_>> = cases
            .iter()
            .enumerate()
            .map(|(i, case)| StageCase { case, prior: priors.as_ref().map(|p| &p[i]) })
            .collect();
        let (params, log) = train_stage(k, &material, cfg)?;
        progress(&format!(
            "stage {k}: trained {} steps, loss {:.4e} -> {:.4e}",
            log.losses.len(),
            log.losses.first().copied().unwrap_or(f64::NAN),
            log.losses.last().copied().unwrap_or(f64::NAN)
        ));
        if let Some(d) = out_dir {
            params.save(d.join(checkpoint_name(k)))?;
            fs::write(d.join(format!("stage{k}.log")), log.to_string())?;
        }
        stages.push(params);
        logs.push(log);
    }
    Ok((stages, logs))
}

/// Loads `stage1.pour ..= stage{n}.pour` from `dir`.
pub fn load_stages(dir: &Path, n: usize) -> Result<Vec<ParamStore<f32>>> {
    (1..=n).map(|k| ParamStore::load(dir.join(checkpoint_name(k)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_follow_desk_proportions() {
        let count = |v: &[Split], s: Split| v.iter().filter(|&&x| x == s).count();
        let v = desk_splits(18);
        assert_eq!((count(&v, Split::Train), count(&v, Split::Val), count(&v, Split::Test)), (12, 2, 4));
        let v = desk_splits(1);
        assert_eq!(v, vec![Split::Test]);
        let v = desk_splits(3);
        assert_eq!(count(&v, Split::Test), 1);
    }

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(32, 16, 8), vec![0, 8, 16]);
        assert_eq!(window_starts(36, 16, 8), vec![0, 8, 16, 20]);
        assert_eq!(window_starts(12, 16, 8), vec![0]);
    }

    #[test]
    fn edge_padding_replicates_the_border() {
        let data: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let p = pad_edge(&data, [2, 2, 2], [3, 2, 2]);
        assert_eq!(p, vec![0., 1., 1., 2., 3., 3., 4., 5., 5., 6., 7., 7.]);
        assert_eq!(crop(&p, [3, 2, 2], [0; 3], [2, 2, 2]), data);
    }

    #[test]
    fn inference_mode_round_trips() {
        for m in [Inference::Whole, Inference::Sliding { window: 16, stride: 8 }] {
            assert_eq!(m.to_string().parse::<Inference>().unwrap(), m);
        }
        assert!("sliding:16".parse::<Inference>().is_err());
    }

    #[test]
    fn config_checks_stage_widths() {
        let mut cfg = CascadeConfig::default();
        cfg.validate().unwrap();
        cfg.stages[1].in_channels = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::default();
        cfg.train.patch_size = 18;
        assert!(cfg.validate().is_err());
    }
}
