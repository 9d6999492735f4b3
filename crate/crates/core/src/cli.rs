//! The `pour` command line and its flat `key = value` run configuration.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for bad
//! arguments or an invalid configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cascade::{
    desk_splits, infer_stage, load_stages, run_pour, train_cascade, CascadeConfig, CaseInputs, CaseRecord, Inference, Split,
    TrainingManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, format_table, SsimOptions};
use crate::ournet::OurNetConfig;
use crate::phantom::{generate_atlas, synthetic_case, DegradeParams, PhantomSpec};
use crate::ppgm::{atlas_match, atlas_match_coarse, demons_register, generate_prior, AtlasDataset};
use crate::tensor::ParamStore;
use crate::volume::{read_volume, write_volume, Volume3D, VolumeKind};

/// Every setting a command can take from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_cascades: usize,
    pub net: OurNetConfig,
    pub cascade: CascadeConfig,
    pub phantom: PhantomSpec,
    pub degrade: DegradeParams,
    pub atlas_size: usize,
    pub ssim: SsimOptions,
    /// Restrict PSNR/RMSE to voxels where the reference exceeds 5 % of its range.
    pub body_mask: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = OurNetConfig::default();
        Self {
            seed: 0,
            n_cascades: 2,
            net,
            cascade: CascadeConfig::uniform(2, net),
            phantom: PhantomSpec::default(),
            degrade: DegradeParams::default(),
            atlas_size: 64,
            ssim: SsimOptions::default(),
            body_mask: false,
        }
    }
}

/// Config keys with a one-line description each, in dump order.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "root seed of every random sub-stream"),
    ("n_cascades", "number of network stages"),
    ("base_channels", "feature width C of the first level"),
    ("frb_rseb_count", "RSEBs per feature restoration block"),
    ("se_reduction", "squeeze-and-excitation reduction ratio"),
    ("enable_unnet", "build the downsampling branch"),
    ("enable_ovnet", "build the upsampling branch"),
    ("steps", "Adam steps per stage"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("batch_size", "patches per step"),
    ("patches_per_volume", "patches sampled from each training case"),
    ("patch_size", "cubic patch extent, a multiple of 4"),
    ("inference", "whole | sliding:WINDOW:STRIDE"),
    ("demons.pyramid_levels", "registration pyramid depth"),
    ("demons.iterations", "iterations per level, coarsest first, comma separated"),
    ("demons.fluid_sigma", "update smoothing sigma (voxels)"),
    ("demons.diffusion_sigma", "field smoothing sigma (voxels)"),
    ("demons.sigma_x", "intensity scale of the demons force"),
    ("demons.convergence_tol", "relative MSE change that counts as converged"),
    ("demons.squarings", "scaling-and-squaring steps"),
    ("phantom.size", "cubic phantom extent, a multiple of 4"),
    ("phantom.spacing_mm", "voxel spacing (mm)"),
    ("degrade.full_counts", "expected total counts at full dose"),
    ("degrade.mu_noise", "attenuation noise at full counts (1/cm)"),
    ("degrade.crosstalk", "activity-to-attenuation crosstalk (1/cm)"),
    ("degrade.fwhm_mm", "activity post-smoothing FWHM (mm)"),
    ("degrade.mu_fwhm_mm", "attenuation post-smoothing FWHM (mm)"),
    ("degrade.noise_fwhm_vox", "attenuation noise correlation FWHM (voxels)"),
    ("atlas.size", "entries in a generated atlas"),
    ("metrics.ssim_window", "SSIM cube extent"),
    ("metrics.ssim_k1", "SSIM luminance constant"),
    ("metrics.ssim_k2", "SSIM contrast constant"),
    ("metrics.mask", "none | body"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Value of `key` as it would appear in a config file.
    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.cascade.train;
        let d = &self.cascade.demons;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "n_cascades" => self.n_cascades.to_string(),
            "base_channels" => self.net.base_channels.to_string(),
            "frb_rseb_count" => self.net.frb_rseb_count.to_string(),
            "se_reduction" => self.net.se_reduction.to_string(),
            "enable_unnet" => self.net.enable_unnet.to_string(),
            "enable_ovnet" => self.net.enable_ovnet.to_string(),
            "steps" => t.steps.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "patches_per_volume" => t.patches_per_volume.to_string(),
            "patch_size" => t.patch_size.to_string(),
            "inference" => self.cascade.inference.to_string(),
            "demons.pyramid_levels" => d.pyramid_levels.to_string(),
            "demons.iterations" => d.iterations.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            "demons.fluid_sigma" => d.fluid_sigma.to_string(),
            "demons.diffusion_sigma" => d.diffusion_sigma.to_string(),
            "demons.sigma_x" => d.sigma_x.to_string(),
            "demons.convergence_tol" => d.convergence_tol.to_string(),
            "demons.squarings" => d.squarings.to_string(),
            "phantom.size" => self.phantom.size.to_string(),
            "phantom.spacing_mm" => self.phantom.spacing_mm.to_string(),
            "degrade.full_counts" => self.degrade.full_counts.to_string(),
            "degrade.mu_noise" => self.degrade.mu_noise.to_string(),
            "degrade.crosstalk" => self.degrade.crosstalk.to_string(),
            "degrade.fwhm_mm" => self.degrade.fwhm_mm.to_string(),
            "degrade.mu_fwhm_mm" => self.degrade.mu_fwhm_mm.to_string(),
            "degrade.noise_fwhm_vox" => self.degrade.noise_fwhm_vox.to_string(),
            "atlas.size" => self.atlas_size.to_string(),
            "metrics.ssim_window" => self.ssim.window.to_string(),
            "metrics.ssim_k1" => self.ssim.k1.to_string(),
            "metrics.ssim_k2" => self.ssim.k2.to_string(),
            "metrics.mask" => if self.body_mask { "body" } else { "none" }.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.cascade.train;
        let d = &mut self.cascade.demons;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "n_cascades" => self.n_cascades = parse_num(key, v)?,
            "base_channels" => self.net.base_channels = parse_num(key, v)?,
            "frb_rseb_count" => self.net.frb_rseb_count = parse_num(key, v)?,
            "se_reduction" => self.net.se_reduction = parse_num(key, v)?,
            "enable_unnet" => self.net.enable_unnet = parse_bool(key, v)?,
            "enable_ovnet" => self.net.enable_ovnet = parse_bool(key, v)?,
            "steps" => t.steps = parse_num(key, v)?,
            "lr" => t.adam.lr = parse_num(key, v)?,
            "beta1" => t.adam.beta1 = parse_num(key, v)?,
            "beta2" => t.adam.beta2 = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "patches_per_volume" => t.patches_per_volume = parse_num(key, v)?,
            "patch_size" => t.patch_size = parse_num(key, v)?,
            "inference" => self.cascade.inference = v.parse::<Inference>()?,
            "demons.pyramid_levels" => d.pyramid_levels = parse_num(key, v)?,
            "demons.iterations" => {
                d.iterations = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
            }
            "demons.fluid_sigma" => d.fluid_sigma = parse_num(key, v)?,
            "demons.diffusion_sigma" => d.diffusion_sigma = parse_num(key, v)?,
            "demons.sigma_x" => d.sigma_x = parse_num(key, v)?,
            "demons.convergence_tol" => d.convergence_tol = parse_num(key, v)?,
            "demons.squarings" => d.squarings = parse_num(key, v)?,
            "phantom.size" => self.phantom.size = parse_num(key, v)?,
            "phantom.spacing_mm" => self.phantom.spacing_mm = parse_num(key, v)?,
            "degrade.full_counts" => self.degrade.full_counts = parse_num(key, v)?,
            "degrade.mu_noise" => self.degrade.mu_noise = parse_num(key, v)?,
            "degrade.crosstalk" => self.degrade.crosstalk = parse_num(key, v)?,
            "degrade.fwhm_mm" => self.degrade.fwhm_mm = parse_num(key, v)?,
            "degrade.mu_fwhm_mm" => self.degrade.mu_fwhm_mm = parse_num(key, v)?,
            "degrade.noise_fwhm_vox" => self.degrade.noise_fwhm_vox = parse_num(key, v)?,
            "atlas.size" => self.atlas_size = parse_num(key, v)?,
            "metrics.ssim_window" => self.ssim.window = parse_num(key, v)?,
            "metrics.ssim_k1" => self.ssim.k1 = parse_num(key, v)?,
            "metrics.ssim_k2" => self.ssim.k2 = parse_num(key, v)?,
            "metrics.mask" => {
                self.body_mask = match v {
                    "body" => true,
                    "none" => false,
                    _ => return Err(Error::Config(format!("metrics.mask: expected none or body, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Rebuilds derived settings after an edit.
    fn sync(&mut self) {
        let stages = CascadeConfig::uniform(self.n_cascades, self.net).stages;
        self.cascade.stages = stages;
        self.cascade.train.seed = self.seed;
        self.phantom.seed = self.seed;
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.cascade.validate()?;
        if self.atlas_size == 0 {
            return Err(Error::Config("atlas.size must be positive".into()));
        }
        if self.ssim.window == 0 {
            return Err(Error::Config("metrics.ssim_window must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its value and description.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, doc) in SCHEMA {
            let _ = writeln!(s, "# {doc}\n{k} = {}", self.get(k).expect("schema keys are known"));
        }
        s
    }
}

#[derive(Parser, Debug)]
#[command(name = "pour", version, about = "Attenuation-map synthesis from low-count PET estimates")]
struct Cli {
    /// Worker threads for atlas scans and per-case work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantom cases, degraded inputs and manifests.
    Phantom(PhantomArgs),
    /// Train every cascade stage on the training split of a manifest.
    Train(TrainArgs),
    /// Run one stage checkpoint on a case.
    Infer(InferArgs),
    /// Find the atlas entry closest to a volume.
    Match(MatchArgs),
    /// Demons-register a moving volume, or the best atlas match, to a fixed volume.
    Register(RegisterArgs),
    /// Cascaded inference over several stages.
    #[command(subcommand)]
    Cascade(CascadeCommand),
    /// PSNR, SSIM and RMSE of predictions against references.
    Eval(EvalArgs),
    /// Print or check run configurations.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
struct ConfigOpt {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigOpt {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Cubic extent; overrides phantom.size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.025")]
    fractions: Vec<f64>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write an atlas of this many entries to OUT/atlas.
    #[arg(long)]
    atlas: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Atlas folder; required when training more than one stage.
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// Folder for checkpoints, logs and cached priors.
    #[arg(long)]
    out: PathBuf,
    /// Overrides n_cascades.
    #[arg(long)]
    stages: Option<usize>,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args, Debug)]
struct CaseArgs {
    #[arg(long)]
    lambda: PathBuf,
    #[arg(long = "mu-mlaa")]
    mu_mlaa: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    case: CaseArgs,
    /// Prior volume for stages after the first.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Compare block-averaged volumes at this factor.
    #[arg(long)]
    coarse: Option<usize>,
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false, args = ["moving", "atlas"])]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: Option<PathBuf>,
    /// Register the best match of this atlas instead of a given moving volume.
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Subcommand, Debug)]
enum CascadeCommand {
    /// Run stages 1..=N on one case.
    Run(CascadeRunArgs),
}

#[derive(Args, Debug)]
struct CascadeRunArgs {
    /// Folder holding stage1.pour, stage2.pour, ...
    #[arg(long)]
    checkpoints: PathBuf,
    /// Overrides n_cascades.
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write every stage output and prior next to OUT.
    #[arg(long)]
    keep_stages: bool,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction volumes (repeatable, paired with --ref in order).
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long = "ref", required = true)]
    reference: Vec<PathBuf>,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args, Debug)]
#[group(id = "action", required = true, multiple = false, args = ["dump_defaults", "check"])]
struct ConfigArgs {
    /// Print every key with its default value.
    #[arg(long)]
    dump_defaults: bool,
    /// Validate a config file and print it fully resolved.
    #[arg(long)]
    check: Option<PathBuf>,
}

/// How a command ended.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return if code == 0 { 0 } else { 2 };
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a, out),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Match(a) => cmd_match(a, out),
        Command::Register(a) => cmd_register(a, out),
        Command::Cascade(CascadeCommand::Run(a)) => cmd_cascade(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Config(a) => cmd_config(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

/// `pour` with the process arguments and standard streams.
pub fn main_exit_code() -> i32 {
    run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

fn frac_tag(f: f64) -> String {
    format!("f{f}")
}

fn cmd_phantom(a: PhantomArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = a.cfg.resolve()?;
    if let Some(s) = a.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(s) = a.size {
        cfg.phantom.size = s;
    }
    cfg.validate()?;
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    if a.fractions.is_empty() || a.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Failure::Usage("--fractions must lie in (0, 1]".into()));
    }
    fs::create_dir_all(&a.out)?;
    let splits = desk_splits(a.count);
    let mut manifests = vec![TrainingManifest::default(); a.fractions.len()];
    for i in 0..a.count {
        let case = synthetic_case(i as u64, &cfg.phantom, &a.fractions, &cfg.degrade)?;
        let name = format!("case_{i:04}");
        let dir = a.out.join(&name);
        fs::create_dir_all(&dir)?;
        write_volume(&case.phantom.activity, dir.join("lambda_gt.vvol"))?;
        write_volume(&case.phantom.mu, dir.join("mu_gt.vvol"))?;
        for (j, (f, lam, mu)) in case.degraded.iter().enumerate() {
            let tag = frac_tag(*f);
            write_volume(lam, dir.join(format!("lambda_mlaa_{tag}.vvol")))?;
            write_volume(mu, dir.join(format!("mu_mlaa_{tag}.vvol")))?;
            manifests[j].records.push(CaseRecord {
                lambda: Path::new(&name).join(format!("lambda_mlaa_{tag}.vvol")),
                mu_mlaa: Path::new(&name).join(format!("mu_mlaa_{tag}.vvol")),
                mu_gt: Path::new(&name).join("mu_gt.vvol"),
                split: splits[i],
            });
        }
    }
    for (f, m) in a.fractions.iter().zip(&manifests) {
        m.save(a.out.join(format!("manifest_{}.tsv", frac_tag(*f))))?;
    }
    manifests[0].save(a.out.join("manifest.tsv"))?;
    if let Some(n) = a.atlas {
        generate_atlas(n, &cfg.phantom, cfg.seed)?.write_dir(a.out.join("atlas"))?;
    }
    let line = manifests[0].to_text();
    write!(out, "{line}")?;
    Ok(())
}

fn load_atlas(path: Option<&PathBuf>, needed: bool) -> std::result::Result<Option<AtlasDataset>, Failure> {
    match path {
        Some(p) => Ok(Some(AtlasDataset::load_dir(p)?)),
        None if needed => Err(Failure::Usage("--atlas is required for more than one stage".into())),
        None => Ok(None),
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let mut cfg = a.cfg.resolve()?;
    if let Some(n) = a.stages {
        cfg.set("n_cascades", &n.to_string())?;
        cfg.validate()?;
    }
    let manifest = TrainingManifest::load(&a.manifest)?;
    let cases = manifest.load_cases(Split::Train)?;
    if cases.is_empty() {
        return Err(Failure::Runtime("manifest has no training cases".into()));
    }
    let atlas = load_atlas(a.atlas.as_ref(), cfg.n_cascades > 1)?;
    let placeholder;
    let atlas_ref = match &atlas {
        Some(at) => at,
        None => {
            placeholder = AtlasDataset::new(vec![("0000".into(), cases[0].mu_gt.clone())])?;
            &placeholder
        }
    };
    let (_, logs) = train_cascade(&cases, atlas_ref, &cfg.cascade, Some(&a.out), &mut |line| {
        let _ = writeln!(err, "{line}");
    })?;
    for (k, log) in logs.iter().enumerate() {
        writeln!(out, "# stage {}", k + 1)?;
        write!(out, "{log}")?;
    }
    Ok(())
}

fn case_inputs(c: &CaseArgs) -> Result<CaseInputs> {
    CaseInputs::new(read_volume(&c.lambda)?, read_volume(&c.mu_mlaa)?)
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let params = ParamStore::<f32>::load(&a.checkpoint)?;
    let net = OurNetConfig::from_params(&params)?;
    let inputs = case_inputs(&a.case)?;
    let prior = a.prior.as_ref().map(read_volume).transpose()?;
    let prior = prior.map(|p| p.with_kind(VolumeKind::MuNormalized));
    let mu = infer_stage(&inputs, prior.as_ref(), &params, &net, cfg.cascade.inference)?;
    write_volume(&mu, &a.out)?;
    writeln!(out, "wrote={}", a.out.display())?;
    Ok(())
}

fn cmd_match(a: MatchArgs, out: &mut dyn Write) -> CmdResult {
    let atlas = AtlasDataset::load_dir(&a.atlas)?;
    let query = read_volume(&a.query)?;
    let m = match a.coarse {
        Some(f) => atlas_match_coarse(&query, &atlas, f)?,
        None => atlas_match(&query, &atlas)?,
    };
    writeln!(out, "matched_index={}\tmatched_id={}\tmatched_mse={:.6e}", m.index, atlas.id(m.index), m.mse)?;
    Ok(())
}

fn cmd_register(a: RegisterArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let fixed = read_volume(&a.fixed)?;
    if let Some(dir) = &a.atlas {
        let atlas = AtlasDataset::load_dir(dir)?;
        let (prior, _, report) = generate_prior(&fixed, &atlas, &cfg.cascade.demons)?;
        write_volume(&prior, &a.out)?;
        writeln!(out, "{report}")?;
        return Ok(());
    }
    let moving = read_volume(a.moving.as_ref().expect("clap enforces one source"))?;
    let (field, warped) = demons_register(&fixed, &moving, &cfg.cascade.demons)?;
    write_volume(&warped, &a.out)?;
    let before = crate::metrics::mse(&moving, &fixed)?;
    let after = crate::metrics::mse(&warped, &fixed)?;
    writeln!(out, "mse_before={before:.6e}")?;
    writeln!(out, "mse_after={after:.6e}")?;
    writeln!(out, "mean_displacement={:.6}", field.mean_magnitude())?;
    writeln!(out, "jacobian_positive_fraction={:.6}", field.jacobian_positive_fraction())?;
    Ok(())
}

fn cmd_cascade(a: CascadeRunArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = a.cfg.resolve()?;
    if let Some(n) = a.stages {
        cfg.set("n_cascades", &n.to_string())?;
        cfg.validate()?;
    }
    let n = cfg.n_cascades;
    let stages = load_stages(&a.checkpoints, n)?;
    for (k, p) in stages.iter().enumerate() {
        let found = OurNetConfig::from_params(p)?;
        cfg.cascade.stages[k] = found;
    }
    let atlas = load_atlas(a.atlas.as_ref(), n > 1)?;
    let inputs = case_inputs(&a.case)?;
    let result = match &atlas {
        Some(at) => run_pour(&inputs, &stages, at, &cfg.cascade)?,
        None => {
            let single = AtlasDataset::new(vec![("0000".into(), inputs.mu_mlaa.clone())])?;
            run_pour(&inputs, &stages, &single, &cfg.cascade)?
        }
    };
    write_volume(&result.mu, &a.out)?;
    if a.keep_stages {
        let stem = a.out.with_extension("");
        for (k, v) in result.stage_outputs.iter().enumerate() {
            write_volume(v, format!("{}.stage{}.vvol", stem.display(), k + 1))?;
        }
        for (k, v) in result.priors.iter().enumerate() {
            write_volume(v, format!("{}.prior{}.vvol", stem.display(), k + 2))?;
        }
    }
    for (k, r) in result.reports.iter().enumerate() {
        writeln!(out, "# prior for stage {}", k + 2)?;
        writeln!(out, "{r}")?;
    }
    writeln!(out, "wrote={}", a.out.display())?;
    Ok(())
}

/// Voxels where `reference` exceeds 5 % of its range above its minimum.
pub fn body_mask(reference: &Volume3D) -> Vec<bool> {
    let (lo, hi) = reference.min_max();
    let t = lo + 0.05 * (hi - lo);
    reference.data().iter().map(|&v| v > t).collect()
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    if a.pred.len() != a.reference.len() {
        return Err(Failure::Usage(format!("{} --pred files but {} --ref files", a.pred.len(), a.reference.len())));
    }
    let mut rows = Vec::new();
    for (p, r) in a.pred.iter().zip(&a.reference) {
        let pred = read_volume(p)?;
        let reference = read_volume(r)?;
        let mask = cfg.body_mask.then(|| body_mask(&reference));
        let report = evaluate_case(&pred, &reference, mask.as_deref(), &cfg.ssim)?;
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((id, report));
    }
    write!(out, "{}", format_table(&rows))?;
    Ok(())
}

fn cmd_config(a: ConfigArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = match &a.check {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    write!(out, "{}", cfg.dump())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_defaults() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.dump()).unwrap(), d);
    }

    #[test]
    fn unknown_and_bad_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("steps = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("phantom.size = 30"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn schema_covers_every_key() {
        let d = RunConfig::default();
        for (k, _) in SCHEMA {
            let v = d.get(k).unwrap();
            let mut c = d.clone();
            c.set(k, &v).unwrap();
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn n_cascades_rebuilds_stage_widths() {
        let c = RunConfig::parse("n_cascades = 3\nbase_channels = 4").unwrap();
        let widths: Vec<usize> = c.cascade.stages.iter().map(|s| s.in_channels).collect();
        assert_eq!(widths, vec![2, 3, 3]);
        assert!(c.cascade.stages.iter().all(|s| s.base_channels == 4));
    }
}
