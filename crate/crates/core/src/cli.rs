//! The `rgflow` command line: one subcommand per pipeline stage.
//!
//! Every flag can also come from `--config FILE` (JSON, or TOML by
//! extension) as a flat table keyed by the flag's long name; flags given on
//! the command line win. Each run writes `run.json` into `--out` holding
//! the exact resolved arguments, and that file is itself accepted by
//! `--config`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::{self, InpaintArm, InpaintConfig};
use crate::data::{self, gen_msds_range, gen_pinwheel, Dequantizer, ImageSet, MsdsParams, PinwheelParams};
use crate::error::Error;
use crate::lattice::{LatentIndex, LatticeSpec, PixelRegion};
use crate::model::{FlatFlow2d, FlatFlowConfig, ModelConfig, Prior, PriorKind, RgFlowModel, TemperatureSchedule};
use crate::nn::{AdamWConfig, Checkpoint};
use crate::training::{self, evaluate, ImageData, PointData, TrainConfig, Trainer};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "rgflow", version, about = "Hierarchical flow models on images: data, training and analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct Global {
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for all randomness
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (falls back to RGFLOW_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON or TOML file of flag values; command-line flags win
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an MSDS dataset to PNG files plus a manifest
    GenDataset(GenDatasetArgs),
    /// Sample a pinwheel point cloud to CSV
    GenPinwheel(GenPinwheelArgs),
    /// Train a model by maximum likelihood
    Train(TrainArgs),
    /// Negative log-likelihood and bits per dimension on a dataset
    Eval(EvalArgs),
    /// Draw samples at one temperature or one per level
    Sample(SampleArgs),
    /// Receptive field of one latent
    Rf(RfArgs),
    /// Receptive-field strength histograms per level
    RfHist(RfHistArgs),
    /// Sweep one latent and decode
    Vary(VaryArgs),
    /// Hyperbolic or linear mixing of two images
    Mix(MixArgs),
    /// Fill a corrupted region by latent optimization
    Inpaint(InpaintArgs),
    /// Inference-cone latent counts for a pixel region
    Cones(ConesArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct GenDatasetArgs {
    /// 1: global color, random orientations; 2: global orientation, random colors
    #[arg(long, default_value_t = 1)]
    variant: u8,
    /// Number of images
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Index of the first image in the seeded stream
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Dataset name recorded in the manifest
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct GenPinwheelArgs {
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    legs: usize,
    #[arg(long, default_value_t = 0.3)]
    radial_std: f64,
    #[arg(long, default_value_t = 0.1)]
    tangential_std: f64,
    #[arg(long, default_value_t = 0.25)]
    rate: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ModelArgs {
    /// Hidden width of the residual networks
    #[arg(long, default_value_t = 48)]
    hidden: usize,
    /// Coupling blocks per level, comma separated (one value for all levels)
    #[arg(long, default_value = "4")]
    n_layer: String,
    /// Residual blocks per network
    #[arg(long, default_value_t = 4)]
    n_res: usize,
    /// Block edge m
    #[arg(long, default_value_t = 4)]
    kernel: usize,
    /// laplacian or gaussian
    #[arg(long, default_value = "laplacian")]
    prior: String,
    /// Prior scale (Laplace b or Gaussian sigma)
    #[arg(long, default_value_t = 1.0)]
    prior_scale: f64,
    /// Share one set of networks across levels
    #[arg(long)]
    share_levels: bool,
    /// Coupling blocks of the flat 2-D flow
    #[arg(long, default_value_t = 6)]
    n_blocks: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrainArgs {
    /// Dataset directory, or a pinwheel CSV with --flat
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for periodic evaluation
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Train the flat 2-D flow on points instead of the hierarchical model
    #[arg(long)]
    flat: bool,
    #[arg(long, default_value_t = 30_000)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Rows per forward pass (0: whole batch)
    #[arg(long, default_value_t = 0)]
    micro_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5e-5)]
    weight_decay: f64,
    /// Global gradient-norm bound (0 disables clipping)
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// Learning-rate factor per level, comma separated
    #[arg(long)]
    lr_multipliers: Option<String>,
    #[arg(long, default_value_t = 10)]
    log_every: u64,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    /// Training checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory, or a pinwheel CSV for a flat model
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// One temperature, or one per level from low to high, comma separated
    #[arg(long, default_value = "1.0")]
    temperature: String,
    /// Images per grid row
    #[arg(long, default_value_t = 8)]
    cols: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct RfArgs {
    #[arg(long)]
    model: PathBuf,
    /// Latent as h,i,j,c (level-h coordinates)
    #[arg(long)]
    latent: String,
    /// Prior samples in the Monte Carlo average
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct RfHistArgs {
    #[arg(long)]
    model: PathBuf,
    /// Single level (default: all)
    #[arg(long)]
    level: Option<usize>,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Logarithmic bins per histogram
    #[arg(long, default_value_t = 24)]
    bins: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct VaryArgs {
    #[arg(long)]
    model: PathBuf,
    /// Latent as h,i,j,c
    #[arg(long)]
    latent: String,
    /// Values assigned to the latent, comma separated
    #[arg(long, default_value = "-3,-2,-1,0,1,2,3")]
    values: String,
    /// Encode this dataset image instead of sampling the other latents
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct MixArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    a: usize,
    #[arg(long, default_value_t = 1)]
    b: usize,
    /// Level threshold; every threshold when neither this nor --lambda is given
    #[arg(long)]
    theta: Option<usize>,
    /// Linear coefficient in [0, 1]
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct InpaintArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of images, starting at --start
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Fixed region HxW@ROW,COL (default: a random one per image)
    #[arg(long)]
    region: Option<String>,
    /// Edge of the random square region
    #[arg(long, default_value_t = 10)]
    size: usize,
    /// cone, random or both
    #[arg(long, default_value = "both")]
    arm: String,
    /// Random initializations screened before optimizing
    #[arg(long, default_value_t = 200)]
    inits: usize,
    #[arg(long, default_value_t = 2000)]
    max_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ConesArgs {
    /// Image edge
    #[arg(long = "L", default_value_t = 32)]
    size: usize,
    /// Block edge
    #[arg(long = "m", default_value_t = 4)]
    kernel: usize,
    /// Channels
    #[arg(long = "C", default_value_t = 3)]
    channels: usize,
    /// Region HxW@ROW,COL
    #[arg(long, default_value = "10x10@11,11")]
    region: String,
}

/// Failures sorted by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Path) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "toml") {
        let table: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table)?
    } else {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    let Value::Object(mut map) = value else {
        return Err(usage(format!("{} must hold a table of flag values", path.display())));
    };
    // A run manifest: take its resolved arguments.
    if let Some(Value::Object(args)) = map.remove("args") {
        let mut merged = match map.remove("global") {
            Some(Value::Object(g)) => g,
            _ => Map::new(),
        };
        merged.extend(args);
        return Ok(merged);
    }
    Ok(map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect())
}

/// Lets config files spell keys as flags (`L`, `n-layer`) as well as
/// field names.
fn rename_flags(config: &mut Map<String, Value>, sub: &str) {
    let root = Cli::command();
    let cmd = root.find_subcommand(sub).expect("dispatched subcommands exist");
    for arg in root.get_arguments().chain(cmd.get_arguments()) {
        let (Some(long), id) = (arg.get_long(), arg.get_id().as_str()) else { continue };
        let key = long.replace('-', "_");
        if key != id {
            if let Some(v) = config.remove(&key) {
                config.insert(id.to_string(), v);
            }
        }
    }
}

fn from_command_line(matches: &ArgMatches, id: &str) -> bool {
    matches
        .try_get_raw(id)
        .ok()
        .flatten()
        .is_some()
        && matches.value_source(id) == Some(ValueSource::CommandLine)
}

/// Overlays config-file values on `args` wherever the flag was not typed.
fn merge<A: Serialize + DeserializeOwned>(args: &A, matches: &ArgMatches, config: &mut Map<String, Value>) -> CliResult<A> {
    let Value::Object(mut fields) = serde_json::to_value(args)? else {
        unreachable!("argument structs serialize to objects")
    };
    let keys: Vec<String> = fields.keys().cloned().collect();
    for key in keys {
        if let Some(v) = config.remove(&key) {
            let typed = from_command_line(matches, &key) || (v.is_boolean() && matches.get_flag_checked(&key));
            if !typed {
                fields.insert(key, v);
            }
        }
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| usage(format!("config: {e}")))
}

trait FlagCheck {
    fn get_flag_checked(&self, id: &str) -> bool;
}

impl FlagCheck for ArgMatches {
    fn get_flag_checked(&self, id: &str) -> bool {
        self.try_get_one::<bool>(id).ok().flatten().copied().unwrap_or(false) && self.value_source(id) == Some(ValueSource::CommandLine)
    }
}

struct Ctx {
    global: Global,
    command: &'static str,
    args: Value,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.global.out
    }

    fn write_manifest(&self) -> CliResult<()> {
        fs::create_dir_all(self.out())?;
        let manifest = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "global": self.global,
            "args": self.args,
        });
        fs::write(self.out().join(RUN_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

fn dispatch(matches: &ArgMatches) -> CliResult<()> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| usage(e.to_string()))?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let mut config = match &cli.global.config {
        Some(p) => load_config(p)?,
        None => Map::new(),
    };
    rename_flags(&mut config, name);
    let mut global = merge(&cli.global, sub, &mut config)?;
    global.config = cli.global.config.clone();
    if global.threads.is_none() {
        if let Ok(v) = std::env::var("RGFLOW_THREADS") {
            global.threads = Some(v.parse().map_err(|_| usage(format!("RGFLOW_THREADS={v} is not a number")))?);
        }
    }
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        // Fails only if a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    macro_rules! resolve {
        ($args:expr) => {{
            let a = merge($args, sub, &mut config)?;
            if let Some(k) = config.keys().next() {
                return Err(usage(format!("unknown config key `{k}` for {name}")));
            }
            let ctx = Ctx {
                global: global.clone(),
                command: static_name(name),
                args: serde_json::to_value(&a)?,
            };
            (a, ctx)
        }};
    }

    match &cli.command {
        Command::GenDataset(a) => {
            let (a, ctx) = resolve!(a);
            gen_dataset(&ctx, &a)
        }
        Command::GenPinwheel(a) => {
            let (a, ctx) = resolve!(a);
            gen_pinwheel_cmd(&ctx, &a)
        }
        Command::Train(a) => {
            let (a, ctx) = resolve!(a);
            train(&ctx, &a)
        }
        Command::Eval(a) => {
            let (a, ctx) = resolve!(a);
            eval(&ctx, &a)
        }
        Command::Sample(a) => {
            let (a, ctx) = resolve!(a);
            sample(&ctx, &a)
        }
        Command::Rf(a) => {
            let (a, ctx) = resolve!(a);
            rf(&ctx, &a)
        }
        Command::RfHist(a) => {
            let (a, ctx) = resolve!(a);
            rf_hist(&ctx, &a)
        }
        Command::Vary(a) => {
            let (a, ctx) = resolve!(a);
            vary(&ctx, &a)
        }
        Command::Mix(a) => {
            let (a, ctx) = resolve!(a);
            mix(&ctx, &a)
        }
        Command::Inpaint(a) => {
            let (a, ctx) = resolve!(a);
            inpaint(&ctx, &a)
        }
        Command::Cones(a) => {
            let (a, ctx) = resolve!(a);
            cones(&ctx, &a)
        }
    }
}

fn static_name(name: &str) -> &'static str {
    const NAMES: [&str; 11] = [
        "gen-dataset",
        "gen-pinwheel",
        "train",
        "eval",
        "sample",
        "rf",
        "rf-hist",
        "vary",
        "mix",
        "inpaint",
        "cones",
    ];
    NAMES.iter().find(|n| **n == name).copied().unwrap_or("unknown")
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| usage(format!("bad {what} `{t}` in `{s}`"))))
        .collect()
}

fn parse_latent(s: &str) -> CliResult<LatentIndex> {
    match parse_list::<usize>(s, "latent coordinate")?.as_slice() {
        [h, i, j, c] => Ok(LatentIndex { h: *h, i: *i, j: *j, c: *c }),
        _ => Err(usage(format!("latent `{s}` is not h,i,j,c"))),
    }
}

fn parse_region(s: &str) -> CliResult<PixelRegion> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn parse_prior(m: &ModelArgs) -> CliResult<Prior> {
    let kind: PriorKind = m.prior.parse().map_err(|e: Error| usage(e.to_string()))?;
    let prior = Prior { kind, scale: m.prior_scale };
    prior.validate().map_err(|e| usage(e.to_string()))?;
    Ok(prior)
}

fn gen_dataset(ctx: &Ctx, a: &GenDatasetArgs) -> CliResult<()> {
    let params = MsdsParams::new(a.variant);
    params.validate().map_err(|e| usage(e.to_string()))?;
    let set = gen_msds_range(&params, a.start, a.n, ctx.global.seed)?;
    let name = a.name.clone().unwrap_or_else(|| format!("msds{}", a.variant));
    let recorded = serde_json::json!({ "msds": params, "start": a.start });
    let manifest = set.save_dir(ctx.out(), &name, ctx.global.seed, recorded)?;
    ctx.write_manifest()?;
    println!("wrote {} images to {} (sha256 {})", manifest.n, ctx.out().display(), manifest.sha256);
    Ok(())
}

fn gen_pinwheel_cmd(ctx: &Ctx, a: &GenPinwheelArgs) -> CliResult<()> {
    let params = PinwheelParams {
        legs: a.legs,
        radial_std: a.radial_std,
        tangential_std: a.tangential_std,
        rate: a.rate,
    };
    let p = gen_pinwheel(&params, a.n, ctx.global.seed)?;
    fs::create_dir_all(ctx.out())?;
    write_points(&ctx.out().join("pinwheel.csv"), &p.points, Some(&p.labels))?;
    ctx.write_manifest()?;
    println!("wrote {} points", a.n);
    Ok(())
}

fn write_points(path: &Path, points: &Array2<f64>, labels: Option<&[usize]>) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{}", if labels.is_some() { "x,y,label" } else { "x,y" })?;
    for (k, row) in points.outer_iter().enumerate() {
        match labels {
            Some(l) => writeln!(f, "{},{},{}", row[0], row[1], l[k])?,
            None => writeln!(f, "{},{}", row[0], row[1])?,
        }
    }
    Ok(())
}

/// Reads `x,y[,label]` rows with a header line.
pub fn read_points(path: &Path) -> crate::Result<(Array2<f64>, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || Error::Dataset(format!("{}:{}: malformed row", path.display(), n + 1));
        if parts.len() < 2 {
            return Err(bad());
        }
        xs.push(parts[0].trim().parse::<f64>().map_err(|_| bad())?);
        xs.push(parts[1].trim().parse::<f64>().map_err(|_| bad())?);
        labels.push(parts.get(2).and_then(|s| s.trim().parse().ok()).unwrap_or(0));
    }
    let n = labels.len();
    Ok((Array2::from_shape_vec((n, 2), xs).expect("two columns"), labels))
}

fn train(ctx: &Ctx, a: &TrainArgs) -> CliResult<()> {
    let config = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        micro_batch: a.micro_batch,
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
            ..Default::default()
        },
        lr_multipliers: match &a.lr_multipliers {
            Some(s) => parse_list(s, "learning-rate multiplier")?,
            None => Vec::new(),
        },
        seed: ctx.global.seed,
        log_every: a.log_every,
        checkpoint_every: a.checkpoint_every,
        eval_every: a.eval_every,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let prior = parse_prior(&a.model)?;
    ctx.write_manifest()?;
    let resume = a.resume.as_ref().map(|p| Checkpoint::load(p)).transpose()?;

    if a.flat {
        let (points, _) = read_points(&a.data)?;
        let eval_points = a.eval_data.as_ref().map(|p| read_points(p)).transpose()?;
        let mut model = FlatFlow2d::<f64>::new(
            FlatFlowConfig {
                n_blocks: a.model.n_blocks,
                hidden: a.model.hidden,
                n_res: a.model.n_res,
                prior,
            },
            ctx.global.seed,
        )
        .map_err(|e| usage(e.to_string()))?;
        let data = PointData { points: &points };
        let eval_data = eval_points.as_ref().map(|(p, _)| PointData { points: p });
        let mut trainer = match &resume {
            Some(ck) => Trainer::resume(&mut model, ck, Some(config))?,
            None => Trainer::new(&model, config)?,
        };
        let log = trainer.run(&mut model, &data, eval_data.as_ref(), Some(ctx.out()))?;
        report_training(&log);
        return Ok(());
    }

    let (set, _) = ImageSet::load_dir(&a.data)?;
    let eval_set = a.eval_data.as_ref().map(|p| ImageSet::load_dir(p)).transpose()?;
    let model_config = ModelConfig {
        size: set.size,
        kernel: a.model.kernel,
        channels: set.channels,
        n_layer: parse_list(&a.model.n_layer, "n_layer")?,
        n_res: a.model.n_res,
        hidden: a.model.hidden,
        prior,
        share_levels: a.model.share_levels,
    };
    model_config.validate().map_err(|e| usage(e.to_string()))?;
    let mut model = RgFlowModel::<f32>::new(model_config, ctx.global.seed)?;
    let data = ImageData::new(&set);
    let eval_data = eval_set.as_ref().map(|(s, _)| ImageData::new(s));
    let mut trainer = match &resume {
        Some(ck) => Trainer::resume(&mut model, ck, Some(config))?,
        None => Trainer::new(&model, config)?,
    };
    let log = trainer.run(&mut model, &data, eval_data.as_ref(), Some(ctx.out()))?;
    report_training(&log);
    Ok(())
}

fn report_training(log: &[training::LogEntry]) {
    match (log.first(), log.last()) {
        (Some(first), Some(last)) => println!(
            "steps {}..{}: loss {:.3} -> {:.3}, bpd {:.4} -> {:.4}, {:.1}s",
            first.step, last.step, first.loss, last.loss, first.bpd, last.bpd, last.wall
        ),
        _ => println!("no steps taken"),
    }
}

enum AnyModel {
    Rg(RgFlowModel<f32>),
    Flat(FlatFlow2d<f64>),
}

fn load_model(path: &Path) -> CliResult<AnyModel> {
    let ck = Checkpoint::load(path)?;
    match ck.meta.get("kind").and_then(Value::as_str) {
        Some("flat2d") => Ok(AnyModel::Flat(FlatFlow2d::from_checkpoint(&ck)?)),
        _ => Ok(AnyModel::Rg(RgFlowModel::from_checkpoint(&ck)?)),
    }
}

fn load_rg(path: &Path) -> CliResult<RgFlowModel<f32>> {
    match load_model(path)? {
        AnyModel::Rg(m) => Ok(m),
        AnyModel::Flat(_) => Err(usage(format!("{} holds a flat 2-D flow; this command needs the hierarchical model", path.display()))),
    }
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> CliResult<()> {
    let report = match load_model(&a.model)? {
        AnyModel::Rg(model) => {
            let (set, _) = ImageSet::load_dir(&a.data)?;
            if set.dim() != model.spec.dim() {
                return Err(usage(format!("images have {} values, model expects {}", set.dim(), model.spec.dim())));
            }
            evaluate(&model, &ImageData::new(&set), ctx.global.seed, a.batch)?
        }
        AnyModel::Flat(model) => {
            let (points, _) = read_points(&a.data)?;
            evaluate(&model, &PointData { points: &points }, ctx.global.seed, a.batch)?
        }
    };
    ctx.write_manifest()?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(ctx.out().join("eval.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn to_images(model: &RgFlowModel<f32>, x: &Array2<f32>) -> CliResult<ImageSet> {
    let px = Dequantizer::default().postprocess(x);
    Ok(ImageSet::new(model.spec.size, model.spec.channels, px)?)
}

fn sample(ctx: &Ctx, a: &SampleArgs) -> CliResult<()> {
    let temps = parse_list::<f64>(&a.temperature, "temperature")?;
    match load_model(&a.model)? {
        AnyModel::Rg(model) => {
            let levels = model.spec.num_levels();
            let schedule = match temps.as_slice() {
                [t] => TemperatureSchedule::uniform(*t, levels),
                many if many.len() == levels => TemperatureSchedule::new(many.to_vec()),
                _ => return Err(usage(format!("give one temperature or {levels}"))),
            }
            .map_err(|e| usage(e.to_string()))?;
            let x = model.sample(&schedule, a.n, ctx.global.seed)?;
            let images = to_images(&model, &x)?;
            ctx.write_manifest()?;
            data::write_grid(&ctx.out().join("samples.png"), &images, a.cols)?;
            println!("wrote {} samples to {}", a.n, ctx.out().join("samples.png").display());
        }
        AnyModel::Flat(model) => {
            let [t] = temps.as_slice() else {
                return Err(usage("the flat flow takes a single temperature"));
            };
            let x = model.sample(a.n, *t, ctx.global.seed)?;
            ctx.write_manifest()?;
            write_points(&ctx.out().join("samples.csv"), &x, None)?;
            println!("wrote {} samples", a.n);
        }
    }
    Ok(())
}

fn rf(ctx: &Ctx, a: &RfArgs) -> CliResult<()> {
    let model = load_rg(&a.model)?;
    let l = parse_latent(&a.latent)?;
    model.spec.flat_index(l).map_err(|e| usage(e.to_string()))?;
    let field = analysis::receptive_field(&model, l, a.samples, ctx.global.seed)?;
    ctx.write_manifest()?;
    analysis::write_heatmap(&ctx.out().join("rf.png"), &field.map)?;
    let json = serde_json::json!({
        "latent": l,
        "strength": field.strength,
        "support": field.map.iter().filter(|&&v| v > 0.0).count(),
        "map": field.map.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    });
    fs::write(ctx.out().join("rf.json"), serde_json::to_vec_pretty(&json)?)?;
    println!("strength {:.6e}", field.strength);
    Ok(())
}

fn rf_hist(ctx: &Ctx, a: &RfHistArgs) -> CliResult<()> {
    let model = load_rg(&a.model)?;
    let levels: Vec<usize> = match a.level {
        Some(h) if h < model.spec.num_levels() => vec![h],
        Some(h) => return Err(usage(format!("level {h} out of range"))),
        None => (0..model.spec.num_levels()).collect(),
    };
    ctx.write_manifest()?;
    let mut csv = String::from("level,lower,upper,count\n");
    for h in levels {
        let strengths = analysis::level_strengths(&model, h, a.samples, ctx.global.seed)?;
        let hist = analysis::rf_histogram(&strengths, a.bins);
        for b in &hist.bins {
            csv.push_str(&format!("{h},{},{},{}\n", b.lower, b.upper, b.count));
        }
        let below = strengths.iter().filter(|&&s| s < 1.0).count();
        println!("level {h}: {} latents, {below} with strength < 1", strengths.len());
    }
    fs::write(ctx.out().join("rf_hist.csv"), csv)?;
    Ok(())
}

fn base_latents(model: &RgFlowModel<f32>, data: Option<&Path>, index: usize, seed: u64) -> CliResult<crate::model::LatentPyramid<f32>> {
    match data {
        Some(dir) => {
            let (set, _) = ImageSet::load_dir(dir)?;
            if index >= set.len() {
                return Err(usage(format!("index {index} out of range for {} images", set.len())));
            }
            let x = analysis::image_rows(&set, &[index]);
            Ok(model.encode(&x)?.0)
        }
        None => {
            let temps = TemperatureSchedule::uniform(1.0, model.spec.num_levels())?;
            Ok(model.sample_latents(&temps, 1, seed)?)
        }
    }
}

fn vary(ctx: &Ctx, a: &VaryArgs) -> CliResult<()> {
    let model = load_rg(&a.model)?;
    let l = parse_latent(&a.latent)?;
    model.spec.flat_index(l).map_err(|e| usage(e.to_string()))?;
    let values = parse_list::<f64>(&a.values, "value")?;
    let z = base_latents(&model, a.data.as_deref(), a.index, ctx.global.seed)?;
    let x = analysis::vary_latent(&model, &z, l, &values)?;
    ctx.write_manifest()?;
    data::write_grid(&ctx.out().join("vary.png"), &to_images(&model, &x)?, values.len())?;
    println!("wrote {} images", values.len());
    Ok(())
}

fn mix(ctx: &Ctx, a: &MixArgs) -> CliResult<()> {
    let model = load_rg(&a.model)?;
    let (set, _) = ImageSet::load_dir(&a.data)?;
    if a.a >= set.len() || a.b >= set.len() {
        return Err(usage("image index out of range"));
    }
    let xa = analysis::image_rows(&set, &[a.a]);
    let xb = analysis::image_rows(&set, &[a.b]);
    let mut rows = vec![xa.clone()];
    match (a.theta, a.lambda) {
        (Some(_), Some(_)) => return Err(usage("give --theta or --lambda, not both")),
        (Some(t), None) => rows.push(analysis::mix_hyperbolic(&model, &xa, &xb, t)?),
        (None, Some(l)) => rows.push(analysis::mix_linear(&model, &xa, &xb, l)?),
        (None, None) => {
            for t in 0..=model.spec.num_levels() {
                rows.push(analysis::mix_hyperbolic(&model, &xa, &xb, t)?);
            }
        }
    }
    rows.push(xb);
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).expect("same width");
    ctx.write_manifest()?;
    data::write_grid(&ctx.out().join("mix.png"), &to_images(&model, &all)?, rows.len())?;
    println!("wrote {} images (A, mixes, B)", rows.len());
    Ok(())
}

fn inpaint(ctx: &Ctx, a: &InpaintArgs) -> CliResult<()> {
    let model = load_rg(&a.model)?;
    let (set, _) = ImageSet::load_dir(&a.data)?;
    if a.start + a.n > set.len() {
        return Err(usage(format!("images {}..{} out of range", a.start, a.start + a.n)));
    }
    let arms: Vec<InpaintArm> = match a.arm.as_str() {
        "cone" => vec![InpaintArm::Cone],
        "random" => vec![InpaintArm::Random],
        "both" => vec![InpaintArm::Cone, InpaintArm::Random],
        other => return Err(usage(format!("unknown arm `{other}`"))),
    };
    let fixed = a.region.as_deref().map(parse_region).transpose()?;
    let config = InpaintConfig {
        inits: a.inits,
        max_steps: a.max_steps,
        lr: a.lr,
        ..Default::default()
    };
    ctx.write_manifest()?;
    let indices: Vec<usize> = (a.start..a.start + a.n).collect();
    let report = analysis::inpaint_benchmark(&model, &set, &indices, fixed, a.size, &arms, &config, ctx.global.seed)?;
    fs::write(ctx.out().join("inpaint.json"), serde_json::to_vec_pretty(&report)?)?;
    report.write_grid(&ctx.out().join("inpaint.png"), &model)?;
    for arm in &report.arms {
        println!("{:?}: mean PSNR {:.2} dB", arm.arm, arm.mean_psnr);
    }
    if let Some(w) = report.cone_wins {
        println!("cone beats random on {w} of {} images", indices.len());
    }
    Ok(())
}

fn cones(ctx: &Ctx, a: &ConesArgs) -> CliResult<()> {
    let spec = LatticeSpec::new(a.size, a.kernel, a.channels).map_err(|e| usage(e.to_string()))?;
    let region = parse_region(&a.region)?;
    let cone = spec.inference_cone(region).map_err(|e| usage(e.to_string()))?;
    let counts = cone.level_counts();
    ctx.write_manifest()?;
    for (h, c) in counts.iter().enumerate() {
        println!("level {h}: {c}");
    }
    println!("total: {} of {}", cone.latent_count(), spec.dim());
    let json = serde_json::json!({ "region": region.to_string(), "levels": counts, "total": cone.latent_count(), "dim": spec.dim() });
    fs::write(ctx.out().join("cones.json"), serde_json::to_vec_pretty(&json)?)?;
    Ok(())
}
