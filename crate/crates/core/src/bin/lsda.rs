//! `lsda`: command-line driver for the full experiment lifecycle.
//!
//! Every stage reads its inputs from and writes its outputs to one work
//! directory, and records what it did in `provenance/<command>.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use lsda::adapter::{assemble_lsda, AdaptError, NeighborCount};
use lsda::analysis::{breakdown, comparison_table, false_positives, Bands};
use lsda::config::{ConfigError, KeyValues};
use lsda::data::{DataError, DatasetManifest, SplitData, SplitKind};
use lsda::detector::{
    check_proposals, detections_from_scores, load_detections, load_proposals, propose_regions, save_detections,
    score_by_state, warp_regions, DetectError, Detection, ScoreMode,
};
use lsda::eval::evaluate;
use lsda::experiment::{
    build_pool, generate_data, run_ablation, run_finetune, run_pretrain, AblationInputs, EvalCache, ExperimentConfig,
    ExperimentError,
};
use lsda::persist::{load_weights, save_matrix, save_weights, PersistError, FORMAT_VERSION};
use lsda::trainer::{Supervision, TrainError};
use lsda::Network32;

const CONFIG_FILE: &str = "config.txt";
const DATA_DIR: &str = "data";
const PRETRAINED: &str = "pretrained.lsdw";
const FINETUNED: &str = "finetuned.lsdw";
const DELTA_B: &str = "delta_b.lsdw";
const DETECTOR: &str = "detector.lsdw";
const NEIGHBORS: &str = "neighbors.tsv";
const DETECTIONS: &str = "detections.tsv";
const REPORT: &str = "report.tsv";
const BREAKDOWN: &str = "fp_breakdown.tsv";
const ABLATION: &str = "ablation.tsv";

#[derive(Parser, Debug)]
#[command(name = "lsda", version, about = "Turn a classifier into a detector for categories without boxes")]
struct Cli {
    /// Work directory holding every artifact.
    #[arg(long, env = "LSDA_WORKDIR", default_value = ".", global = true)]
    workdir: PathBuf,
    /// Settings file of `key = value` lines. Defaults to the work directory's
    /// `config.txt` when that exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (`-v` info, `-vv` debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the classification, detection and evaluation splits.
    GenData,
    /// Train the classification network on image-level labels.
    Pretrain,
    /// Fine-tune into a detector on the box-annotated categories.
    Finetune(FinetuneArgs),
    /// Transfer output-layer changes to the held-out categories.
    Adapt(AdaptArgs),
    /// Run a network over the evaluation images.
    Detect(DetectArgs),
    /// Per-category AP and the trained / held-out / all mAP report.
    Eval(EvalArgs),
    /// False-positive breakdown on held-out categories.
    Analyze(AnalyzeArgs),
    /// The full ablation grid from one pretrained network.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Blocks to adapt, e.g. `bgrnd,layers,fcB`.
    #[arg(long)]
    mask: Option<String>,
    /// `delta` (frozen rows plus a learned change) or `direct`.
    #[arg(long)]
    parameterization: Option<String>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    /// Neighbours per held-out category, or FULL.
    #[arg(long)]
    k: Option<String>,
    /// Include the bias column in the neighbour distance.
    #[arg(long)]
    nn_include_bias: bool,
    /// Transfer weight deltas only, leaving held-out biases unchanged.
    #[arg(long)]
    no_bias_adapt: bool,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Network to run (defaults to the adapted detector).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output detections file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score by softmax probability minus background probability.
    #[arg(long)]
    softmax_scores: bool,
    /// Also suppress overlapping detections across categories at this IoU.
    #[arg(long)]
    cross_category_iou: Option<f64>,
    /// Proposal file (`image_id<TAB>x1,y1,x2,y2` lines) replacing the grid.
    #[arg(long)]
    proposals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Detections of a second method, shown side by side.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Lowest overlap that counts as touching an object.
    #[arg(long)]
    band: Option<f64>,
    /// Overlap at which a detection is a true positive.
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Grid cells run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Missing { path: PathBuf, what: &'static str, command: &'static str },
    Divergence(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Missing { .. } => 3,
            Self::Divergence(_) => 4,
            Self::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Missing { path, what, command } => {
                write!(f, "missing {what}; run {command} (expected {})", path.display())
            }
            Self::Divergence(m) | Self::Other(m) => f.write_str(m),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let msg = e.to_string();
        match e {
            ExperimentError::Config(_) | ExperimentError::Invalid(_) => Self::Validation(msg),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Adapt(AdaptError::Config(_)) => Self::Validation(msg),
            ExperimentError::Data(DataError::Config(_) | DataError::TooManyCategories { .. }) => Self::Validation(msg),
            ExperimentError::Detect(d) => d.into(),
            _ => Self::Other(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::Divergence(e.to_string()),
            TrainError::Config(_) | TrainError::ConfigFile(_) => Self::Validation(e.to_string()),
            _ => Self::Other(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Config(_) | DetectError::Parse { .. } | DetectError::ConfigFile(_) => {
                Self::Validation(e.to_string())
            }
            _ => Self::Other(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        ExperimentError::from(e).into()
    }
}

macro_rules! other_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Other(e.to_string())
            }
        }
    )*};
}
other_error!(PersistError, DataError, lsda::eval::EvalError, std::io::Error);

type Result<T> = std::result::Result<T, CliError>;

/// Work directory plus the resolved configuration of one invocation.
struct Context {
    dir: PathBuf,
    config: ExperimentConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest_path(&self, split: SplitKind) -> PathBuf {
        self.dir.join(DATA_DIR).join(split.manifest_file())
    }

    /// Marks `path` as an input, failing with the producing command if absent.
    fn require(&mut self, path: PathBuf, what: &'static str, command: &'static str) -> Result<PathBuf> {
        if !path.exists() {
            return Err(CliError::Missing { path, what, command });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn split(&mut self, split: SplitKind) -> Result<SplitData> {
        let path = self.require(self.manifest_path(split), "manifest", "gen-data")?;
        Ok(SplitData::load(&path)?)
    }

    fn network(&mut self, path: PathBuf, what: &'static str, command: &'static str) -> Result<Network32> {
        let path = self.require(path, what, command)?;
        Ok(load_weights(&path)?)
    }

    fn write(&mut self, path: PathBuf, text: &str) -> Result<()> {
        write_file(&path, text.as_bytes())?;
        self.outputs.push(path);
        Ok(())
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// `provenance/<command>.txt`: versions, config hash and the digest of
    /// every file read or written. Contains no clock readings, so reruns with
    /// identical inputs reproduce it byte for byte.
    fn record(&self, command: &str) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "command\t{command}");
        let _ = writeln!(out, "lsda_version\t{}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "weight_format\t{FORMAT_VERSION}");
        let _ = writeln!(out, "config_sha256\t{}", self.config.hash());
        let _ = writeln!(out, "seed\t{}", self.config.seed);
        let digests = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((self.relative(p), file_digest(p)?))).collect()
        };
        for (name, digest) in digests(&self.inputs)? {
            let _ = writeln!(out, "input\t{name}\t{digest}");
        }
        for (name, digest) in digests(&self.outputs)? {
            let _ = writeln!(out, "output\t{name}\t{digest}");
        }
        for (k, v) in self.config.to_key_values().iter() {
            let _ = writeln!(out, "config\t{k}\t{v}");
        }
        write_file(&self.dir.join("provenance").join(format!("{command}.txt")), out.as_bytes())?;
        Ok(())
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)
}

/// SHA-256 of a file, or of every file below a directory in path order.
fn file_digest(path: &Path) -> std::io::Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            hasher.update(f.strip_prefix(path).unwrap_or(&f).display().to_string().as_bytes());
            hasher.update(fs::read(&f)?);
        }
    } else {
        hasher.update(fs::read(path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    let file = match &cli.config {
        Some(p) if !p.exists() => {
            return Err(CliError::Validation(format!("config file {} does not exist", p.display())))
        }
        Some(p) => Some(p.clone()),
        None => Some(cli.workdir.join(CONFIG_FILE)).filter(|p| p.exists()),
    };
    if let Some(path) = file {
        log::info!("reading settings from {}", path.display());
        config.apply(&KeyValues::load(&path)?)?;
    }
    let mut overrides = KeyValues::default();
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got `{item}`")))?;
        overrides.set(k.trim(), v.trim());
    }
    if let Some(seed) = cli.seed {
        overrides.set("seed", seed.to_string());
    }
    config.apply(&overrides)?;
    Ok(config)
}

/// Applies subcommand flags on top of the resolved settings.
fn apply_flags(config: &mut ExperimentConfig, command: &Command) -> Result<()> {
    let mut kv = KeyValues::default();
    match command {
        Command::Finetune(a) => {
            if let Some(m) = &a.mask {
                kv.set("finetune_mask", m.as_str());
            }
            if let Some(p) = &a.parameterization {
                kv.set("parameterization", p.as_str());
            }
        }
        Command::Adapt(a) => {
            if let Some(k) = &a.k {
                kv.set("adapt_k", k.as_str());
            }
            if a.nn_include_bias {
                kv.set("nn_include_bias", "true");
            }
            if a.no_bias_adapt {
                kv.set("adapt_bias", "false");
            }
        }
        Command::Detect(a) => {
            if a.softmax_scores {
                kv.set("score_mode", ScoreMode::Softmax.to_string());
            }
            if let Some(t) = a.cross_category_iou {
                kv.set("cross_category_iou", t.to_string());
            }
        }
        Command::Eval(a) => {
            if let Some(t) = a.iou {
                kv.set("eval_iou", t.to_string());
            }
        }
        Command::Analyze(a) => {
            if let Some(t) = a.band {
                kv.set("fp_band", t.to_string());
            }
            if let Some(t) = a.iou {
                kv.set("eval_iou", t.to_string());
            }
        }
        Command::GenData | Command::Pretrain | Command::Ablate(_) => {}
    }
    config.apply(&kv)?;
    Ok(())
}

fn gen_data(ctx: &mut Context) -> Result<()> {
    let dataset = generate_data(&ctx.config)?;
    let dir = ctx.path(DATA_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    dataset.write(&dir)?;
    ctx.wrote(dir);
    let settings = ctx.config.to_key_values().render();
    ctx.write(ctx.path(CONFIG_FILE), &settings)?;
    let m = dataset.partition.m();
    println!(
        "generated {} categories ({} box-annotated: {}) into {}",
        dataset.partition.k(),
        m,
        dataset.partition.names()[..m].join(", "),
        ctx.relative(&ctx.path(DATA_DIR))
    );
    Ok(())
}

fn pretrain_cmd(ctx: &mut Context) -> Result<()> {
    let split = ctx.split(SplitKind::Classification)?;
    let (net, log) = run_pretrain::<f32>(&ctx.config, &split)?;
    save_weights(&net, &ctx.path(PRETRAINED))?;
    ctx.wrote(ctx.path(PRETRAINED));
    ctx.write(ctx.path("pretrain_log.tsv"), &log.to_tsv())?;
    println!("pretrained: training accuracy {:.4}", log.final_accuracy);
    Ok(())
}

fn finetune_cmd(ctx: &mut Context) -> Result<()> {
    let mask = ctx.config.freeze_mask()?;
    let pretrained = ctx.network(ctx.path(PRETRAINED), "pretrained weights", "pretrain")?;
    let split = ctx.split(SplitKind::Detection)?;
    let pool = build_pool::<f32>(&ctx.config, &split, false)?;
    let tuned = run_finetune(&ctx.config, &pretrained, &pool, &mask, Supervision::BoxAnnotated)?;
    save_weights(&tuned.network, &ctx.path(FINETUNED))?;
    ctx.wrote(ctx.path(FINETUNED));
    save_matrix(&tuned.delta_b, &ctx.path(DELTA_B))?;
    ctx.wrote(ctx.path(DELTA_B));
    ctx.write(ctx.path("finetune_log.tsv"), &tuned.log.to_tsv())?;
    println!("fine-tuned `{mask}`: region accuracy {:.4}", tuned.log.final_accuracy);
    Ok(())
}

fn adapt_cmd(ctx: &mut Context) -> Result<()> {
    ctx.config.adapt.validate(ctx.config.data.m)?;
    let pretrained = ctx.network(ctx.path(PRETRAINED), "pretrained weights", "pretrain")?;
    let finetuned = ctx.network(ctx.path(FINETUNED), "fine-tuned weights", "finetune")?;
    let sidecar = ctx.require(ctx.path(DELTA_B), "delta sidecar", "finetune")?;
    let delta_b = lsda::persist::load_matrix::<f32>(&sidecar)?;
    if &delta_b != finetuned.head().delta_b() {
        return Err(CliError::Validation(format!(
            "{} does not belong to {}; rerun finetune",
            ctx.relative(&sidecar),
            FINETUNED
        )));
    }
    let (detector, map) = assemble_lsda(&pretrained, &finetuned, &ctx.config.adapt)?;
    save_weights(&detector, &ctx.path(DETECTOR))?;
    ctx.wrote(ctx.path(DETECTOR));
    ctx.write(ctx.path(NEIGHBORS), &map.to_tsv(detector.partition()))?;
    let k = match ctx.config.adapt.k {
        NeighborCount::Full => "all".to_string(),
        NeighborCount::Count(k) => k.to_string(),
    };
    println!("adapted {} held-out categories from {k} neighbours each", map.num_held_out());
    Ok(())
}

fn detect_cmd(ctx: &mut Context, args: &DetectArgs) -> Result<()> {
    let weights = args.weights.clone().unwrap_or_else(|| ctx.path(DETECTOR));
    let net = ctx.network(weights, "detector weights", "adapt")?;
    let split = ctx.split(SplitKind::Eval)?;
    let external = match &args.proposals {
        Some(p) => {
            let path = ctx.require(p.clone(), "proposal file", "a proposal generator")?;
            Some(load_proposals(&path)?)
        }
        None => None,
    };
    let detect = &ctx.config.detect;
    let side = ctx.config.arch.input_side;
    let mut detections: Vec<Detection> = Vec::new();
    for sample in &split.samples {
        let boxes = match &external {
            Some(map) => {
                let b = map.get(&sample.id).cloned().unwrap_or_default();
                check_proposals(&b, &sample.image, &sample.id)?;
                b
            }
            None => propose_regions(sample.image.width(), sample.image.height(), &detect.proposals),
        };
        let inputs = warp_regions::<f32>(&sample.image, &boxes, detect.context_pad, side)?;
        let scores = score_by_state(&net, inputs.view(), detect.score_mode)?;
        detections.extend(detections_from_scores(&sample.id, &boxes, &scores, detect));
    }
    let out = args.out.clone().unwrap_or_else(|| ctx.path(DETECTIONS));
    save_detections(&out, &detections, &split.manifest.partition)?;
    ctx.wrote(out.clone());
    println!("{} detections on {} images -> {}", detections.len(), split.samples.len(), ctx.relative(&out));
    Ok(())
}

fn eval_manifest(ctx: &mut Context) -> Result<DatasetManifest> {
    let path = ctx.require(ctx.manifest_path(SplitKind::Eval), "manifest", "gen-data")?;
    Ok(DatasetManifest::load(&path)?)
}

fn eval_cmd(ctx: &mut Context, args: &EvalArgs) -> Result<()> {
    let manifest = eval_manifest(ctx)?;
    let path = ctx.require(args.detections.clone().unwrap_or_else(|| ctx.path(DETECTIONS)), "detections file", "detect")?;
    let dets = load_detections(&path, &manifest.partition)?;
    let report = evaluate(&dets, &manifest, ctx.config.eval_iou)?;
    ctx.write(args.out.clone().unwrap_or_else(|| ctx.path(REPORT)), &report.to_tsv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn analyze_cmd(ctx: &mut Context, args: &AnalyzeArgs) -> Result<()> {
    let manifest = eval_manifest(ctx)?;
    let bands = Bands { low: ctx.config.fp_band };
    let m = manifest.partition.m();
    let curve_of = |ctx: &mut Context, path: PathBuf| -> Result<_> {
        let path = ctx.require(path, "detections file", "detect")?;
        let dets = load_detections(&path, &manifest.partition)?;
        let fps = false_positives(&dets, &manifest, ctx.config.eval_iou, bands, |c| c >= m)?;
        Ok(breakdown(&fps, &ctx.config.cutoffs))
    };
    let curve = curve_of(ctx, args.detections.clone().unwrap_or_else(|| ctx.path(DETECTIONS)))?;
    ctx.write(args.out.clone().unwrap_or_else(|| ctx.path(BREAKDOWN)), &curve.to_tsv())?;
    match &args.baseline {
        Some(b) => {
            let base = curve_of(ctx, b.clone())?;
            print!("{}", comparison_table(&base, &curve));
        }
        None => print!("{}", curve.to_tsv()),
    }
    Ok(())
}

fn ablate_cmd(ctx: &mut Context, args: &AblateArgs) -> Result<()> {
    let config = ctx.config.clone();
    let pretrained = ctx.network(ctx.path(PRETRAINED), "pretrained weights", "pretrain")?;
    let pool_b = build_pool::<f32>(&config, &ctx.split(SplitKind::Detection)?, false)?;
    let pool_all = build_pool::<f32>(&config, &ctx.split(SplitKind::DetectionAll)?, true)?;
    let eval = EvalCache::build(&ctx.split(SplitKind::Eval)?, &config.detect, config.arch.input_side)?;
    log::info!("evaluation manifest sha256 {}", eval.manifest_hash());
    let inputs = AblationInputs {
        pretrained: &pretrained,
        pool_b: &pool_b,
        pool_all: &pool_all,
        eval: &eval,
    };
    let result = run_ablation(&config, &inputs, args.jobs);
    ctx.write(args.out.clone().unwrap_or_else(|| ctx.path(ABLATION)), &result.to_tsv())?;
    print!("{}", result.to_table());
    let failed = result.rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        log::warn!("{failed} grid cells failed; see the table");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = resolve_config(cli)?;
    apply_flags(&mut config, &cli.command)?;
    config.validate()?;
    let mut ctx = Context {
        dir: cli.workdir.clone(),
        config,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let name = match &cli.command {
        Command::GenData => {
            gen_data(&mut ctx)?;
            "gen-data"
        }
        Command::Pretrain => {
            pretrain_cmd(&mut ctx)?;
            "pretrain"
        }
        Command::Finetune(_) => {
            finetune_cmd(&mut ctx)?;
            "finetune"
        }
        Command::Adapt(_) => {
            adapt_cmd(&mut ctx)?;
            "adapt"
        }
        Command::Detect(a) => {
            detect_cmd(&mut ctx, a)?;
            "detect"
        }
        Command::Eval(a) => {
            eval_cmd(&mut ctx, a)?;
            "eval"
        }
        Command::Analyze(a) => {
            analyze_cmd(&mut ctx, a)?;
            "analyze"
        }
        Command::Ablate(a) => {
            ablate_cmd(&mut ctx, a)?;
            "ablate"
        }
    };
    ctx.record(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
