//! End-to-end experiment: configuration, pipeline stages and the ablation grid.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{assemble_lsda, AdaptConfig, AdaptError, NeighborCount};
use crate::analysis::{breakdown, false_positives, Bands, BreakdownCurve};
use crate::bbox::BBox;
use crate::config::{ConfigError, KeyValues};
use crate::data::{derive_seed, generate, DataError, Dataset, DatasetManifest, GenConfig, SplitData};
use crate::detector::{
    detections_from_scores, propose_regions, score_by_state, warp_regions, DetectConfig, DetectError,
    Detection, ProposalConfig,
};
use crate::eval::{evaluate, paired_t_test, EvalError, EvalReport};
use crate::model::{Architecture, ModelError, NetworkParams};
use crate::scalar::Scalar;
use crate::trainer::{
    finetune, pretrain, FineTuned, FinetuneOptions, FreezeMask, Parameterization, RegionPool, Supervision, TrainConfig,
    TrainError, TrainLog,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Every setting of a run. A single master seed feeds data generation and both
/// training phases.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub arch: Architecture,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Freeze mask of the main fine-tuning run.
    pub mask: String,
    pub parameterization: Parameterization,
    pub adapt: AdaptConfig,
    pub detect: DetectConfig,
    pub eval_iou: f64,
    pub fp_band: f64,
    pub cutoffs: Vec<usize>,
    /// Neighbour counts of the output-adaptation rows of the ablation.
    pub grid_k: Vec<NeighborCount>,
    /// Neighbour count of the row compared against no output adaptation.
    pub test_k: NeighborCount,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: GenConfig::default(),
            arch: Architecture {
                input_side: 32,
                hidden: vec![128, 128],
            },
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            mask: "bgrnd,layers,fcB".into(),
            parameterization: Parameterization::Delta,
            adapt: AdaptConfig::default(),
            detect: DetectConfig::default(),
            eval_iou: 0.5,
            fp_band: 0.1,
            cutoffs: vec![25, 50, 100, 200, 400],
            grid_k: vec![NeighborCount::Count(1), NeighborCount::Count(2), NeighborCount::Full],
            test_k: NeighborCount::Count(2),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "input_side",
    "hidden",
    "finetune_mask",
    "parameterization",
    "adapt_k",
    "nn_include_bias",
    "adapt_bias",
    "context_pad",
    "nms_iou",
    "score_floor",
    "score_mode",
    "cross_category_iou",
    "eval_iou",
    "fp_band",
    "cutoffs",
    "grid_k",
    "test_k",
];

fn value_err(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Every accepted key.
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
        keys.extend(GenConfig::keys().iter().filter(|k| **k != "seed").map(|k| k.to_string()));
        for prefix in ["pretrain.", "finetune."] {
            keys.extend(TrainConfig::KEYS.iter().filter(|k| **k != "seed").map(|k| format!("{prefix}{k}")));
        }
        keys.extend(ProposalConfig::KEYS.iter().map(|k| k.to_string()));
        keys
    }

    /// Applies settings on top of `self`, rejecting unknown keys.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), ExperimentError> {
        let known = Self::known_keys();
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        kv.reject_unknown(&known)?;
        kv.read("seed", &mut self.seed)?;
        self.data.apply(kv)?;
        kv.read("input_side", &mut self.arch.input_side)?;
        kv.read_list("hidden", &mut self.arch.hidden)?;
        self.pretrain.apply(kv, "pretrain.")?;
        self.finetune.apply(kv, "finetune.")?;
        if let Some(mask) = kv.get("finetune_mask") {
            self.mask = mask.to_string();
        }
        kv.read("parameterization", &mut self.parameterization)?;
        kv.read("adapt_k", &mut self.adapt.k)?;
        kv.read("nn_include_bias", &mut self.adapt.include_bias)?;
        kv.read("adapt_bias", &mut self.adapt.adapt_bias)?;
        self.detect.proposals.apply(kv)?;
        kv.read("context_pad", &mut self.detect.context_pad)?;
        kv.read("nms_iou", &mut self.detect.nms_iou)?;
        if let Some(v) = kv.get("score_floor") {
            self.detect.score_floor = match v {
                "-inf" | "none" => f64::NEG_INFINITY,
                _ => v.parse().map_err(|_| value_err("score_floor", v, "expected a number or -inf"))?,
            };
        }
        kv.read("score_mode", &mut self.detect.score_mode)?;
        if let Some(v) = kv.get("cross_category_iou") {
            self.detect.cross_category_iou = match v {
                "none" | "off" => None,
                _ => Some(v.parse().map_err(|_| value_err("cross_category_iou", v, "expected a number or none"))?),
            };
        }
        kv.read("eval_iou", &mut self.eval_iou)?;
        kv.read("fp_band", &mut self.fp_band)?;
        kv.read_list("cutoffs", &mut self.cutoffs)?;
        kv.read_list("grid_k", &mut self.grid_k)?;
        kv.read("test_k", &mut self.test_k)?;
        Ok(())
    }

    /// The resolved configuration, one `key = value` per setting.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.data.to_key_values();
        kv.set("seed", self.seed.to_string());
        kv.set("input_side", self.arch.input_side.to_string());
        kv.set("hidden", join(&self.arch.hidden));
        let mut train = KeyValues::default();
        self.pretrain.write_to(&mut train, "pretrain.");
        self.finetune.write_to(&mut train, "finetune.");
        for (k, v) in train.iter().filter(|(k, _)| !k.ends_with(".seed")) {
            kv.set(k, v);
        }
        kv.set("finetune_mask", self.mask.clone());
        kv.set(
            "parameterization",
            match self.parameterization {
                Parameterization::Delta => "delta",
                Parameterization::Direct => "direct",
            },
        );
        kv.set("adapt_k", self.adapt.k.to_string());
        kv.set("nn_include_bias", self.adapt.include_bias.to_string());
        kv.set("adapt_bias", self.adapt.adapt_bias.to_string());
        self.detect.proposals.write_to(&mut kv);
        kv.set("context_pad", self.detect.context_pad.to_string());
        kv.set("nms_iou", self.detect.nms_iou.to_string());
        kv.set(
            "score_floor",
            if self.detect.score_floor == f64::NEG_INFINITY { "-inf".to_string() } else { self.detect.score_floor.to_string() },
        );
        kv.set("score_mode", self.detect.score_mode.to_string());
        kv.set(
            "cross_category_iou",
            self.detect.cross_category_iou.map_or("none".to_string(), |v| v.to_string()),
        );
        kv.set("eval_iou", self.eval_iou.to_string());
        kv.set("fp_band", self.fp_band.to_string());
        kv.set("cutoffs", join(&self.cutoffs));
        kv.set("grid_k", join(&self.grid_k));
        kv.set("test_k", self.test_k.to_string());
        kv
    }

    /// SHA-256 of the rendered configuration, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_key_values().render().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.gen_config().validate()?;
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        FreezeMask::parse(&self.mask, self.arch.hidden.len())?;
        self.adapt.validate(self.data.m)?;
        for k in self.grid_k.iter().chain([&self.test_k]) {
            AdaptConfig::with_k(*k).validate(self.data.m)?;
        }
        self.detect.proposals.validate(self.data.image_size)?;
        for (name, v) in [("nms_iou", self.detect.nms_iou), ("eval_iou", self.eval_iou), ("fp_band", self.fp_band)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ExperimentError::Invalid(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.fp_band >= self.eval_iou {
            return Err(ExperimentError::Invalid(format!(
                "fp_band {} must lie below eval_iou {}",
                self.fp_band, self.eval_iou
            )));
        }
        if !self.cutoffs.windows(2).all(|w| w[0] < w[1]) {
            return Err(ExperimentError::Invalid("cutoffs must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 1),
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 2),
            ..self.finetune.clone()
        }
    }

    pub fn freeze_mask(&self) -> Result<FreezeMask, ExperimentError> {
        Ok(FreezeMask::parse(&self.mask, self.arch.hidden.len())?)
    }

    /// Same run with a different master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn generate_data(config: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    Ok(generate(&config.gen_config())?)
}

pub fn run_pretrain<T: Scalar>(config: &ExperimentConfig, split: &SplitData) -> Result<(NetworkParams<T>, TrainLog), ExperimentError> {
    Ok(pretrain(split, &config.arch, &config.pretrain_config())?)
}

/// Region pool for box-annotated categories (`all = false`) or every category.
pub fn build_pool<T: Scalar>(config: &ExperimentConfig, split: &SplitData, all: bool) -> Result<RegionPool<T>, ExperimentError> {
    let partition = &split.manifest.partition;
    let n = if all { partition.k() } else { partition.m() };
    Ok(RegionPool::build(
        split,
        n,
        &config.detect.proposals,
        &config.finetune_config(),
        config.arch.input_side,
    )?)
}

pub fn run_finetune<T: Scalar>(
    config: &ExperimentConfig,
    pretrained: &NetworkParams<T>,
    pool: &RegionPool<T>,
    mask: &FreezeMask,
    supervision: Supervision,
) -> Result<FineTuned<T>, ExperimentError> {
    let options = FinetuneOptions {
        parameterization: config.parameterization,
        supervision,
    };
    Ok(finetune(pretrained, pool, mask, &config.finetune_config(), &options)?)
}

/// Proposals and their warps for every evaluation image, computed once.
#[derive(Debug, Clone)]
pub struct EvalCache<T> {
    pub manifest: DatasetManifest,
    pub images: Vec<CachedImage<T>>,
}

#[derive(Debug, Clone)]
pub struct CachedImage<T> {
    pub id: String,
    pub boxes: Vec<BBox>,
    pub inputs: Array2<T>,
}

impl<T: Scalar> EvalCache<T> {
    pub fn build(split: &SplitData, detect: &DetectConfig, side: usize) -> Result<Self, ExperimentError> {
        let images = split
            .samples
            .iter()
            .map(|s| {
                let boxes = propose_regions(s.image.width(), s.image.height(), &detect.proposals);
                let inputs = warp_regions(&s.image, &boxes, detect.context_pad, side)?;
                Ok(CachedImage {
                    id: s.id.clone(),
                    boxes,
                    inputs,
                })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(Self {
            manifest: split.manifest.clone(),
            images,
        })
    }

    /// SHA-256 of the rendered evaluation manifest, hex.
    pub fn manifest_hash(&self) -> String {
        hex::encode(Sha256::digest(self.manifest.render().as_bytes()))
    }
}

/// Detections of a network over cached regions. Classification-state networks
/// score with an implicit zero background, detector-state networks subtract
/// their background output.
pub fn detect_cached<T: Scalar>(net: &NetworkParams<T>, cache: &EvalCache<T>, detect: &DetectConfig) -> Result<Vec<Detection>, ExperimentError> {
    let mut out = Vec::new();
    for image in &cache.images {
        let scores = score_by_state(net, image.inputs.view(), detect.score_mode)?;
        out.extend(detections_from_scores(&image.id, &image.boxes, &scores, detect));
    }
    Ok(out)
}

/// Evaluation of one method with its held-out false-positive breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub report: EvalReport,
    pub held_out_fp: BreakdownCurve,
}

pub fn evaluate_method(config: &ExperimentConfig, detections: &[Detection], manifest: &DatasetManifest) -> Result<MethodResult, ExperimentError> {
    let report = evaluate(detections, manifest, config.eval_iou)?;
    let m = manifest.partition.m();
    let fps = false_positives(detections, manifest, config.eval_iou, Bands { low: config.fp_band }, |c| c >= m)?;
    Ok(MethodResult {
        report,
        held_out_fp: breakdown(&fps, &config.cutoffs),
    })
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Adapted blocks, `no-adapt` or `oracle`.
    pub layers: String,
    /// `-` or `Avg NN (k=..)`.
    pub output: String,
    pub result: Result<MethodResult, String>,
    pub eval_manifest: String,
}

impl AblationRow {
    pub fn report(&self) -> Option<&EvalReport> {
        self.result.as_ref().ok().map(|r| &r.report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// `(t, p)` of the chosen nearest-neighbour row against the same layers
    /// without output adaptation, over held-out category APs.
    pub t_test: Option<(f64, f64)>,
}

pub const NO_ADAPT: &str = "no-adapt";
pub const ORACLE: &str = "oracle";

/// Freeze masks of the grid, in table order.
pub const GRID_MASKS: &[&str] = &[
    "bgrnd",
    "bgrnd,fc6",
    "bgrnd,fc7",
    "bgrnd,fcB",
    "bgrnd,fc6,fc7",
    "bgrnd,fc6,fc7,fcB",
    "bgrnd,layers,fcB",
];

/// Mask of the rows that also receive output-layer adaptation.
pub const FULL_MASK: &str = "bgrnd,layers,fcB";

pub fn nn_label(k: NeighborCount) -> String {
    format!("Avg NN (k={k})")
}

impl AblationResult {
    pub fn row(&self, layers: &str, output: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.layers == layers && r.output == output)
    }

    pub fn held_out(&self, layers: &str, output: &str) -> Option<f64> {
        self.row(layers, output).and_then(|r| r.report()).map(|r| r.map_held_out)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("adaptation_layers\toutput_adaptation\tmAP_trained\tmAP_held_out\tmAP_all\tstatus\teval_manifest_sha256\n");
        for row in &self.rows {
            match &row.result {
                Ok(r) => {
                    let r = &r.report;
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{}\tok\t{}",
                        row.layers, row.output, r.map_trained, r.map_held_out, r.map_all, row.eval_manifest
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{}\t{}\t-\t-\t-\tfailed: {}\t{}", row.layers, row.output, e.replace('\t', " "), row.eval_manifest);
                }
            }
        }
        if let Some((t, p)) = self.t_test {
            let _ = writeln!(out, "# paired_t_test\tt={t}\tp={p}");
        }
        out
    }

    /// Percent table in the layout of the paper's ablation table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:<16} {:>8} {:>9} {:>8}\n",
            "Adaptation layers", "Output adapt.", "mAP B", "mAP A", "mAP all"
        );
        for row in &self.rows {
            let layers = match row.layers.as_str() {
                NO_ADAPT => "classification only",
                ORACLE => "full detection oracle",
                l => l,
            };
            match row.report() {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "{layers:<22} {:<16} {:>8.2} {:>9.2} {:>8.2}",
                        row.output,
                        100.0 * r.map_trained,
                        100.0 * r.map_held_out,
                        100.0 * r.map_all
                    );
                }
                None => {
                    let _ = writeln!(out, "{layers:<22} {:<16} {:>8} {:>9} {:>8}", row.output, "failed", "-", "-");
                }
            }
        }
        if let Some((t, p)) = self.t_test {
            let _ = writeln!(out, "paired t-test on held-out APs: t = {t:.4}, p = {p:.4}");
        }
        out
    }
}

/// Inputs shared by every cell of the grid.
pub struct AblationInputs<'a, T> {
    pub pretrained: &'a NetworkParams<T>,
    pub pool_b: &'a RegionPool<T>,
    pub pool_all: &'a RegionPool<T>,
    pub eval: &'a EvalCache<T>,
}

enum Unit {
    NoAdapt,
    Mask(&'static str),
    Oracle,
}

fn run_unit<T: Scalar>(config: &ExperimentConfig, inputs: &AblationInputs<'_, T>, unit: &Unit) -> Vec<AblationRow> {
    let hash = inputs.eval.manifest_hash();
    let depth = config.arch.hidden.len();
    let evaluate_net = |net: &NetworkParams<T>| -> Result<MethodResult, ExperimentError> {
        let dets = detect_cached(net, inputs.eval, &config.detect)?;
        evaluate_method(config, &dets, &inputs.eval.manifest)
    };
    let row = |layers: &str, output: String, result: Result<MethodResult, ExperimentError>| AblationRow {
        layers: layers.to_string(),
        output,
        result: result.map_err(|e| e.to_string()),
        eval_manifest: hash.clone(),
    };
    match unit {
        Unit::NoAdapt => vec![row(NO_ADAPT, "-".into(), evaluate_net(inputs.pretrained))],
        Unit::Oracle => {
            let result = FreezeMask::parse(FULL_MASK, depth)
                .map_err(ExperimentError::from)
                .and_then(|mask| run_finetune(config, inputs.pretrained, inputs.pool_all, &mask, Supervision::AllCategories))
                .and_then(|ft| evaluate_net(&ft.network));
            vec![row(ORACLE, "-".into(), result)]
        }
        Unit::Mask(mask_label) => {
            let tuned = FreezeMask::parse(mask_label, depth)
                .map_err(ExperimentError::from)
                .and_then(|mask| run_finetune(config, inputs.pretrained, inputs.pool_b, &mask, Supervision::BoxAnnotated));
            let tuned = match tuned {
                Ok(t) => t,
                Err(e) => {
                    let msg = e.to_string();
                    let mut rows = vec![row(mask_label, "-".into(), Err(ExperimentError::Invalid(msg.clone())))];
                    if *mask_label == FULL_MASK {
                        rows.extend(config.grid_k.iter().map(|k| row(mask_label, nn_label(*k), Err(ExperimentError::Invalid(msg.clone())))));
                    }
                    return rows;
                }
            };
            let mut rows = vec![row(mask_label, "-".into(), evaluate_net(&tuned.network))];
            if *mask_label == FULL_MASK {
                for k in &config.grid_k {
                    let adapt = AdaptConfig { k: *k, ..config.adapt };
                    let result = assemble_lsda(inputs.pretrained, &tuned.network, &adapt)
                        .map_err(ExperimentError::from)
                        .and_then(|(net, _)| evaluate_net(&net));
                    rows.push(row(mask_label, nn_label(*k), result));
                }
            }
            rows
        }
    }
}

/// Runs every cell from one pretrained network. `jobs > 1` runs independent
/// fine-tuning units on worker threads; the result does not depend on `jobs`.
pub fn run_ablation<T: Scalar>(config: &ExperimentConfig, inputs: &AblationInputs<'_, T>, jobs: usize) -> AblationResult {
    let mut units = vec![Unit::NoAdapt];
    units.extend(GRID_MASKS.iter().map(|m| Unit::Mask(m)));
    units.push(Unit::Oracle);

    let slots: Vec<Mutex<Option<Vec<AblationRow>>>> = units.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= units.len() {
            break;
        }
        let rows = run_unit(config, inputs, &units[i]);
        *slots[i].lock().expect("unpoisoned") = Some(rows);
    };
    std::thread::scope(|scope| {
        for _ in 1..jobs.max(1).min(units.len()) {
            scope.spawn(worker);
        }
        worker();
    });
    let rows: Vec<AblationRow> = slots
        .into_iter()
        .flat_map(|s| s.into_inner().expect("unpoisoned").expect("every unit ran"))
        .collect();

    let mut result = AblationResult {
        seed: config.seed,
        rows,
        t_test: None,
    };
    let base = result.row(FULL_MASK, "-").and_then(|r| r.report()).map(|r| r.held_out_ap().to_vec());
    let nn = result.row(FULL_MASK, &nn_label(config.test_k)).and_then(|r| r.report()).map(|r| r.held_out_ap().to_vec());
    if let (Some(a), Some(b)) = (base, nn) {
        result.t_test = paired_t_test(&a, &b).ok();
    }
    result
}

/// Everything one seed of the benchmark needs, built from scratch in memory.
pub struct SeedRun<T> {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub pretrained: NetworkParams<T>,
    pub pretrain_log: TrainLog,
    pub pool_b: RegionPool<T>,
    pub pool_all: RegionPool<T>,
    pub eval: EvalCache<T>,
}

impl<T: Scalar> SeedRun<T> {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let dataset = generate_data(config)?;
        let (pretrained, pretrain_log) = run_pretrain(config, &dataset.split(crate::data::SplitKind::Classification))?;
        let pool_b = build_pool(config, &dataset.split(crate::data::SplitKind::Detection), false)?;
        let pool_all = build_pool(config, &dataset.split(crate::data::SplitKind::DetectionAll), true)?;
        let eval = EvalCache::build(&dataset.split(crate::data::SplitKind::Eval), &config.detect, config.arch.input_side)?;
        Ok(Self {
            config: config.clone(),
            dataset,
            pretrained,
            pretrain_log,
            pool_b,
            pool_all,
            eval,
        })
    }

    pub fn inputs(&self) -> AblationInputs<'_, T> {
        AblationInputs {
            pretrained: &self.pretrained,
            pool_b: &self.pool_b,
            pool_all: &self.pool_all,
            eval: &self.eval,
        }
    }

    pub fn ablate(&self, jobs: usize) -> AblationResult {
        run_ablation(&self.config, &self.inputs(), jobs)
    }
}
