//! SGD training for both phases.
//!
//! * [`pretrain`]: K-way softmax classification on full-image warps, from
//!   random initialization.
//! * [`finetune`]: detection fine-tuning on region warps with a background
//!   class. The category rows are trained through a zero-initialized additive
//!   delta (`delta_b`) on top of the frozen classifier rows, and the loss is the
//!   same function of the summed weights as direct fine-tuning would use, weight
//!   decay included. Blocks not enabled by the [`FreezeMask`] are never written.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bbox::{iou, BBox};
use crate::config::{ConfigError, KeyValues};
use crate::data::{derive_seed, warp_region_into, Annotation, DataError, SplitData};
use crate::detector::{propose_regions, ProposalConfig};
use crate::model::{
    layer_alias, layer_name, Architecture, CategoryPartition, HeadState, ModelError,
    NetworkParams, OutputHead, WeightMatrix,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("degenerate dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each detection batch drawn from positive regions.
    pub positive_fraction: f64,
    /// Minimum IoU with a ground-truth box for a region to count as that category.
    pub positive_iou: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Context added around each region before warping, in source pixels.
    pub context_pad: u32,
    /// Jittered copies generated around each ground-truth box.
    pub jitter_per_box: usize,
    /// Cap on background regions kept per training image.
    pub background_per_image: usize,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            positive_fraction: 0.25,
            positive_iou: 0.5,
            weight_decay: 5e-4,
            seed: 7,
            context_pad: 0,
            jitter_per_box: 0,
            background_per_image: 0,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            context_pad: 2,
            jitter_per_box: 8,
            background_per_image: 24,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        if !(self.positive_iou > 0.0 && self.positive_iou <= 1.0) {
            return Err(TrainError::Config(format!(
                "positive_iou must lie in (0, 1], got {}",
                self.positive_iou
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(TrainError::Config("learning_rate > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "momentum",
        "epochs",
        "batch_size",
        "positive_fraction",
        "positive_iou",
        "weight_decay",
        "seed",
        "context_pad",
        "jitter_per_box",
        "background_per_image",
    ];

    /// Applies `prefix.key = value` entries.
    pub fn apply(&mut self, kv: &KeyValues, prefix: &str) -> Result<(), TrainError> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.read(&key("learning_rate"), &mut self.learning_rate)?;
        kv.read(&key("momentum"), &mut self.momentum)?;
        kv.read(&key("epochs"), &mut self.epochs)?;
        kv.read(&key("batch_size"), &mut self.batch_size)?;
        kv.read(&key("positive_fraction"), &mut self.positive_fraction)?;
        kv.read(&key("positive_iou"), &mut self.positive_iou)?;
        kv.read(&key("weight_decay"), &mut self.weight_decay)?;
        kv.read(&key("seed"), &mut self.seed)?;
        kv.read(&key("context_pad"), &mut self.context_pad)?;
        kv.read(&key("jitter_per_box"), &mut self.jitter_per_box)?;
        kv.read(&key("background_per_image"), &mut self.background_per_image)?;
        Ok(())
    }

    pub fn write_to(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}learning_rate"), self.learning_rate.to_string());
        kv.set(format!("{prefix}momentum"), self.momentum.to_string());
        kv.set(format!("{prefix}epochs"), self.epochs.to_string());
        kv.set(format!("{prefix}batch_size"), self.batch_size.to_string());
        kv.set(format!("{prefix}positive_fraction"), self.positive_fraction.to_string());
        kv.set(format!("{prefix}positive_iou"), self.positive_iou.to_string());
        kv.set(format!("{prefix}weight_decay"), self.weight_decay.to_string());
        kv.set(format!("{prefix}seed"), self.seed.to_string());
        kv.set(format!("{prefix}context_pad"), self.context_pad.to_string());
        kv.set(format!("{prefix}jitter_per_box"), self.jitter_per_box.to_string());
        kv.set(format!("{prefix}background_per_image"), self.background_per_image.to_string());
    }
}

/// Blocks updated during detection fine-tuning. The background row is always
/// trained; the held-out classifier rows never are.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FreezeMask {
    /// One flag per hidden layer, `true` = trainable.
    pub layers: Vec<bool>,
    /// Whether `delta_b` (the box-annotated category rows) is trained.
    pub fc_b: bool,
}

impl FreezeMask {
    /// Only the background row is trained.
    pub fn background_only(depth: usize) -> Self {
        Self {
            layers: vec![false; depth],
            fc_b: false,
        }
    }

    /// Every block is trained.
    pub fn all(depth: usize) -> Self {
        Self {
            layers: vec![true; depth],
            fc_b: true,
        }
    }

    /// Parses a comma-separated block list such as `bgrnd,fc6,fc7,fcB` or
    /// `bgrnd,layers,fcB`. Accepted tokens: `bgrnd`, `fcB`, `layers` (every
    /// hidden layer), `layer_<n>`, `fc6`, `fc7`.
    pub fn parse(spec: &str, depth: usize) -> Result<Self, TrainError> {
        let mut mask = Self::background_only(depth);
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "bgrnd" => {}
                "fcB" => mask.fc_b = true,
                "layers" => mask.layers.iter_mut().for_each(|l| *l = true),
                _ => {
                    let index = (0..depth)
                        .find(|&i| layer_name(i) == token || layer_alias(i, depth) == Some(token))
                        .ok_or_else(|| {
                            TrainError::Config(format!(
                                "mask enables `{token}`, which does not exist in a {depth}-layer network"
                            ))
                        })?;
                    mask.layers[index] = true;
                }
            }
        }
        Ok(mask)
    }

    pub fn validate(&self, depth: usize) -> Result<(), TrainError> {
        if self.layers.len() != depth {
            return Err(TrainError::Config(format!(
                "mask covers {} layers, network has {depth}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn trains_any_layer(&self) -> bool {
        self.layers.iter().any(|&l| l)
    }
}

impl fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let depth = self.layers.len();
        let mut parts = vec!["bgrnd".to_string()];
        if depth > 0 && self.layers.iter().all(|&l| l) {
            parts.push("layers".into());
        } else {
            for (i, _) in self.layers.iter().enumerate().filter(|(_, &l)| l) {
                parts.push(layer_alias(i, depth).map(str::to_string).unwrap_or_else(|| layer_name(i)));
            }
        }
        if self.fc_b {
            parts.push("fcB".into());
        }
        f.write_str(&parts.join(","))
    }
}

/// How the fine-tuned category rows are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parameterization {
    /// Frozen classifier rows plus a trained zero-initialized delta.
    #[default]
    Delta,
    /// The classifier rows themselves are trained; the delta is recovered by
    /// subtraction afterwards.
    Direct,
}

/// Which categories supply boxes during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Supervision {
    /// Only the box-annotated categories (set B).
    #[default]
    BoxAnnotated,
    /// Every category, for the full-detection upper bound.
    AllCategories,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Accuracy of the final parameters over the whole training set.
    pub final_accuracy: f64,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tloss\taccuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.loss, e.accuracy));
        }
        out.push_str(&format!("# final_accuracy\t{}\n", self.final_accuracy));
        out
    }
}

/// Gradients of the loss with respect to each block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// `None` for layers whose gradient was not requested.
    pub layers: Vec<Option<(Array2<T>, Array1<T>)>>,
    pub head: (Array2<T>, Array1<T>),
}

/// Mean softmax cross-entropy over the batch plus `0.5 * weight_decay * |W|^2`
/// summed over the head and every requested layer (biases are not decayed),
/// together with its gradients.
///
/// `layers` may be empty, in which case the head acts on the inputs directly.
pub fn loss_and_gradients<T: Scalar>(
    layers: &[WeightMatrix<T>],
    head: &WeightMatrix<T>,
    inputs: ArrayView2<'_, T>,
    labels: &[usize],
    weight_decay: T,
    trainable: &[bool],
) -> (T, Gradients<T>) {
    assert_eq!(inputs.nrows(), labels.len(), "one label per input row");
    assert_eq!(layers.len(), trainable.len(), "one flag per layer");
    let n = T::of(labels.len() as f64);

    // Forward, keeping post-ReLU activations.
    let mut acts: Vec<Array2<T>> = Vec::with_capacity(layers.len());
    for layer in layers {
        let input = acts.last().map(|a| a.view()).unwrap_or(inputs);
        let mut h = layer.apply_batch(input);
        h.mapv_inplace(crate::model::relu);
        acts.push(h);
    }
    let top = acts.last().map(|a| a.view()).unwrap_or(inputs);
    let mut dlogits = head.apply_batch(top);

    let mut loss = T::zero();
    for (mut row, &label) in dlogits.outer_iter_mut().zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss -= (row[label] / sum).ln();
        row.mapv_inplace(|v| v / sum / n);
        row[label] -= T::one() / n;
    }
    loss /= n;

    let half_decay = T::of(0.5) * weight_decay;
    loss += half_decay * head.weights().iter().map(|w| *w * *w).sum::<T>();
    for (layer, _) in layers.iter().zip(trainable).filter(|(_, &t)| t) {
        loss += half_decay * layer.weights().iter().map(|w| *w * *w).sum::<T>();
    }

    let head_w = dlogits.t().dot(&top) + &(head.weights() * weight_decay);
    let head_b = dlogits.sum_axis(Axis(0));

    let lowest = trainable.iter().position(|&t| t);
    let mut grads: Vec<Option<(Array2<T>, Array1<T>)>> = vec![None; layers.len()];
    if let Some(lowest) = lowest {
        let mut upstream = dlogits.dot(head.weights());
        for l in (lowest..layers.len()).rev() {
            // ReLU derivative.
            upstream.zip_mut_with(&acts[l], |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            let below = if l == 0 { inputs } else { acts[l - 1].view() };
            if trainable[l] {
                let gw = upstream.t().dot(&below) + &(layers[l].weights() * weight_decay);
                let gb = upstream.sum_axis(Axis(0));
                grads[l] = Some((gw, gb));
            }
            if l > lowest {
                upstream = upstream.dot(layers[l].weights());
            }
        }
    }
    (
        loss,
        Gradients {
            layers: grads,
            head: (head_w, head_b),
        },
    )
}

/// Momentum SGD on one block: `v = momentum * v + g; p -= lr * v`.
struct Momentum<T> {
    weights: Array2<T>,
    bias: Array1<T>,
}

impl<T: Scalar> Momentum<T> {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            weights: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    fn step(&mut self, target: &mut WeightMatrix<T>, grad_w: ArrayView2<'_, T>, grad_b: ndarray::ArrayView1<'_, T>, lr: T, momentum: T) {
        self.weights.zip_mut_with(&grad_w, |v, &g| *v = momentum * *v + g);
        self.bias.zip_mut_with(&grad_b, |v, &g| *v = momentum * *v + g);
        let (w, b) = target.parts_mut();
        w.zip_mut_with(&self.weights, |p, &v| *p -= lr * v);
        b.zip_mut_with(&self.bias, |p, &v| *p -= lr * v);
    }
}

fn argmax<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn gather<T: Scalar>(inputs: &Array2<T>, idx: &[usize]) -> Array2<T> {
    inputs.select(Axis(0), idx)
}

/// Full-image warps of a classification split with their labels.
pub fn classification_inputs<T: Scalar>(split: &SplitData, side: usize) -> Result<(Array2<T>, Vec<usize>), TrainError> {
    let mut inputs = Array2::zeros((split.samples.len(), side * side));
    let mut labels = Vec::with_capacity(split.samples.len());
    for (mut row, sample) in inputs.outer_iter_mut().zip(&split.samples) {
        let label = match sample.annotation {
            Annotation::Label(c) => c,
            Annotation::Boxes(_) => {
                return Err(TrainError::Dataset(format!("record {} has boxes, expected a label", sample.id)))
            }
        };
        let full = BBox::new(0, 0, sample.image.width(), sample.image.height()).expect("nonempty image");
        warp_region_into(&sample.image, &full, 0, side, row.as_slice_mut().expect("contiguous row"))?;
        labels.push(label);
    }
    Ok((inputs, labels))
}

/// Classification training from the seeded random initialization.
pub fn pretrain<T: Scalar>(
    split: &SplitData,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainLog), TrainError> {
    config.validate()?;
    let partition = split.manifest.partition.clone();
    let (inputs, labels) = classification_inputs::<T>(split, arch.input_side)?;
    let mut covered = vec![false; partition.k()];
    labels.iter().for_each(|&l| covered[l] = true);
    if let Some(missing) = covered.iter().position(|&c| !c) {
        return Err(TrainError::Dataset(format!(
            "no classification images for category `{}`",
            partition.name(missing)
        )));
    }
    pretrain_on(&inputs, &labels, partition, arch, config)
}

/// [`pretrain`] on already warped inputs.
pub fn pretrain_on<T: Scalar>(
    inputs: &Array2<T>,
    labels: &[usize],
    partition: CategoryPartition,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainLog), TrainError> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417));
    let net = NetworkParams::<T>::random(arch, partition, &mut init_rng)?;
    let m = net.partition().m();
    let depth = net.layers().len();
    let mut layers = net.layers().to_vec();
    let mut head = net.head().classifier();
    let trainable = vec![true; depth];
    let mut layer_state: Vec<Momentum<T>> = layers.iter().map(|l| Momentum::new(l.rows(), l.cols())).collect();
    let mut head_state = Momentum::new(head.rows(), head.cols());
    let (lr, mom, wd) = (T::of(config.learning_rate), T::of(config.momentum), T::of(config.weight_decay));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC1A5));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = gather(inputs, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = loss_and_gradients(&layers, &head, x.view(), &y, wd, &trainable);
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            correct += count_correct(&layers, &head, x.view(), &y);
            loss_sum += loss.as_f64() * chunk.len() as f64;
            for ((layer, state), grad) in layers.iter_mut().zip(&mut layer_state).zip(&grads.layers) {
                let (gw, gb) = grad.as_ref().expect("all layers trainable");
                state.step(layer, gw.view(), gb.view(), lr, mom);
            }
            head_state.step(&mut head, grads.head.0.view(), grads.head.1.view(), lr, mom);
        }
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / labels.len() as f64,
            accuracy: correct as f64 / labels.len() as f64,
        });
    }
    let head = OutputHead::from_classifier(&head, m)?;
    let net = NetworkParams::new(net.input_dim(), layers, head, net.partition().clone())?;
    log.final_accuracy = accuracy(&net, inputs, labels)?;
    Ok((net, log))
}

fn count_correct<T: Scalar>(layers: &[WeightMatrix<T>], head: &WeightMatrix<T>, x: ArrayView2<'_, T>, y: &[usize]) -> usize {
    let mut h = x.to_owned();
    for layer in layers {
        h = layer.apply_batch(h.view());
        h.mapv_inplace(crate::model::relu);
    }
    let logits = head.apply_batch(h.view());
    logits.outer_iter().zip(y).filter(|(row, &l)| argmax(row.view()) == l).count()
}

/// Fraction of inputs whose highest raw output is the label.
pub fn accuracy<T: Scalar>(net: &NetworkParams<T>, inputs: &Array2<T>, labels: &[usize]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let out = net.forward_batch(inputs.view())?;
    let correct = out.outer_iter().zip(labels).filter(|(row, &l)| argmax(row.view()) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Training label of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionLabel {
    Category(usize),
    Background,
}

/// Labels `region` against the ground truth: the category of the best
/// overlapping box if that IoU reaches `positive_iou`, background otherwise.
/// Only categories below `num_categories` count as positives.
pub fn label_region(region: &BBox, ground_truth: &[(usize, BBox)], positive_iou: f64, num_categories: usize) -> RegionLabel {
    let mut best: Option<(f64, usize)> = None;
    for (c, gt) in ground_truth.iter().filter(|(c, _)| *c < num_categories) {
        let overlap = iou(region, gt);
        if best.is_none_or(|(b, _)| overlap > b) {
            best = Some((overlap, *c));
        }
    }
    match best {
        Some((overlap, c)) if overlap >= positive_iou => RegionLabel::Category(c),
        _ => RegionLabel::Background,
    }
}

fn jitter<R: Rng>(gt: &BBox, width: u32, height: u32, rng: &mut R) -> Option<BBox> {
    let (w, h) = (gt.width() as f64, gt.height() as f64);
    let cx = (gt.x1 + gt.x2) as f64 / 2.0 + rng.gen_range(-0.25..0.25) * w;
    let cy = (gt.y1 + gt.y2) as f64 / 2.0 + rng.gen_range(-0.25..0.25) * h;
    let nw = w * rng.gen_range(0.75..1.33);
    let nh = h * rng.gen_range(0.75..1.33);
    let x1 = (cx - nw / 2.0).round().clamp(0.0, width as f64) as u32;
    let y1 = (cy - nh / 2.0).round().clamp(0.0, height as f64) as u32;
    let x2 = (cx + nw / 2.0).round().clamp(0.0, width as f64) as u32;
    let y2 = (cy + nh / 2.0).round().clamp(0.0, height as f64) as u32;
    BBox::new(x1, y1, x2, y2).ok()
}

/// Warped, labelled training regions for detection fine-tuning: ground-truth
/// boxes, jittered copies and grid proposals, with backgrounds subsampled per
/// image.
#[derive(Debug, Clone)]
pub struct RegionPool<T> {
    pub inputs: Array2<T>,
    pub labels: Vec<RegionLabel>,
    positives: Vec<usize>,
    backgrounds: Vec<usize>,
    num_categories: usize,
}

impl<T: Scalar> RegionPool<T> {
    /// Builds the pool for categories `0..num_categories` (use `m` for set B,
    /// `K` for every category).
    pub fn build(
        split: &SplitData,
        num_categories: usize,
        proposals: &ProposalConfig,
        config: &TrainConfig,
        side: usize,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if split.samples.is_empty() {
            return Err(TrainError::Dataset("detection manifest is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x9001));
        let mut regions: Vec<(usize, BBox, RegionLabel)> = Vec::new();
        for (index, sample) in split.samples.iter().enumerate() {
            let gts = sample.annotation.boxes();
            let (w, h) = (sample.image.width(), sample.image.height());
            let mut candidates: Vec<BBox> = Vec::new();
            for (_, gt) in gts {
                candidates.push(*gt);
                for _ in 0..config.jitter_per_box {
                    candidates.extend(jitter(gt, w, h, &mut rng));
                }
            }
            candidates.extend(propose_regions(w, h, proposals));
            candidates.sort();
            candidates.dedup();
            let mut backgrounds = Vec::new();
            for c in candidates {
                match label_region(&c, gts, config.positive_iou, num_categories) {
                    RegionLabel::Background => backgrounds.push(c),
                    label => regions.push((index, c, label)),
                }
            }
            backgrounds.shuffle(&mut rng);
            backgrounds.truncate(config.background_per_image);
            regions.extend(backgrounds.into_iter().map(|b| (index, b, RegionLabel::Background)));
        }
        let mut inputs = Array2::zeros((regions.len(), side * side));
        for (mut row, (index, region, _)) in inputs.outer_iter_mut().zip(&regions) {
            let image = &split.samples[*index].image;
            warp_region_into(image, region, config.context_pad, side, row.as_slice_mut().expect("contiguous"))?;
        }
        let labels: Vec<RegionLabel> = regions.iter().map(|r| r.2).collect();
        Self::from_parts(inputs, labels, num_categories)
    }

    /// Pool over pre-warped regions.
    pub fn from_parts(inputs: Array2<T>, labels: Vec<RegionLabel>, num_categories: usize) -> Result<Self, TrainError> {
        if inputs.nrows() != labels.len() {
            return Err(TrainError::Dataset("one label per region required".into()));
        }
        let positives = (0..labels.len())
            .filter(|&i| matches!(labels[i], RegionLabel::Category(_)))
            .collect();
        let backgrounds: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == RegionLabel::Background)
            .collect();
        if let Some(bad) = labels.iter().find_map(|l| match l {
            RegionLabel::Category(c) if *c >= num_categories => Some(*c),
            _ => None,
        }) {
            return Err(TrainError::Dataset(format!("region labelled {bad} outside 0..{num_categories}")));
        }
        Ok(Self {
            inputs,
            labels,
            positives,
            backgrounds,
            num_categories,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn num_backgrounds(&self) -> usize {
        self.backgrounds.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Positives per batch: `round(positive_fraction * batch_size)`.
    pub fn positives_per_batch(config: &TrainConfig) -> usize {
        (config.positive_fraction * config.batch_size as f64).round() as usize
    }

    /// Row indices of one batch. Positives are drawn without replacement; when
    /// they are scarce each appears at most twice and the remaining slots are
    /// filled with backgrounds.
    pub fn sample_indices<R: Rng>(&self, config: &TrainConfig, rng: &mut R) -> Result<Vec<usize>, TrainError> {
        if self.backgrounds.is_empty() {
            return Err(TrainError::Dataset("no background regions available".into()));
        }
        let want = Self::positives_per_batch(config).min(config.batch_size);
        let mut batch: Vec<usize> = if self.positives.len() >= want {
            self.positives.choose_multiple(rng, want).copied().collect()
        } else {
            let mut picked = self.positives.clone();
            let extra = (want - picked.len()).min(self.positives.len());
            picked.extend(self.positives.choose_multiple(rng, extra).copied());
            picked
        };
        let fill = config.batch_size - batch.len();
        if self.backgrounds.len() >= fill {
            batch.extend(self.backgrounds.choose_multiple(rng, fill).copied());
        } else {
            batch.extend((0..fill).map(|_| self.backgrounds[rng.gen_range(0..self.backgrounds.len())]));
        }
        Ok(batch)
    }

    /// One batch of `(warped region, label)` pairs.
    pub fn sample_detection_batch<R: Rng>(&self, config: &TrainConfig, rng: &mut R) -> Result<Vec<(Vec<T>, RegionLabel)>, TrainError> {
        Ok(self
            .sample_indices(config, rng)?
            .into_iter()
            .map(|i| (self.inputs.row(i).to_vec(), self.labels[i]))
            .collect())
    }

    fn class_index(&self, label: RegionLabel) -> usize {
        match label {
            RegionLabel::Category(c) => c,
            RegionLabel::Background => self.num_categories,
        }
    }

    /// Batches per epoch: enough to visit every positive once.
    pub fn batches_per_epoch(&self, config: &TrainConfig) -> usize {
        let per = Self::positives_per_batch(config).max(1);
        self.positives.len().div_ceil(per).max(1)
    }
}

/// Result of detection fine-tuning.
#[derive(Debug, Clone)]
pub struct FineTuned<T> {
    /// Detector-state network.
    pub network: NetworkParams<T>,
    /// Learned change of the box-annotated rows, one row per category in B.
    pub delta_b: WeightMatrix<T>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub parameterization: Parameterization,
    pub supervision: Supervision,
}

/// Detection fine-tuning of a classification-state network.
pub fn finetune<T: Scalar>(
    pretrained: &NetworkParams<T>,
    pool: &RegionPool<T>,
    mask: &FreezeMask,
    config: &TrainConfig,
    options: &FinetuneOptions,
) -> Result<FineTuned<T>, TrainError> {
    config.validate()?;
    if pretrained.state() != HeadState::Classification {
        return Err(TrainError::Model(ModelError::State(
            "fine-tuning starts from a classification-state network".into(),
        )));
    }
    let depth = pretrained.layers().len();
    mask.validate(depth)?;
    let partition = pretrained.partition();
    let m = partition.m();
    let rows = match options.supervision {
        Supervision::BoxAnnotated => m,
        Supervision::AllCategories => partition.k(),
    };
    if pool.num_categories() != rows {
        return Err(TrainError::Config(format!(
            "region pool labels {} categories, fine-tuning expects {rows}",
            pool.num_categories()
        )));
    }
    let train_rows = match options.supervision {
        Supervision::BoxAnnotated => mask.fc_b,
        Supervision::AllCategories => true,
    };

    let mut layers = pretrained.layers().to_vec();
    // Category rows under supervision, in partition order.
    let base = pretrained.head().classifier().slice_rows(0, rows);
    let cols = base.cols();
    let mut direct = base.clone();
    let mut delta = WeightMatrix::<T>::zeros(rows, cols);
    let mut background = WeightMatrix::<T>::zeros(1, cols);

    let mut layer_state: Vec<Momentum<T>> = layers.iter().map(|l| Momentum::new(l.rows(), l.cols())).collect();
    let mut rows_state = Momentum::new(rows, cols);
    let mut bg_state = Momentum::new(1, cols);
    let (lr, mom, wd) = (T::of(config.learning_rate), T::of(config.momentum), T::of(config.weight_decay));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xF17E));
    let batches = pool.batches_per_epoch(config);
    let mut log = TrainLog::default();
    let current_rows = |direct: &WeightMatrix<T>, delta: &WeightMatrix<T>| match options.parameterization {
        Parameterization::Delta => base.add(delta).expect("same shape"),
        Parameterization::Direct => direct.clone(),
    };
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..batches {
            let idx = pool.sample_indices(config, &mut rng)?;
            let x = gather(&pool.inputs, &idx);
            let y: Vec<usize> = idx.iter().map(|&i| pool.class_index(pool.labels[i])).collect();
            let head = WeightMatrix::stack(&[&current_rows(&direct, &delta), &background])?;
            let (loss, grads) = loss_and_gradients(&layers, &head, x.view(), &y, wd, &mask.layers);
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            correct += count_correct(&layers, &head, x.view(), &y);
            loss_sum += loss.as_f64() * idx.len() as f64;
            seen += idx.len();
            for ((layer, state), grad) in layers.iter_mut().zip(&mut layer_state).zip(&grads.layers) {
                if let Some((gw, gb)) = grad {
                    state.step(layer, gw.view(), gb.view(), lr, mom);
                }
            }
            let (gw, gb) = &grads.head;
            if train_rows {
                let target = match options.parameterization {
                    Parameterization::Delta => &mut delta,
                    Parameterization::Direct => &mut direct,
                };
                rows_state.step(target, gw.slice(ndarray::s![..rows, ..]), gb.slice(ndarray::s![..rows]), lr, mom);
            }
            bg_state.step(&mut background, gw.slice(ndarray::s![rows.., ..]), gb.slice(ndarray::s![rows..]), lr, mom);
        }
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
        });
    }

    let learned = match options.parameterization {
        Parameterization::Delta => delta,
        Parameterization::Direct => {
            let (bw, bb) = (base.weights(), base.bias());
            WeightMatrix::new(direct.weights() - bw, direct.bias() - bb)?
        }
    };
    let delta_b = learned.slice_rows(0, m);
    let head = pretrained.head();
    let transfer_a = match options.supervision {
        Supervision::BoxAnnotated => WeightMatrix::zeros(partition.num_held_out(), cols),
        Supervision::AllCategories => learned.slice_rows(m, rows),
    };
    let head = OutputHead::from_parts(
        head.fc_a().clone(),
        head.fc_b().clone(),
        delta_b.clone(),
        transfer_a,
        Some(background),
    )?;
    let network = NetworkParams::new(pretrained.input_dim(), layers, head, partition.clone())?;
    let labels: Vec<usize> = pool.labels.iter().map(|&l| pool.class_index(l)).collect();
    log.final_accuracy = supervised_accuracy(&network, pool, &labels, rows)?;
    Ok(FineTuned { network, delta_b, log })
}

fn supervised_accuracy<T: Scalar>(net: &NetworkParams<T>, pool: &RegionPool<T>, labels: &[usize], rows: usize) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let out = net.forward_batch(pool.inputs.view())?;
    let k = net.partition().k();
    let correct = out
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            // Supervised outputs only: the first `rows` categories and background.
            let mut scores: Vec<T> = row.iter().take(rows).copied().collect();
            scores.push(row[k]);
            argmax(ndarray::ArrayView1::from(&scores)) == l
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Central-difference check of [`loss_and_gradients`] on the network's current
/// outputs (every output row, background included when present). Samples
/// `coordinates` parameters, returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &[(Vec<T>, usize)],
    weight_decay: f64,
    coordinates: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Dataset("gradient check needs a nonempty batch".into()));
    }
    let dim = params.input_dim();
    let mut inputs = Array2::zeros((batch.len(), dim));
    for (mut row, (x, _)) in inputs.outer_iter_mut().zip(batch) {
        if x.len() != dim {
            return Err(ModelError::Shape {
                what: "gradient-check input".into(),
                expected: dim,
                found: x.len(),
            }
            .into());
        }
        row.assign(&ndarray::ArrayView1::from(x.as_slice()));
    }
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let layers = params.layers().to_vec();
    let head = params.head().effective();
    let trainable = vec![true; layers.len()];
    let wd = T::of(weight_decay);
    let (_, grads) = loss_and_gradients(&layers, &head, inputs.view(), &labels, wd, &trainable);

    // Block b < depth: layer b; block depth: head.
    let depth = layers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coordinates {
        let block = rng.gen_range(0..=depth);
        let target = if block < depth { &layers[block] } else { &head };
        let use_bias = rng.gen_bool(0.25);
        let (r, c) = (rng.gen_range(0..target.rows()), rng.gen_range(0..target.cols()));
        let analytic = match (block < depth, use_bias) {
            (true, false) => grads.layers[block].as_ref().unwrap().0[[r, c]],
            (true, true) => grads.layers[block].as_ref().unwrap().1[r],
            (false, false) => grads.head.0[[r, c]],
            (false, true) => grads.head.1[r],
        }
        .as_f64();
        let eval = |delta: f64| {
            let mut ls = layers.clone();
            let mut hd = head.clone();
            let m = if block < depth { &mut ls[block] } else { &mut hd };
            let (w, b) = m.parts_mut();
            if use_bias {
                b[r] += T::of(delta);
            } else {
                w[[r, c]] += T::of(delta);
            }
            loss_and_gradients(&ls, &hd, inputs.view(), &labels, wd, &trainable).0.as_f64()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

impl FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delta" => Ok(Self::Delta),
            "direct" => Ok(Self::Direct),
            _ => Err(format!("unknown parameterization `{s}` (delta|direct)")),
        }
    }
}
