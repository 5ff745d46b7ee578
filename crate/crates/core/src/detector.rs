//! Region proposals, region scoring and non-maximum suppression.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::bbox::{iou, BBox};
use crate::config::{ConfigError, KeyValues};
use crate::data::{warp_region_into, DataError};
use crate::image::GrayImage;
use crate::model::{CategoryPartition, HeadState, ModelError, NetworkParams};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("{source_name} line {line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("invalid proposal configuration: {0}")]
    Config(String),
    #[error("network must be in {expected} state to score regions this way")]
    State { expected: &'static str },
    #[error("cannot access {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
}

/// Multi-scale sliding-window proposals, or boxes read from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    /// Box side lengths in pixels (the geometric mean of width and height).
    pub scales: Vec<u32>,
    /// Window step as a fraction of the box side.
    pub stride_fraction: f64,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            scales: vec![14, 19, 25, 33],
            stride_fraction: 0.25,
            aspect_ratios: vec![1.0],
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self, image_size: u32) -> Result<(), DetectError> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || s > image_size) {
            return Err(DetectError::Config(format!(
                "scales must be nonempty and within 1..={image_size}, got {:?}",
                self.scales
            )));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(DetectError::Config(format!(
                "stride fraction must lie in (0, 1], got {}",
                self.stride_fraction
            )));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(DetectError::Config("aspect ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), DetectError> {
        kv.read_list("proposal_scales", &mut self.scales)?;
        kv.read("proposal_stride", &mut self.stride_fraction)?;
        kv.read_list("proposal_aspects", &mut self.aspect_ratios)?;
        Ok(())
    }

    pub fn write_to(&self, kv: &mut KeyValues) {
        let join = |v: Vec<String>| v.join(",");
        kv.set("proposal_scales", join(self.scales.iter().map(u32::to_string).collect()));
        kv.set("proposal_stride", self.stride_fraction.to_string());
        kv.set("proposal_aspects", join(self.aspect_ratios.iter().map(f64::to_string).collect()));
    }

    pub const KEYS: &'static [&'static str] = &["proposal_scales", "proposal_stride", "proposal_aspects"];
}

fn positions(extent: u32, side: u32, stride: u32) -> Vec<u32> {
    let last = extent - side;
    let mut out: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Sliding-window grid over a `width x height` image, deduplicated and sorted.
/// Boxes larger than the image are clipped to it.
pub fn propose_regions(width: u32, height: u32, config: &ProposalConfig) -> Vec<BBox> {
    let mut boxes = Vec::new();
    for &scale in &config.scales {
        for &aspect in &config.aspect_ratios {
            let bw = ((scale as f64 * aspect.sqrt()).round() as u32).clamp(1, width);
            let bh = ((scale as f64 / aspect.sqrt()).round() as u32).clamp(1, height);
            let sx = ((config.stride_fraction * bw as f64).round() as u32).max(1);
            let sy = ((config.stride_fraction * bh as f64).round() as u32).max(1);
            for y in positions(height, bh, sy) {
                for x in positions(width, bw, sx) {
                    boxes.push(BBox::new(x, y, x + bw, y + bh).expect("positive side"));
                }
            }
        }
    }
    boxes.sort();
    boxes.dedup();
    boxes
}

/// Parses a proposal file: `image_id<TAB>x1,y1,x2,y2` per line.
pub fn parse_proposals(text: &str, source_name: &str) -> Result<BTreeMap<String, Vec<BBox>>, DetectError> {
    let mut map: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| DetectError::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            reason,
        };
        let (id, b) = line.split_once('\t').ok_or_else(|| err("expected `image_id<TAB>x1,y1,x2,y2`".into()))?;
        let bbox: BBox = b.trim().parse().map_err(|e| err(format!("{e}")))?;
        map.entry(id.to_string()).or_default().push(bbox);
    }
    Ok(map)
}

pub fn render_proposals(proposals: &BTreeMap<String, Vec<BBox>>) -> String {
    let mut out = String::new();
    for (id, boxes) in proposals {
        for b in boxes {
            out.push_str(&format!("{id}\t{b}\n"));
        }
    }
    out
}

pub fn load_proposals(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>, DetectError> {
    let text = std::fs::read_to_string(path).map_err(|e| DetectError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_proposals(&text, &path.display().to_string())
}

/// Checks externally supplied proposals against the image bounds.
pub fn check_proposals(boxes: &[BBox], image: &GrayImage, image_id: &str) -> Result<(), DetectError> {
    match boxes.iter().find(|b| !b.fits(image.width(), image.height())) {
        Some(b) => Err(DetectError::Config(format!(
            "proposal {b} lies outside {image_id} ({}x{})",
            image.width(),
            image.height()
        ))),
        None => Ok(()),
    }
}

/// How a region score is derived from the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// `output_i - output_background` on raw affine outputs.
    #[default]
    Logit,
    /// The same difference on softmax probabilities.
    Softmax,
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logit" => Ok(Self::Logit),
            "softmax" => Ok(Self::Softmax),
            _ => Err(format!("unknown score mode `{s}` (logit|softmax)")),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Logit => "logit",
            Self::Softmax => "softmax",
        })
    }
}

/// Warps every box of `image` into one row of the returned matrix.
pub fn warp_regions<T: Scalar>(image: &GrayImage, boxes: &[BBox], context_pad: u32, side: usize) -> Result<Array2<T>, DetectError> {
    let mut inputs = Array2::zeros((boxes.len(), side * side));
    for (mut row, b) in inputs.outer_iter_mut().zip(boxes) {
        warp_region_into(image, b, context_pad, side, row.as_slice_mut().expect("contiguous"))?;
    }
    Ok(inputs)
}

fn to_scores<T: Scalar>(outputs: Array2<T>, k: usize, background: bool, mode: ScoreMode) -> Array2<f64> {
    let mut scores = Array2::zeros((outputs.nrows(), k));
    for (mut dst, src) in scores.outer_iter_mut().zip(outputs.outer_iter()) {
        let src: Vec<f64> = src.iter().map(|v| v.as_f64()).collect();
        let values = match mode {
            ScoreMode::Logit => src,
            ScoreMode::Softmax => {
                let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let exp: Vec<f64> = src.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / z).collect()
            }
        };
        let bg = if background { values[k] } else { 0.0 };
        for (d, v) in dst.iter_mut().zip(&values[..k]) {
            *d = v - bg;
        }
    }
    scores
}

/// Detection scores of pre-warped regions, one row per region and one column
/// per category: category output minus background output.
pub fn score_inputs<T: Scalar>(net: &NetworkParams<T>, inputs: ArrayView2<'_, T>, mode: ScoreMode) -> Result<Array2<f64>, DetectError> {
    if net.state() != HeadState::Detector {
        return Err(DetectError::State { expected: "detector" });
    }
    let outputs = net.forward_batch(inputs)?;
    Ok(to_scores(outputs, net.partition().k(), true, mode))
}

/// Scores from a classification-state network with an implicit background
/// output of zero.
pub fn baseline_score_inputs<T: Scalar>(net: &NetworkParams<T>, inputs: ArrayView2<'_, T>, mode: ScoreMode) -> Result<Array2<f64>, DetectError> {
    if net.state() != HeadState::Classification {
        return Err(DetectError::State { expected: "classification" });
    }
    let outputs = net.forward_batch(inputs)?;
    Ok(to_scores(outputs, net.partition().k(), false, mode))
}

/// Scores pre-warped regions with whichever rule fits the network's state.
pub fn score_by_state<T: Scalar>(net: &NetworkParams<T>, inputs: ArrayView2<'_, T>, mode: ScoreMode) -> Result<Array2<f64>, DetectError> {
    match net.state() {
        HeadState::Detector => score_inputs(net, inputs, mode),
        HeadState::Classification => baseline_score_inputs(net, inputs, mode),
    }
}

/// Warps and scores `boxes` with a detector-state network.
pub fn score_regions<T: Scalar>(
    net: &NetworkParams<T>,
    image: &GrayImage,
    boxes: &[BBox],
    context_pad: u32,
    mode: ScoreMode,
) -> Result<Array2<f64>, DetectError> {
    let side = (net.input_dim() as f64).sqrt().round() as usize;
    let inputs = warp_regions::<T>(image, boxes, context_pad, side)?;
    score_inputs(net, inputs.view(), mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Rank order: score descending, then `x1`, `y1` ascending; the remaining
/// fields only make the order total.
pub fn rank_cmp(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.cmp(&b.bbox.x1))
        .then(a.bbox.y1.cmp(&b.bbox.y1))
        .then(a.bbox.x2.cmp(&b.bbox.x2))
        .then(a.bbox.y2.cmp(&b.bbox.y2))
        .then(a.category.cmp(&b.category))
        .then(a.image_id.cmp(&b.image_id))
}

/// Sorts by score descending, then `x1`, `y1` ascending.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(rank_cmp);
}

fn greedy(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    sort_detections(&mut dets);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Greedy suppression within one category and one image: a box survives iff
/// its IoU with every higher-ranked survivor is below `threshold`.
pub fn nms(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    debug_assert!(dets.windows(2).all(|w| w[0].category == w[1].category && w[0].image_id == w[1].image_id));
    greedy(dets, threshold)
}

/// The same greedy rule ignoring category, applied per image.
pub fn cross_category_nms(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id.clone()).or_default().push(d);
    }
    let mut out: Vec<Detection> = by_image.into_values().flat_map(|d| greedy(d, threshold)).collect();
    sort_detections(&mut out);
    out
}

/// Post-processing settings for [`detect_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub proposals: ProposalConfig,
    pub context_pad: u32,
    pub nms_iou: f64,
    /// Detections scoring below this are dropped.
    pub score_floor: f64,
    pub score_mode: ScoreMode,
    /// Extra suppression across categories at this IoU, if set.
    pub cross_category_iou: Option<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            proposals: ProposalConfig::default(),
            context_pad: 2,
            nms_iou: 0.3,
            score_floor: f64::NEG_INFINITY,
            score_mode: ScoreMode::Logit,
            cross_category_iou: None,
        }
    }
}

/// Per-category NMS over a score matrix, floor applied, sorted by rank.
pub fn detections_from_scores(image_id: &str, boxes: &[BBox], scores: &Array2<f64>, config: &DetectConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for (category, column) in scores.columns().into_iter().enumerate() {
        let candidates: Vec<Detection> = boxes
            .iter()
            .zip(column.iter())
            .filter(|(_, &s)| s >= config.score_floor)
            .map(|(b, &s)| Detection {
                image_id: image_id.to_string(),
                category,
                score: s,
                bbox: *b,
            })
            .collect();
        out.extend(nms(candidates, config.nms_iou));
    }
    match config.cross_category_iou {
        Some(t) => cross_category_nms(out, t),
        None => {
            sort_detections(&mut out);
            out
        }
    }
}

/// Proposes, scores, suppresses. Uses the grid unless `external` boxes are given.
pub fn detect_image<T: Scalar>(
    net: &NetworkParams<T>,
    image_id: &str,
    image: &GrayImage,
    config: &DetectConfig,
    external: Option<&[BBox]>,
) -> Result<Vec<Detection>, DetectError> {
    let boxes = match external {
        Some(b) => {
            check_proposals(b, image, image_id)?;
            b.to_vec()
        }
        None => propose_regions(image.width(), image.height(), &config.proposals),
    };
    let scores = score_regions(net, image, &boxes, config.context_pad, config.score_mode)?;
    Ok(detections_from_scores(image_id, &boxes, &scores, config))
}

pub fn render_detections(dets: &[Detection], partition: &CategoryPartition) -> String {
    dets.iter()
        .map(|d| format!("{}\t{}\t{}\t{}\n", d.image_id, partition.name(d.category), d.score, d.bbox))
        .collect()
}

/// Parses `image_id<TAB>category<TAB>score<TAB>x1,y1,x2,y2` lines.
pub fn parse_detections(text: &str, partition: &CategoryPartition, source_name: &str) -> Result<Vec<Detection>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| DetectError::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let category = partition
            .index_of(fields[1])
            .ok_or_else(|| err(format!("unknown category `{}`", fields[1])))?;
        let score: f64 = fields[2].parse().map_err(|_| err(format!("bad score `{}`", fields[2])))?;
        let bbox: BBox = fields[3].parse().map_err(|e| err(format!("{e}")))?;
        out.push(Detection {
            image_id: fields[0].to_string(),
            category,
            score,
            bbox,
        });
    }
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[Detection], partition: &CategoryPartition) -> Result<(), DetectError> {
    write_text(path, &render_detections(dets, partition))
}

pub fn load_detections(path: &Path, partition: &CategoryPartition) -> Result<Vec<Detection>, DetectError> {
    let text = std::fs::read_to_string(path).map_err(|e| DetectError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_detections(&text, partition, &path.display().to_string())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), DetectError> {
    let io = |e: std::io::Error| DetectError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OutputHead, WeightMatrix};
    use ndarray::{array, Array1};

    fn det(category: usize, score: f64, b: (u32, u32, u32, u32)) -> Detection {
        Detection {
            image_id: "img".into(),
            category,
            score,
            bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
        }
    }

    fn one(scale: u32, stride: f64) -> ProposalConfig {
        ProposalConfig {
            scales: vec![scale],
            stride_fraction: stride,
            aspect_ratios: vec![1.0],
        }
    }

    #[test]
    fn grid_counts() {
        assert_eq!(propose_regions(32, 32, &one(32, 1.0)), vec![BBox::new(0, 0, 32, 32).unwrap()]);
        assert_eq!(propose_regions(64, 64, &one(32, 0.5)).len(), 9);
        // (64 - 24) / 8 = 5 steps: 6 positions per axis.
        assert_eq!(propose_regions(64, 64, &one(24, 1.0 / 3.0)).len(), 36);
        // A stride that does not divide the range still reaches the far edge.
        let boxes = propose_regions(40, 40, &one(16, 0.5));
        assert!(boxes.iter().any(|b| b.x2 == 40 && b.y2 == 40));
        assert!(boxes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn proposal_config_bounds() {
        assert!(one(65, 0.5).validate(64).is_err());
        assert!(one(16, 0.0).validate(64).is_err());
        assert!(one(16, 1.0).validate(64).is_ok());
    }

    #[test]
    fn proposal_file_round_trip_and_errors() {
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![BBox::new(0, 0, 4, 4).unwrap(), BBox::new(1, 2, 3, 4).unwrap()]);
        map.insert("b".to_string(), vec![BBox::new(5, 5, 9, 9).unwrap()]);
        let text = render_proposals(&map);
        assert_eq!(parse_proposals(&text, "p").unwrap(), map);
        let err = parse_proposals("a\t0,0,4,4\nb\t3,3,1,1\n", "p.tsv").unwrap_err();
        assert!(matches!(err, DetectError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn nms_hand_cases() {
        let disjoint = vec![det(0, 0.5, (0, 0, 5, 5)), det(0, 0.7, (10, 10, 15, 15)), det(0, 0.6, (20, 0, 25, 5))];
        assert_eq!(nms(disjoint, 0.3).len(), 3);
        let same = vec![det(0, 0.8, (0, 0, 10, 10)), det(0, 0.9, (0, 0, 10, 10))];
        let kept = nms(same, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let pair = || vec![det(0, 0.9, (0, 0, 10, 10)), det(0, 0.8, (0, 3, 10, 13))];
        assert_eq!(nms(pair(), 0.5).len(), 1);
        assert_eq!(nms(pair(), 0.6).len(), 2);
        assert!(nms(vec![], 0.3).is_empty());
    }

    #[test]
    fn exact_ties_order_by_position() {
        let kept = nms(vec![det(0, 0.5, (10, 0, 20, 10)), det(0, 0.5, (0, 0, 10, 10))], 0.3);
        assert_eq!(kept[0].bbox.x1, 0);
        assert_eq!(kept[1].bbox.x1, 10);
    }

    #[test]
    fn cross_category_cases() {
        assert_eq!(cross_category_nms(vec![det(1, 0.2, (0, 0, 5, 5))], 0.5).len(), 1);
        let kept = cross_category_nms(vec![det(5, 0.4, (0, 0, 10, 10)), det(3, 0.9, (0, 0, 10, 10))], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].category, 3);
        // Different images never suppress each other.
        let mut other = det(5, 0.4, (0, 0, 10, 10));
        other.image_id = "img2".into();
        assert_eq!(cross_category_nms(vec![other, det(3, 0.9, (0, 0, 10, 10))], 0.5).len(), 2);
    }

    fn tiny_net(background: bool) -> NetworkParams<f64> {
        // One hidden unit averaging the 4 inputs, a pass-through unit, 3 categories, m = 1.
        let partition = CategoryPartition::new(vec!["a".into(), "b".into(), "c".into()], 1).unwrap();
        let layer = WeightMatrix::new(array![[0.25, 0.25, 0.25, 0.25]], array![0.1]).unwrap();
        let classifier = WeightMatrix::new(array![[2.0], [-1.0], [0.5]], array![0.0, 0.3, -0.2]).unwrap();
        let mut head = OutputHead::from_classifier(&classifier, 1).unwrap();
        if background {
            head = head.into_detector().unwrap();
            *head.background_mut().unwrap() = WeightMatrix::new(array![[1.5]], Array1::from(vec![0.4])).unwrap();
        }
        let pass = WeightMatrix::new(array![[1.0]], array![0.0]).unwrap();
        NetworkParams::new(4, vec![layer, pass], head, partition).unwrap()
    }

    #[test]
    fn scores_match_hand_arithmetic() {
        let img = GrayImage::filled(6, 6, 51); // intensity 0.2
        let net = tiny_net(true);
        let b = [BBox::new(0, 0, 6, 6).unwrap()];
        let s = score_regions(&net, &img, &b, 0, ScoreMode::Logit).unwrap();
        // h = 0.2 + 0.1 = 0.3; background = 1.5 * 0.3 + 0.4 = 0.85.
        let h = 0.3;
        let expect = [2.0 * h - 0.85, -h + 0.3 - 0.85, 0.5 * h - 0.2 - 0.85];
        for (got, want) in s.row(0).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // The baseline uses the classification state with implicit zero background.
        let base = baseline_score_inputs(&tiny_net(false), Array2::from_elem((1, 4), 0.2).view(), ScoreMode::Logit).unwrap();
        assert!((base[[0, 0]] - 2.0 * h).abs() < 1e-12);
        assert!(score_inputs(&tiny_net(false), Array2::zeros((1, 4)).view(), ScoreMode::Logit).is_err());
        assert!(baseline_score_inputs(&net, Array2::zeros((1, 4)).view(), ScoreMode::Logit).is_err());
    }

    #[test]
    fn zero_background_gives_raw_scores_and_softmax_bounds() {
        let net = tiny_net(false).into_detector().unwrap();
        let x = Array2::from_elem((2, 4), 0.7);
        let raw = net.forward_batch(x.view()).unwrap();
        let s = score_inputs(&net, x.view(), ScoreMode::Logit).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(s[[r, c]], raw[[r, c]]);
            }
        }
        let p = score_inputs(&net, x.view(), ScoreMode::Softmax).unwrap();
        assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn detect_image_outputs_are_proposals() {
        let net = tiny_net(true);
        let mut img = GrayImage::filled(16, 16, 20);
        for y in 4..10 {
            for x in 4..10 {
                img.set(x, y, 230);
            }
        }
        let config = DetectConfig {
            proposals: ProposalConfig {
                scales: vec![2],
                stride_fraction: 0.5,
                aspect_ratios: vec![1.0],
            },
            context_pad: 0,
            ..DetectConfig::default()
        };
        let boxes = propose_regions(16, 16, &config.proposals);
        let a = detect_image(&net, "x", &img, &config, None).unwrap();
        let b = detect_image(&net, "x", &img, &config, None).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= boxes.len() * 3);
        assert!(a.iter().all(|d| boxes.contains(&d.bbox)));
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        let high = DetectConfig { score_floor: 1e9, ..config.clone() };
        assert!(detect_image(&net, "x", &img, &high, None).unwrap().is_empty());
        let outside = [BBox::new(0, 0, 17, 4).unwrap()];
        assert!(detect_image(&net, "x", &img, &config, Some(&outside)).is_err());
    }

    #[test]
    fn detection_file_round_trip() {
        let p = CategoryPartition::new(vec!["a".into(), "b".into(), "c".into()], 1).unwrap();
        let dets = vec![det(2, 0.1 + 0.2, (1, 2, 3, 4)), det(0, -1e-300, (0, 0, 9, 9))];
        let text = render_detections(&dets, &p);
        assert_eq!(parse_detections(&text, &p, "d").unwrap(), dets);
        let err = parse_detections("img\tzebra\t0.5\t0,0,1,1\n", &p, "d.tsv").unwrap_err();
        assert!(matches!(err, DetectError::Parse { line: 1, .. }));
    }
}
