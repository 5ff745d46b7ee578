//! Detection matching, average precision, the mAP report and a paired t-test.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bbox::{iou, BBox};
use crate::data::{Annotation, DatasetManifest};
use crate::detector::{sort_detections, Detection};
use crate::model::CategoryPartition;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection refers to image `{0}`, which is not in the evaluation manifest")]
    UnknownImage(String),
    #[error("detection category {0} outside the partition")]
    UnknownCategory(usize),
    #[error("evaluation manifest record `{0}` has no boxes")]
    NotDetectionManifest(String),
    #[error("t-test needs two samples of equal length >= 2, got {0} and {1}")]
    TTestShape(usize, usize),
    #[error("t statistic undefined: the differences have zero variance")]
    ZeroVariance,
}

/// Ground-truth boxes per image for one category.
pub type CategoryTruth = BTreeMap<String, Vec<BBox>>;

/// Outcome of matching one category's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detections in rank order.
    pub detections: Vec<Detection>,
    /// True positive flag for each ranked detection.
    pub true_positive: Vec<bool>,
    /// Matched flags per image, parallel to the ground-truth lists.
    pub matched: BTreeMap<String, Vec<bool>>,
}

/// Greedy matching in rank order: a detection takes the unmatched ground-truth
/// box with the highest IoU at or above `threshold`, otherwise it is a false
/// positive (so duplicates are false positives).
pub fn match_detections(detections: &[Detection], truth: &CategoryTruth, threshold: f64) -> MatchResult {
    let mut ranked = detections.to_vec();
    sort_detections(&mut ranked);
    let mut matched: BTreeMap<String, Vec<bool>> = truth.iter().map(|(id, b)| (id.clone(), vec![false; b.len()])).collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for d in &ranked {
        let mut best: Option<(f64, usize)> = None;
        if let (Some(gts), Some(used)) = (truth.get(&d.image_id), matched.get(&d.image_id)) {
            for (g, gt) in gts.iter().enumerate() {
                let overlap = iou(&d.bbox, gt);
                if !used[g] && overlap >= threshold && best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, g));
                }
            }
        }
        match best {
            Some((_, g)) => {
                matched.get_mut(&d.image_id).expect("image present")[g] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    MatchResult {
        detections: ranked,
        true_positive: flags,
        matched,
    }
}

/// All-point interpolated AP of ranked TP/FP flags against `num_gt` boxes:
/// precision made non-increasing from the right, integrated over recall.
/// Returns 0 when there is no ground truth.
pub fn average_precision(true_positive: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        log::warn!("category without ground truth; AP set to 0");
        return 0.0;
    }
    // Envelope precision at each rank as a fraction `tp / rank`, then summed
    // over the ranks where recall rises (each step is exactly 1 / num_gt).
    let mut tp = 0u64;
    let mut precision: Vec<(u64, u64)> = Vec::with_capacity(true_positive.len());
    for (i, &hit) in true_positive.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push((tp, i as u64 + 1));
    }
    let mut envelope = (0u64, 1u64);
    for p in precision.iter_mut().rev() {
        if p.0 as u128 * envelope.1 as u128 > envelope.0 as u128 * p.1 as u128 {
            envelope = *p;
        }
        *p = envelope;
    }
    let terms = precision.iter().zip(true_positive).filter(|(_, &hit)| hit).map(|(p, _)| *p);
    exact_mean(terms, num_gt as u64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `sum(n / d) / count`, exact with one final rounding while the running
/// fraction fits in `u128`, plain floating point afterwards.
fn exact_mean(terms: impl Iterator<Item = (u64, u64)>, count: u64) -> f64 {
    let (mut num, mut den) = (0u128, 1u128);
    let mut overflow = 0.0f64;
    let mut exact = true;
    for (n, d) in terms {
        if exact {
            let (n, d) = (n as u128, d as u128);
            let g = gcd(den, d);
            let next = (den / g)
                .checked_mul(d)
                .and_then(|l| num.checked_mul(l / den).and_then(|a| n.checked_mul(l / d).and_then(|b| a.checked_add(b))).map(|s| (s, l)));
            match next {
                Some((s, l)) => {
                    let r = gcd(s, l).max(1);
                    (num, den) = (s / r, l / r);
                    continue;
                }
                None => exact = false,
            }
        }
        overflow += n as f64 / d as f64;
    }
    match den.checked_mul(count as u128) {
        Some(total) if exact && num < (1u128 << 53) && total < (1u128 << 53) => num as f64 / total as f64,
        _ => (num as f64 / den as f64 + overflow) / count as f64,
    }
}

/// Per-category AP with the three mAP columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub categories: Vec<String>,
    pub m: usize,
    pub ap: Vec<f64>,
    /// Mean over the box-annotated categories.
    pub map_trained: f64,
    /// Mean over the held-out categories.
    pub map_held_out: f64,
    pub map_all: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    pub fn from_ap(partition: &CategoryPartition, ap: Vec<f64>, num_images: usize, num_gt: usize, num_detections: usize) -> Self {
        let m = partition.m();
        Self {
            categories: partition.names().to_vec(),
            m,
            map_trained: mean(&ap[..m]),
            map_held_out: mean(&ap[m..]),
            map_all: mean(&ap),
            ap,
            num_images,
            num_gt,
            num_detections,
        }
    }

    pub fn held_out_ap(&self) -> &[f64] {
        &self.ap[self.m..]
    }

    /// `category<TAB>set<TAB>ap` rows, then the three means and counts.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("category\tset\tap\n");
        for (i, (name, ap)) in self.categories.iter().zip(&self.ap).enumerate() {
            let set = if i < self.m { "B" } else { "A" };
            out.push_str(&format!("{name}\t{set}\t{ap}\n"));
        }
        out.push_str(&format!("mAP_trained\t-\t{}\n", self.map_trained));
        out.push_str(&format!("mAP_held_out\t-\t{}\n", self.map_held_out));
        out.push_str(&format!("mAP_all\t-\t{}\n", self.map_all));
        out.push_str(&format!(
            "# images={} gt_boxes={} detections={}\n",
            self.num_images, self.num_gt, self.num_detections
        ));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>12} {:>12} {:>10}\n{:<16} {:>12.2} {:>12.2} {:>10.2}\n",
            "",
            "mAP trained",
            "mAP held-out",
            "mAP all",
            "",
            100.0 * self.map_trained,
            100.0 * self.map_held_out,
            100.0 * self.map_all
        );
        out.push('\n');
        for (i, (name, ap)) in self.categories.iter().zip(&self.ap).enumerate() {
            let set = if i < self.m { "B" } else { "A" };
            out.push_str(&format!("{name:<16} {set} {:>8.2}\n", 100.0 * ap));
        }
        out
    }
}

/// Ground truth of a detection-style manifest, grouped by category.
pub fn ground_truth(manifest: &DatasetManifest) -> Result<Vec<CategoryTruth>, EvalError> {
    let mut truth: Vec<CategoryTruth> = vec![BTreeMap::new(); manifest.partition.k()];
    for record in &manifest.records {
        let boxes = match &record.annotation {
            Annotation::Boxes(b) => b,
            Annotation::Label(_) => return Err(EvalError::NotDetectionManifest(record.id.clone())),
        };
        for per_category in truth.iter_mut() {
            per_category.insert(record.id.clone(), Vec::new());
        }
        for (c, b) in boxes {
            truth[*c].get_mut(&record.id).expect("inserted").push(*b);
        }
    }
    Ok(truth)
}

/// Matches and scores every category against the manifest.
pub fn evaluate(detections: &[Detection], manifest: &DatasetManifest, iou_threshold: f64) -> Result<EvalReport, EvalError> {
    let partition = &manifest.partition;
    let truth = ground_truth(manifest)?;
    let mut by_category: Vec<Vec<Detection>> = vec![Vec::new(); partition.k()];
    for d in detections {
        if d.category >= partition.k() {
            return Err(EvalError::UnknownCategory(d.category));
        }
        if !truth[d.category].contains_key(&d.image_id) {
            return Err(EvalError::UnknownImage(d.image_id.clone()));
        }
        by_category[d.category].push(d.clone());
    }
    let mut ap = Vec::with_capacity(partition.k());
    let mut num_gt = 0;
    for (c, dets) in by_category.iter().enumerate() {
        let n: usize = truth[c].values().map(Vec::len).sum();
        num_gt += n;
        let result = match_detections(dets, &truth[c], iou_threshold);
        ap.push(average_precision(&result.true_positive, n));
    }
    Ok(EvalReport::from_ap(partition, ap, manifest.records.len(), num_gt, detections.len()))
}

/// Paired t-test on `b - a`. Returns `(t, two-sided p)` with `n - 1` degrees
/// of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::TTestShape(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 1e-300) {
        return Err(EvalError::ZeroVariance);
    }
    let t = mu / (var / n).sqrt();
    Ok((t, student_t_two_sided(t, n - 1.0)))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9), for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the continued fraction (modified Lentz).
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coefficient in [even, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coefficient * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coefficient / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}
