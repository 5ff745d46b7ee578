//! False-positive taxonomy: localization errors, background confusion and
//! confusion with other categories, with cumulative top-N breakdowns.

use std::fmt;

use crate::bbox::{iou, BBox};
use crate::data::{Annotation, DatasetManifest};
use crate::detector::{rank_cmp, Detection};
use crate::eval::{ground_truth, match_detections, EvalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FpKind {
    Loc,
    Bg,
    Oth,
}

impl fmt::Display for FpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Loc => "Loc",
            Self::Bg => "BG",
            Self::Oth => "Oth",
        })
    }
}

/// Overlap band of the taxonomy. The upper edge of the localization band is
/// the evaluation IoU threshold used to decide true positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bands {
    /// Minimum overlap that counts as touching an object.
    pub low: f64,
}

impl Default for Bands {
    fn default() -> Self {
        Self { low: 0.1 }
    }
}

/// Classifies a detection already known to be a false positive. Same-category
/// overlap of at least `low` is a localization error, which includes
/// duplicates of an already matched object; otherwise overlap of at least
/// `low` with another category is `Oth`, and anything else is background.
pub fn classify_fp(detection: &Detection, objects: &[(usize, BBox)], bands: Bands) -> FpKind {
    let (same, other) = overlaps(detection, objects);
    if same >= bands.low {
        FpKind::Loc
    } else if other >= bands.low {
        FpKind::Oth
    } else {
        FpKind::Bg
    }
}

fn overlaps(detection: &Detection, objects: &[(usize, BBox)]) -> (f64, f64) {
    let mut same = 0.0f64;
    let mut other = 0.0f64;
    for (c, b) in objects {
        let o = iou(&detection.bbox, b);
        if *c == detection.category {
            same = same.max(o);
        } else {
            other = other.max(o);
        }
    }
    (same, other)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpRecord {
    pub detection: Detection,
    pub kind: FpKind,
    pub same_iou: f64,
    pub any_iou: f64,
}

/// Every false positive among `detections` for the categories accepted by
/// `keep`, in rank order over the whole corpus.
pub fn false_positives(
    detections: &[Detection],
    manifest: &DatasetManifest,
    eval_iou: f64,
    bands: Bands,
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<FpRecord>, EvalError> {
    let truth = ground_truth(manifest)?;
    let objects: std::collections::BTreeMap<&str, &[(usize, BBox)]> = manifest
        .records
        .iter()
        .map(|r| match &r.annotation {
            Annotation::Boxes(b) => (r.id.as_str(), b.as_slice()),
            Annotation::Label(_) => (r.id.as_str(), &[][..]),
        })
        .collect();
    let mut out = Vec::new();
    for (c, category_truth) in truth.iter().enumerate().filter(|(c, _)| keep(*c)) {
        let dets: Vec<Detection> = detections.iter().filter(|d| d.category == c).cloned().collect();
        let result = match_detections(&dets, category_truth, eval_iou);
        for (d, _) in result.detections.into_iter().zip(result.true_positive).filter(|(_, tp)| !tp) {
            let gts = objects
                .get(d.image_id.as_str())
                .copied()
                .ok_or_else(|| EvalError::UnknownImage(d.image_id.clone()))?;
            let (same, other) = overlaps(&d, gts);
            let kind = classify_fp(&d, gts, bands);
            out.push(FpRecord {
                detection: d,
                kind,
                same_iou: same,
                any_iou: same.max(other),
            });
        }
    }
    out.sort_by(|a, b| rank_cmp(&a.detection, &b.detection));
    Ok(out)
}

/// Kind counts among the top-N false positives for each cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownCurve {
    pub cutoffs: Vec<usize>,
    /// False positives actually available at each cutoff (clipped to the total).
    pub used: Vec<usize>,
    /// `(loc, bg, oth)` fractions, all zero where no false positives exist.
    pub fractions: Vec<(f64, f64, f64)>,
    pub counts: Vec<(usize, usize, usize)>,
}

impl BreakdownCurve {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cutoff\tused\tloc\tbg\toth\n");
        for i in 0..self.cutoffs.len() {
            let (l, b, o) = self.fractions[i];
            out.push_str(&format!("{}\t{}\t{l}\t{b}\t{o}\n", self.cutoffs[i], self.used[i]));
        }
        out
    }
}

/// `fps` must be in rank order, `cutoffs` ascending.
pub fn breakdown(fps: &[FpRecord], cutoffs: &[usize]) -> BreakdownCurve {
    if fps.is_empty() {
        log::warn!("no false positives; breakdown is all zero");
    }
    let mut curve = BreakdownCurve {
        cutoffs: cutoffs.to_vec(),
        used: Vec::new(),
        fractions: Vec::new(),
        counts: Vec::new(),
    };
    for &n in cutoffs {
        let used = n.min(fps.len());
        if used < n && !fps.is_empty() {
            log::info!("cutoff {n} exceeds the {} available false positives", fps.len());
        }
        let mut c = (0, 0, 0);
        for fp in &fps[..used] {
            match fp.kind {
                FpKind::Loc => c.0 += 1,
                FpKind::Bg => c.1 += 1,
                FpKind::Oth => c.2 += 1,
            }
        }
        let f = if used == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let u = used as f64;
            (c.0 as f64 / u, c.1 as f64 / u, c.2 as f64 / u)
        };
        curve.used.push(used);
        curve.counts.push(c);
        curve.fractions.push(f);
    }
    curve
}

/// Cutoffs `{25, 50, 100, 200, 400}` scaled by `scale` (at least 1 each).
pub fn default_cutoffs(scale: f64) -> Vec<usize> {
    let mut v: Vec<usize> = [25.0, 50.0, 100.0, 200.0, 400.0].iter().map(|c| ((c * scale).round() as usize).max(1)).collect();
    v.dedup();
    v
}

/// Side-by-side table of two curves with identical cutoffs.
pub fn comparison_table(baseline: &BreakdownCurve, adapted: &BreakdownCurve) -> String {
    let mut out = format!(
        "{:>7} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}\n",
        "top-N", "Loc", "BG", "Oth", "Loc", "BG", "Oth"
    );
    out.push_str(&format!("{:>7} | {:^20} | {:^20}\n", "", "classification", "adapted"));
    for (i, n) in baseline.cutoffs.iter().enumerate() {
        let (a, b) = (baseline.fractions[i], adapted.fractions.get(i).copied().unwrap_or_default());
        out.push_str(&format!(
            "{n:>7} | {:>6.3} {:>6.3} {:>6.3} | {:>6.3} {:>6.3} {:>6.3}\n",
            a.0, a.1, a.2, b.0, b.1, b.2
        ));
    }
    out
}
