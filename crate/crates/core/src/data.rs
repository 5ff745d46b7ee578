//! Synthetic glyph datasets and region warping.
//!
//! Four splits are produced from one seed:
//!
//! * `classification`: one large labelled glyph per image plus small unlabelled
//!   distractors, so the single image-level label is deliberately weak;
//! * `detection`: boxes for the box-annotated categories (set B) only;
//! * `detection_all`: the same protocol with boxes for every category, used to
//!   train the full-detection upper bound;
//! * `eval`: boxes for every category, about two objects per image.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bbox::{BBox, BoxError};
use crate::config::{ConfigError, KeyValues};
use crate::image::{GrayImage, ImageError};
use crate::model::{CategoryPartition, ModelError};
use crate::scalar::Scalar;

/// Procedural glyph vocabulary. A run with K categories uses the first K
/// entries, sorted by name. With the default K = 8, m = 4 every held-out glyph
/// has a look-alike among the box-annotated ones (disc/ring, frame/square,
/// bars/stripes, cross/tee).
pub const GLYPHS: [&str; 12] = [
    "bars", "cross", "disc", "frame", "ring", "square", "stripes", "tee", "checker", "diamond",
    "ell", "triangle",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("K = {k} exceeds the glyph vocabulary (maximum supported K is {max})")]
    TooManyCategories { k: usize, max: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Partition(#[from] ModelError),
    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("region {0} is empty after clipping to the image")]
    EmptyRegion(BBox),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Whether pixel-centre coordinates `(u, v)` in the unit square are inside `glyph`.
pub fn glyph_mask(glyph: &str, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match glyph {
        "bars" => !(0.3..0.7).contains(&v),
        "checker" => ((3.0 * u).floor() as i32 + (3.0 * v).floor() as i32) % 2 == 0,
        "cross" => du.abs() < 1.0 / 6.0 || dv.abs() < 1.0 / 6.0,
        "diamond" => du.abs() + dv.abs() <= 0.5,
        "disc" => du * du + dv * dv <= 0.25,
        "ell" => u < 0.35 || v >= 0.65,
        "frame" => !(0.2..0.8).contains(&u) || !(0.2..0.8).contains(&v),
        "ring" => (0.09..=0.25).contains(&(du * du + dv * dv)),
        "square" => true,
        "stripes" => (5.0 * u).floor() as i32 % 2 == 0,
        "tee" => v < 0.35 || du.abs() < 0.175,
        "triangle" => v >= (2.0 * u - 1.0).abs(),
        other => unreachable!("glyph {other} has no mask"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub k: usize,
    pub m: usize,
    pub image_size: u32,
    pub classification_per_class: usize,
    pub detection_per_class: usize,
    pub eval_per_class: usize,
    /// Maximum number of unlabelled distractors in a classification image.
    pub clutter: usize,
    /// Maximum number of extra objects added next to the primary one in
    /// detection and eval images; the mean object count is `1 + extra_objects / 2`.
    pub extra_objects: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 8,
            m: 4,
            image_size: 64,
            classification_per_class: 150,
            detection_per_class: 48,
            eval_per_class: 25,
            clutter: 3,
            extra_objects: 2,
            seed: 7,
        }
    }
}

const GEN_KEYS: &[&str] = &[
    "k",
    "m",
    "image_size",
    "classification_per_class",
    "detection_per_class",
    "eval_per_class",
    "clutter",
    "extra_objects",
    "seed",
];

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.k > GLYPHS.len() {
            return Err(DataError::TooManyCategories {
                k: self.k,
                max: GLYPHS.len(),
            });
        }
        if self.k < 4 {
            return Err(DataError::Config(format!("need K >= 4, got {}", self.k)));
        }
        if self.m == 0 || self.m >= self.k {
            return Err(DataError::Config(format!("need 0 < m < K, got m = {}", self.m)));
        }
        if self.classification_per_class < 20 {
            return Err(DataError::Config(
                "classification_per_class must be at least 20".into(),
            ));
        }
        if self.detection_per_class == 0 || self.eval_per_class == 0 {
            return Err(DataError::Config("per-class image counts must be positive".into()));
        }
        if self.image_size < 32 {
            return Err(DataError::Config("image_size must be at least 32".into()));
        }
        Ok(())
    }

    /// Applies `key = value` settings on top of `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), DataError> {
        kv.read("k", &mut self.k)?;
        kv.read("m", &mut self.m)?;
        kv.read("image_size", &mut self.image_size)?;
        kv.read("classification_per_class", &mut self.classification_per_class)?;
        kv.read("detection_per_class", &mut self.detection_per_class)?;
        kv.read("eval_per_class", &mut self.eval_per_class)?;
        kv.read("clutter", &mut self.clutter)?;
        kv.read("extra_objects", &mut self.extra_objects)?;
        kv.read("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        GEN_KEYS
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("k", self.k.to_string());
        kv.set("m", self.m.to_string());
        kv.set("image_size", self.image_size.to_string());
        kv.set("classification_per_class", self.classification_per_class.to_string());
        kv.set("detection_per_class", self.detection_per_class.to_string());
        kv.set("eval_per_class", self.eval_per_class.to_string());
        kv.set("clutter", self.clutter.to_string());
        kv.set("extra_objects", self.extra_objects.to_string());
        kv.set("seed", self.seed.to_string());
        kv
    }

    pub fn partition(&self) -> Result<CategoryPartition, DataError> {
        self.validate()?;
        let names = GLYPHS[..self.k].iter().map(|s| s.to_string()).collect();
        Ok(CategoryPartition::sorted(names, self.m)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Classification,
    Detection,
    DetectionAll,
    Eval,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Classification,
        SplitKind::Detection,
        SplitKind::DetectionAll,
        SplitKind::Eval,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Classification => "classification",
            SplitKind::Detection => "detection",
            SplitKind::DetectionAll => "detection_all",
            SplitKind::Eval => "eval",
        }
    }

    fn id_prefix(&self) -> &'static str {
        match self {
            SplitKind::Classification => "cls",
            SplitKind::Detection => "det",
            SplitKind::DetectionAll => "dal",
            SplitKind::Eval => "evl",
        }
    }

    fn seed_tag(&self) -> u64 {
        match self {
            SplitKind::Classification => 1,
            SplitKind::Detection => 2,
            SplitKind::DetectionAll => 3,
            SplitKind::Eval => 4,
        }
    }

    pub fn manifest_file(&self) -> String {
        format!("{}.tsv", self.as_str())
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Independent sub-seed for a stream, via the SplitMix64 finalizer.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ground truth as recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Annotation {
    Label(usize),
    Boxes(Vec<(usize, BBox)>),
}

impl Annotation {
    pub fn boxes(&self) -> &[(usize, BBox)] {
        match self {
            Annotation::Label(_) => &[],
            Annotation::Boxes(b) => b,
        }
    }
}

/// A generated image with every drawn object, labelled or not.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub image: GrayImage,
    pub objects: Vec<(usize, BBox)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: SplitKind,
    pub partition: CategoryPartition,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# split={}\n", self.split));
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str(&format!("# m={}\n", self.partition.m()));
        out.push_str(&format!("# categories={}\n", self.partition.names().join(",")));
        for r in &self.records {
            let ann = match &r.annotation {
                Annotation::Label(c) => self.partition.name(*c).to_string(),
                Annotation::Boxes(boxes) => boxes
                    .iter()
                    .map(|(c, b)| format!("{}:{}", self.partition.name(*c), b))
                    .collect::<Vec<_>>()
                    .join(";"),
            };
            out.push_str(&format!("{}\t{}\t{}\n", r.id, r.path, ann));
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, DataError> {
        let err = |line: usize, reason: String| DataError::Manifest {
            path: source.to_string(),
            line,
            reason,
        };
        let mut split = None;
        let mut seed = None;
        let mut m = None;
        let mut names: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if let Some(meta) = line.strip_prefix('#') {
                let Some((key, value)) = meta.trim().split_once('=') else {
                    continue;
                };
                match key.trim() {
                    "split" => split = Some(value.trim().parse::<SplitKind>().map_err(|e| err(lineno, e))?),
                    "seed" => seed = Some(value.trim().parse::<u64>().map_err(|e| err(lineno, e.to_string()))?),
                    "m" => m = Some(value.trim().parse::<usize>().map_err(|e| err(lineno, e.to_string()))?),
                    "categories" => names = Some(value.trim().split(',').map(str::to_string).collect()),
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            rows.push((lineno, line));
        }
        let split = split.ok_or_else(|| err(0, "missing `# split=` header".into()))?;
        let seed = seed.ok_or_else(|| err(0, "missing `# seed=` header".into()))?;
        let m = m.ok_or_else(|| err(0, "missing `# m=` header".into()))?;
        let names = names.ok_or_else(|| err(0, "missing `# categories=` header".into()))?;
        let partition = CategoryPartition::new(names, m)?;
        let resolve = |lineno: usize, name: &str| {
            partition
                .index_of(name)
                .ok_or_else(|| err(lineno, format!("unknown category `{name}`")))
        };
        let mut records = Vec::with_capacity(rows.len());
        for (lineno, line) in rows {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let annotation = if split == SplitKind::Classification {
                Annotation::Label(resolve(lineno, fields[2])?)
            } else {
                let mut boxes = Vec::new();
                for item in fields[2].split(';').filter(|s| !s.is_empty()) {
                    let (name, coords) = item
                        .split_once(':')
                        .ok_or_else(|| err(lineno, format!("expected `category:x1,y1,x2,y2`, found `{item}`")))?;
                    let b: BBox = coords.parse().map_err(|e: BoxError| err(lineno, e.to_string()))?;
                    boxes.push((resolve(lineno, name)?, b));
                }
                Annotation::Boxes(boxes)
            };
            records.push(Record {
                id: fields[0].to_string(),
                path: fields[1].to_string(),
                annotation,
            });
        }
        Ok(Self {
            split,
            partition,
            seed,
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.render()).map_err(io_err(path))
    }
}

/// One record with its decoded image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub annotation: Annotation,
}

/// A manifest together with its images, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl SplitData {
    /// Loads a manifest and every image it references.
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    image: GrayImage::load(&base.join(&r.path))?,
                    annotation: r.annotation.clone(),
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Self { manifest, samples })
    }
}

/// All four splits generated from one config.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub partition: CategoryPartition,
    pub classification: Vec<SynthImage>,
    pub detection: Vec<SynthImage>,
    pub detection_all: Vec<SynthImage>,
    pub eval: Vec<SynthImage>,
    classification_labels: Vec<usize>,
}

impl Dataset {
    pub fn images(&self, split: SplitKind) -> &[SynthImage] {
        match split {
            SplitKind::Classification => &self.classification,
            SplitKind::Detection => &self.detection,
            SplitKind::DetectionAll => &self.detection_all,
            SplitKind::Eval => &self.eval,
        }
    }

    fn annotation(&self, split: SplitKind, index: usize) -> Annotation {
        match split {
            SplitKind::Classification => Annotation::Label(self.classification_labels[index]),
            _ => Annotation::Boxes(self.images(split)[index].objects.clone()),
        }
    }

    pub fn manifest(&self, split: SplitKind) -> DatasetManifest {
        let records = self
            .images(split)
            .iter()
            .enumerate()
            .map(|(i, img)| Record {
                id: img.id.clone(),
                path: format!("images/{}/{}.pgm", split, img.id),
                annotation: self.annotation(split, i),
            })
            .collect();
        DatasetManifest {
            split,
            partition: self.partition.clone(),
            seed: self.config.seed,
            records,
        }
    }

    /// In-memory equivalent of writing the split and loading it back.
    pub fn split(&self, split: SplitKind) -> SplitData {
        let manifest = self.manifest(split);
        let samples = self
            .images(split)
            .iter()
            .zip(&manifest.records)
            .map(|(img, r)| Sample {
                id: img.id.clone(),
                image: img.image.clone(),
                annotation: r.annotation.clone(),
            })
            .collect();
        SplitData { manifest, samples }
    }

    /// Writes images and manifests under `dir`; returns the manifest paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
        let mut paths = Vec::new();
        for split in SplitKind::ALL {
            let manifest = self.manifest(split);
            for (img, record) in self.images(split).iter().zip(&manifest.records) {
                img.image.save(&dir.join(&record.path))?;
            }
            let path = dir.join(split.manifest_file());
            manifest.save(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

struct Canvas {
    size: u32,
    values: Vec<f64>,
}

impl Canvas {
    fn noise<R: Rng>(size: u32, rng: &mut R) -> Self {
        let base = rng.gen_range(0.05..0.3);
        let values = (0..size * size)
            .map(|_| base + rng.gen_range(-0.06..0.06))
            .collect();
        Self { size, values }
    }

    /// Draws glyph `kind` in the square at `(x0, y0)` of side `side` and returns
    /// the tight box of the drawn pixels.
    fn draw<R: Rng>(&mut self, glyph: &str, x0: u32, y0: u32, side: u32, rng: &mut R) -> Option<BBox> {
        let intensity = rng.gen_range(0.55..0.95);
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (u32::MAX, u32::MAX, 0, 0);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let u = (x - x0) as f64 / side as f64 + 0.5 / side as f64;
                let v = (y - y0) as f64 / side as f64 + 0.5 / side as f64;
                if glyph_mask(glyph, u, v) {
                    self.values[(y * self.size + x) as usize] = intensity + rng.gen_range(-0.04..0.04);
                    lo_x = lo_x.min(x);
                    lo_y = lo_y.min(y);
                    hi_x = hi_x.max(x + 1);
                    hi_y = hi_y.max(y + 1);
                }
            }
        }
        BBox::new(lo_x, lo_y, hi_x, hi_y).ok()
    }

    fn into_image(self) -> GrayImage {
        let data = self
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(self.size, self.size, data).expect("square canvas")
    }
}

struct Placer {
    taken: Vec<BBox>,
}

impl Placer {
    /// Finds a free square of side drawn from `side_range` (fractions of the image),
    /// separated by at least one pixel from every placed square.
    fn place<R: Rng>(&mut self, size: u32, side_range: (f64, f64), rng: &mut R) -> Option<(u32, u32, u32)> {
        for _ in 0..100 {
            let side = ((rng.gen_range(side_range.0..side_range.1) * size as f64).round() as u32).clamp(8, size);
            let x = rng.gen_range(0..=size - side);
            let y = rng.gen_range(0..=size - side);
            let candidate = BBox::new(x.saturating_sub(1), y.saturating_sub(1), (x + side + 1).min(size), (y + side + 1).min(size))
                .expect("positive side");
            if self.taken.iter().all(|t| t.intersection_area(&candidate) == 0) {
                self.taken.push(BBox::new(x, y, x + side, y + side).expect("positive side"));
                return Some((x, y, side));
            }
        }
        None
    }
}

const DOMINANT_SIDE: (f64, f64) = (0.45, 0.7);
const DISTRACTOR_SIDE: (f64, f64) = (0.16, 0.28);
const OBJECT_SIDE: (f64, f64) = (0.25, 0.5);

fn multi_object_image<R: Rng>(
    id: String,
    size: u32,
    glyphs: &[String],
    primary: usize,
    pool: &[usize],
    max_extra: usize,
    rng: &mut R,
) -> SynthImage {
    let mut canvas = Canvas::noise(size, rng);
    let mut placer = Placer { taken: Vec::new() };
    let mut objects = Vec::new();
    let extra = rng.gen_range(0..=max_extra);
    for n in 0..=extra {
        let category = if n == 0 { primary } else { pool[rng.gen_range(0..pool.len())] };
        if let Some((x, y, side)) = placer.place(size, OBJECT_SIDE, rng) {
            if let Some(b) = canvas.draw(&glyphs[category], x, y, side, rng) {
                objects.push((category, b));
            }
        }
    }
    SynthImage {
        id,
        image: canvas.into_image(),
        objects,
    }
}

fn classification_image<R: Rng>(id: String, size: u32, glyphs: &[String], label: usize, clutter: usize, rng: &mut R) -> SynthImage {
    let mut canvas = Canvas::noise(size, rng);
    let mut placer = Placer { taken: Vec::new() };
    let mut objects = Vec::new();
    let (x, y, side) = placer.place(size, DOMINANT_SIDE, rng).expect("empty canvas has room");
    objects.push((label, canvas.draw(&glyphs[label], x, y, side, rng).expect("glyph covers pixels")));
    let distractors = rng.gen_range(0..=clutter);
    for _ in 0..distractors {
        let mut category = rng.gen_range(0..glyphs.len() - 1);
        if category >= label {
            category += 1;
        }
        if let Some((x, y, side)) = placer.place(size, DISTRACTOR_SIDE, rng) {
            if let Some(b) = canvas.draw(&glyphs[category], x, y, side, rng) {
                objects.push((category, b));
            }
        }
    }
    SynthImage {
        id,
        image: canvas.into_image(),
        objects,
    }
}

/// Generates every split. Deterministic in `config`; each split draws from its
/// own sub-seeded stream.
pub fn generate(config: &GenConfig) -> Result<Dataset, DataError> {
    let partition = config.partition()?;
    let size = config.image_size;
    let k = config.k;
    let rng_for = |split: SplitKind| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, split.seed_tag()));

    let mut rng = rng_for(SplitKind::Classification);
    let mut classification = Vec::new();
    let mut classification_labels = Vec::new();
    for i in 0..config.classification_per_class * k {
        let label = i % k;
        let id = format!("{}-{:05}", SplitKind::Classification.id_prefix(), i);
        classification.push(classification_image(id, size, partition.names(), label, config.clutter, &mut rng));
        classification_labels.push(label);
    }

    let boxed_split = |split: SplitKind, categories: &[usize], per_class: usize| {
        let mut rng = rng_for(split);
        (0..per_class * categories.len())
            .map(|i| {
                let id = format!("{}-{:05}", split.id_prefix(), i);
                multi_object_image(id, size, partition.names(), categories[i % categories.len()], categories, config.extra_objects, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let all: Vec<usize> = (0..k).collect();
    let box_annotated: Vec<usize> = partition.box_annotated().collect();
    let detection = boxed_split(SplitKind::Detection, &box_annotated, config.detection_per_class);
    let detection_all = boxed_split(SplitKind::DetectionAll, &all, config.detection_per_class);
    let eval = boxed_split(SplitKind::Eval, &all, config.eval_per_class);

    Ok(Dataset {
        config: config.clone(),
        partition,
        classification,
        detection,
        detection_all,
        eval,
        classification_labels,
    })
}

/// Crops `region` expanded by `context_pad` pixels on every side (clipped to
/// the image), resamples it bilinearly to `side x side` using pixel-centre
/// alignment and flattens row-major. Values stay in `[0, 1]`.
pub fn warp_region<T: Scalar>(image: &GrayImage, region: &BBox, context_pad: u32, side: usize) -> Result<Vec<T>, DataError> {
    let mut out = vec![T::zero(); side * side];
    warp_region_into(image, region, context_pad, side, &mut out)?;
    Ok(out)
}

/// [`warp_region`] writing into a caller-provided buffer of length `side * side`.
pub fn warp_region_into<T: Scalar>(
    image: &GrayImage,
    region: &BBox,
    context_pad: u32,
    side: usize,
    out: &mut [T],
) -> Result<(), DataError> {
    assert_eq!(out.len(), side * side, "output buffer length");
    let x1 = region.x1.saturating_sub(context_pad);
    let y1 = region.y1.saturating_sub(context_pad);
    let x2 = region.x2.saturating_add(context_pad).min(image.width());
    let y2 = region.y2.saturating_add(context_pad).min(image.height());
    if x1 >= x2 || y1 >= y2 {
        return Err(DataError::EmptyRegion(*region));
    }
    let (w, h) = ((x2 - x1) as f64, (y2 - y1) as f64);
    let sample_axis = |o: usize, lo: u32, hi: u32, extent: f64| {
        let pos = (o as f64 + 0.5) * extent / side as f64 - 0.5;
        let pos = pos.clamp(0.0, (hi - lo - 1) as f64);
        let i0 = pos.floor() as u32;
        let i1 = (i0 + 1).min(hi - lo - 1);
        (lo + i0, lo + i1, pos - i0 as f64)
    };
    let cols: Vec<(u32, u32, f64)> = (0..side).map(|o| sample_axis(o, x1, x2, w)).collect();
    for oy in 0..side {
        let (r0, r1, ty) = sample_axis(oy, y1, y2, h);
        for (ox, &(c0, c1, tx)) in cols.iter().enumerate() {
            let top = image.intensity(c0, r0) * (1.0 - tx) + image.intensity(c1, r0) * tx;
            let bottom = image.intensity(c0, r1) * (1.0 - tx) + image.intensity(c1, r1) * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            out[oy * side + ox] = T::of(v.clamp(0.0, 1.0));
        }
    }
    Ok(())
}
