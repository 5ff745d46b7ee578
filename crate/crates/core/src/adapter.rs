//! Nearest-neighbour transfer of fine-tuning deltas to the held-out categories.
//!
//! For every held-out category `j` the `k` box-annotated categories whose
//! classifier rows are closest after l2 normalization are found, and
//! `W^d_j = W^c_j + (1/k) * sum_i deltaB[N(j, i)]`. Deltas are applied raw;
//! normalization only enters the neighbour search.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::model::{l2_normalize_rows, CategoryPartition, HeadState, ModelError, NetworkParams, OutputHead, WeightMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation settings: {0}")]
    Config(String),
    #[error("inputs disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Number of neighbours averaged per held-out category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeighborCount {
    Count(usize),
    /// Every box-annotated category.
    Full,
}

impl NeighborCount {
    pub fn resolve(self, m: usize) -> usize {
        match self {
            Self::Count(k) => k,
            Self::Full => m,
        }
    }
}

impl fmt::Display for NeighborCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(k) => write!(f, "{k}"),
            Self::Full => f.write_str("FULL"),
        }
    }
}

impl FromStr for NeighborCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Self::Full);
        }
        s.parse()
            .map(Self::Count)
            .map_err(|_| format!("neighbour count must be a positive integer or FULL, got `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptConfig {
    pub k: NeighborCount,
    /// Append the bias to each row before normalizing for the distance.
    pub include_bias: bool,
    /// Average bias deltas along with weight deltas.
    pub adapt_bias: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: NeighborCount::Count(2),
            include_bias: false,
            adapt_bias: true,
        }
    }
}

impl AdaptConfig {
    pub fn with_k(k: NeighborCount) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn validate(&self, m: usize) -> Result<usize, AdaptError> {
        let k = self.k.resolve(m);
        if k == 0 || k > m {
            return Err(AdaptError::Config(format!(
                "k must lie in 1..={m} (the number of box-annotated categories), got {k}"
            )));
        }
        Ok(k)
    }
}

/// For each held-out category, its nearest box-annotated categories in
/// ascending distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborMap {
    m: usize,
    /// Indexed by `j - m`; entries are `(index into B, distance)`.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl NeighborMap {
    pub fn num_held_out(&self) -> usize {
        self.neighbors.len()
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    /// Neighbours of held-out category `j` (a global category index).
    pub fn of(&self, j: usize) -> &[(usize, f64)] {
        &self.neighbors[j - self.m]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[(usize, f64)])> {
        self.neighbors.iter().enumerate().map(|(i, n)| (i + self.m, n.as_slice()))
    }

    /// `A-category<TAB>rank<TAB>B-category<TAB>distance`, ranks from 1.
    pub fn to_tsv(&self, partition: &CategoryPartition) -> String {
        let mut out = String::from("a_category\trank\tb_category\tdistance\n");
        for (j, list) in self.iter() {
            for (rank, (b, d)) in list.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\t{}\n", partition.name(j), rank + 1, partition.name(*b), d));
            }
        }
        out
    }

    pub fn save(&self, path: &Path, partition: &CategoryPartition) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_tsv(partition))
    }
}

fn search_rows<T: Scalar>(wc: &WeightMatrix<T>, include_bias: bool) -> Result<WeightMatrix<T>, ModelError> {
    let rows = if include_bias {
        let mut w = Array2::zeros((wc.rows(), wc.cols() + 1));
        for (mut dst, (src, b)) in w.outer_iter_mut().zip(wc.weights().outer_iter().zip(wc.bias())) {
            dst.slice_mut(ndarray::s![..wc.cols()]).assign(&src);
            dst[wc.cols()] = *b;
        }
        WeightMatrix::new(w, Array1::zeros(wc.rows()))?
    } else {
        WeightMatrix::new(wc.weights().clone(), Array1::zeros(wc.rows()))?
    };
    l2_normalize_rows(&rows)
}

/// Finds, for every held-out row of the classification weights, the `k`
/// closest box-annotated rows by Euclidean distance between l2-normalized
/// rows. Ties go to the lower category index.
pub fn nearest_neighbors<T: Scalar>(wc: &WeightMatrix<T>, partition: &CategoryPartition, config: &AdaptConfig) -> Result<NeighborMap, AdaptError> {
    let m = partition.m();
    let k = config.validate(m)?;
    if wc.rows() < partition.k() {
        return Err(ModelError::Shape {
            what: "classifier rows".into(),
            expected: partition.k(),
            found: wc.rows(),
        }
        .into());
    }
    let unit = search_rows(wc, config.include_bias)?;
    let mut neighbors = Vec::with_capacity(partition.num_held_out());
    for j in partition.held_out() {
        let mut dists: Vec<(usize, f64)> = (0..m)
            .map(|b| {
                let d2: f64 = unit
                    .row(j)
                    .iter()
                    .zip(unit.row(b).iter())
                    .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                    .sum();
                (b, d2.sqrt())
            })
            .collect();
        dists.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        dists.truncate(k);
        neighbors.push(dists);
    }
    Ok(NeighborMap { m, neighbors })
}

/// Averaged neighbour deltas, one row per held-out category. Bias deltas are
/// zero when `adapt_bias` is off.
pub fn transfer_deltas<T: Scalar>(delta_b: &WeightMatrix<T>, map: &NeighborMap, config: &AdaptConfig) -> Result<WeightMatrix<T>, AdaptError> {
    let mut weights = Array2::zeros((map.num_held_out(), delta_b.cols()));
    let mut bias = Array1::zeros(map.num_held_out());
    for (i, (_, list)) in map.iter().enumerate() {
        if list.is_empty() {
            return Err(AdaptError::Mismatch("neighbour list is empty".into()));
        }
        let scale = T::of(list.len() as f64).recip();
        let mut row = weights.row_mut(i);
        for &(b, _) in list {
            if b >= delta_b.rows() {
                return Err(AdaptError::Mismatch(format!("neighbour {b} outside deltaB ({} rows)", delta_b.rows())));
            }
            row += &delta_b.row(b);
            if config.adapt_bias {
                bias[i] += delta_b.bias()[b];
            }
        }
        row.mapv_inplace(|v| v * scale);
        bias[i] *= scale;
    }
    Ok(WeightMatrix::new(weights, bias)?)
}

/// Adapted category weights `W^d` (no background row): box-annotated rows get
/// their own delta, held-out rows the neighbour average.
pub fn adapt_weights<T: Scalar>(
    wc: &WeightMatrix<T>,
    delta_b: &WeightMatrix<T>,
    map: &NeighborMap,
    config: &AdaptConfig,
) -> Result<WeightMatrix<T>, AdaptError> {
    let m = map.m;
    if delta_b.cols() != wc.cols() || delta_b.rows() != m {
        return Err(ModelError::Shape {
            what: "deltaB".into(),
            expected: m * wc.cols(),
            found: delta_b.rows() * delta_b.cols(),
        }
        .into());
    }
    if wc.rows() != m + map.num_held_out() {
        return Err(AdaptError::Mismatch(format!(
            "classifier has {} rows, neighbour map covers {}",
            wc.rows(),
            m + map.num_held_out()
        )));
    }
    let transfer = transfer_deltas(delta_b, map, config)?;
    let b = wc.slice_rows(0, m).add(delta_b)?;
    let a = wc.slice_rows(m, wc.rows()).add(&transfer)?;
    Ok(WeightMatrix::stack(&[&b, &a])?)
}

/// Builds the detector from the classification network (for `W^c`) and the
/// fine-tuned network (hidden layers, `deltaB`, background row): held-out rows
/// receive the neighbour-averaged deltas. Returns the map as well.
pub fn assemble_lsda<T: Scalar>(
    pretrained: &NetworkParams<T>,
    finetuned: &NetworkParams<T>,
    config: &AdaptConfig,
) -> Result<(NetworkParams<T>, NeighborMap), AdaptError> {
    if pretrained.state() != HeadState::Classification {
        return Err(AdaptError::Mismatch("W^c must come from a classification-state network".into()));
    }
    if finetuned.state() != HeadState::Detector {
        return Err(AdaptError::Mismatch("fine-tuned network is not in detector state".into()));
    }
    if pretrained.partition() != finetuned.partition() {
        return Err(AdaptError::Mismatch("category partitions differ".into()));
    }
    if pretrained.head().cols() != finetuned.head().cols() || pretrained.input_dim() != finetuned.input_dim() {
        return Err(AdaptError::Mismatch("network dimensions differ".into()));
    }
    let wc = pretrained.head().classifier();
    let delta_b = finetuned.head().delta_b().clone();
    let map = nearest_neighbors(&wc, pretrained.partition(), config)?;
    let transfer = transfer_deltas(&delta_b, &map, config)?;
    let ph = pretrained.head();
    let background = finetuned.head().background().cloned();
    let head = OutputHead::from_parts(ph.fc_a().clone(), ph.fc_b().clone(), delta_b, transfer, background)?;
    let net = finetuned.clone().with_head(head)?;
    Ok((net, map))
}

/// `(fc_a, fc_b, delta_b, background)` of a detector head.
pub type HeadParts<T> = (WeightMatrix<T>, WeightMatrix<T>, WeightMatrix<T>, WeightMatrix<T>);

/// Splits a detector head into its parts.
pub fn disassemble<T: Scalar>(head: &OutputHead<T>) -> Result<HeadParts<T>, AdaptError> {
    let background = head
        .background()
        .cloned()
        .ok_or_else(|| AdaptError::Mismatch("head has no background row".into()))?;
    Ok((head.fc_a().clone(), head.fc_b().clone(), head.delta_b().clone(), background))
}
