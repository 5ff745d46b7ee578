//! Network parameters in every lifecycle state: classification, fine-tuned
//! detector and adapted detector.
//!
//! The network is a stack of fully connected ReLU layers followed by an
//! [`OutputHead`]. The head keeps the per-category blocks separate so that the
//! blocks frozen during fine-tuning stay bit-identical and the learned deltas
//! can be recovered exactly:
//!
//! ```text
//!   rows 0..m      fc_b + delta_b        (box-annotated categories)
//!   rows m..K      fc_a + transfer_a     (image-label-only categories)
//!   row  K         background            (detector state only)
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid category partition: {0}")]
    Partition(String),
    #[error("invalid head state: {0}")]
    State(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

fn shape_err(what: impl Into<String>, expected: usize, found: usize) -> ModelError {
    ModelError::Shape {
        what: what.into(),
        expected,
        found,
    }
}

/// Dense affine map; row `i` of `weights` together with `bias[i]` is one output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T> {
    weights: Array2<T>,
    bias: Array1<T>,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn new(weights: Array2<T>, bias: Array1<T>) -> Result<Self, ModelError> {
        if bias.len() != weights.nrows() {
            return Err(shape_err("bias length", weights.nrows(), bias.len()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("weight matrix".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weights: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    /// He-uniform initialization with zero bias.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / cols.max(1) as f64).sqrt();
        let weights = Array2::from_shape_fn((rows, cols), |_| T::of(rng.gen_range(-limit..limit)));
        Self {
            weights,
            bias: Array1::zeros(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<T> {
        &self.bias
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.weights.row(i)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<T>, &mut Array1<T>) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_zero())
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            weights: self.weights.slice(s![start..end, ..]).to_owned(),
            bias: self.bias.slice(s![start..end]).to_owned(),
        }
    }

    /// Stacks matrices vertically; all must share `cols`.
    pub fn stack(parts: &[&WeightMatrix<T>]) -> Result<Self, ModelError> {
        let cols = parts.first().map(|p| p.cols()).unwrap_or(0);
        for p in parts {
            if p.cols() != cols {
                return Err(shape_err("stacked matrix columns", cols, p.cols()));
            }
        }
        let ws: Vec<ArrayView2<T>> = parts.iter().map(|p| p.weights.view()).collect();
        let bs: Vec<ArrayView1<T>> = parts.iter().map(|p| p.bias.view()).collect();
        Ok(Self {
            weights: concatenate(Axis(0), &ws).expect("columns checked"),
            bias: concatenate(Axis(0), &bs).expect("1-d concat"),
        })
    }

    /// Elementwise sum of two equally shaped matrices.
    pub fn add(&self, other: &Self) -> Result<Self, ModelError> {
        if self.rows() != other.rows() {
            return Err(shape_err("matrix rows", self.rows(), other.rows()));
        }
        if self.cols() != other.cols() {
            return Err(shape_err("matrix columns", self.cols(), other.cols()));
        }
        Ok(Self {
            weights: &self.weights + &other.weights,
            bias: &self.bias + &other.bias,
        })
    }

    /// `y = W x + b` for a single input.
    pub fn apply(&self, input: ArrayView1<'_, T>) -> Array1<T> {
        self.weights.dot(&input) + &self.bias
    }

    /// Batched `Y = X W^T + b`, one example per row of `x`.
    pub fn apply_batch(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = x.dot(&self.weights.t());
        out += &self.bias;
        out
    }

    /// Same map with `scale` applied to weights and bias.
    pub fn scaled(&self, scale: T) -> Self {
        Self {
            weights: &self.weights * scale,
            bias: &self.bias * scale,
        }
    }
}

/// Rescales every weight row to unit Euclidean norm. The bias does not enter
/// the norm and is copied unchanged.
pub fn l2_normalize_rows<T: Scalar>(w: &WeightMatrix<T>) -> Result<WeightMatrix<T>, ModelError> {
    let mut weights = w.weights.clone();
    for (i, mut row) in weights.outer_iter_mut().enumerate() {
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if norm.is_zero() || !norm.is_finite() {
            return Err(ModelError::ZeroRow { row: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(WeightMatrix {
        weights,
        bias: w.bias.clone(),
    })
}

/// Ordered category names split into the box-annotated prefix `B = 0..m` and
/// the image-label-only suffix `A = m..K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CategoryPartition {
    names: Vec<String>,
    m: usize,
}

impl CategoryPartition {
    /// Names must already be in lexicographic order with no duplicates.
    pub fn new(names: Vec<String>, m: usize) -> Result<Self, ModelError> {
        let k = names.len();
        if m == 0 || m >= k {
            return Err(ModelError::Partition(format!(
                "need 0 < m < K, got m={m}, K={k}"
            )));
        }
        for pair in names.windows(2) {
            if pair[0] == pair[1] {
                return Err(ModelError::Partition(format!(
                    "duplicate category `{}`",
                    pair[0]
                )));
            }
            if pair[0] > pair[1] {
                return Err(ModelError::Partition(format!(
                    "categories not sorted: `{}` before `{}`",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(bad) = names.iter().find(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return Err(ModelError::Partition(format!("invalid category name `{bad}`")));
        }
        Ok(Self { names, m })
    }

    /// Sorts `names` first, then validates.
    pub fn sorted(mut names: Vec<String>, m: usize) -> Result<Self, ModelError> {
        names.sort();
        Self::new(names, m)
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    /// Number of box-annotated categories, `|B|`.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn num_held_out(&self) -> usize {
        self.names.len() - self.m
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn is_box_annotated(&self, index: usize) -> bool {
        index < self.m
    }

    pub fn box_annotated(&self) -> std::ops::Range<usize> {
        0..self.m
    }

    pub fn held_out(&self) -> std::ops::Range<usize> {
        self.m..self.names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadState {
    Classification,
    Detector,
}

/// Category-specific output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead<T> {
    fc_a: WeightMatrix<T>,
    fc_b: WeightMatrix<T>,
    delta_b: WeightMatrix<T>,
    transfer_a: WeightMatrix<T>,
    background: Option<WeightMatrix<T>>,
}

impl<T: Scalar> OutputHead<T> {
    /// Classification-state head from a `K`-row classifier whose first `m` rows
    /// are the box-annotated categories.
    pub fn from_classifier(w: &WeightMatrix<T>, m: usize) -> Result<Self, ModelError> {
        if m == 0 || m >= w.rows() {
            return Err(ModelError::Partition(format!(
                "need 0 < m < K, got m={m}, K={}",
                w.rows()
            )));
        }
        let cols = w.cols();
        Ok(Self {
            fc_b: w.slice_rows(0, m),
            fc_a: w.slice_rows(m, w.rows()),
            delta_b: WeightMatrix::zeros(m, cols),
            transfer_a: WeightMatrix::zeros(w.rows() - m, cols),
            background: None,
        })
    }

    /// Reassembles a head from its parts, validating shapes and the state rules.
    pub fn from_parts(
        fc_a: WeightMatrix<T>,
        fc_b: WeightMatrix<T>,
        delta_b: WeightMatrix<T>,
        transfer_a: WeightMatrix<T>,
        background: Option<WeightMatrix<T>>,
    ) -> Result<Self, ModelError> {
        let cols = fc_b.cols();
        for (what, part) in [("fc_a", &fc_a), ("delta_b", &delta_b), ("transfer_a", &transfer_a)] {
            if part.cols() != cols {
                return Err(shape_err(format!("{what} columns"), cols, part.cols()));
            }
        }
        if delta_b.rows() != fc_b.rows() {
            return Err(shape_err("delta_b rows", fc_b.rows(), delta_b.rows()));
        }
        if transfer_a.rows() != fc_a.rows() {
            return Err(shape_err("transfer_a rows", fc_a.rows(), transfer_a.rows()));
        }
        match &background {
            Some(bg) => {
                if bg.rows() != 1 {
                    return Err(shape_err("background rows", 1, bg.rows()));
                }
                if bg.cols() != cols {
                    return Err(shape_err("background columns", cols, bg.cols()));
                }
            }
            None => {
                if !delta_b.is_zero() || !transfer_a.is_zero() {
                    return Err(ModelError::State(
                        "classification head must carry zero deltas".into(),
                    ));
                }
            }
        }
        Ok(Self {
            fc_a,
            fc_b,
            delta_b,
            transfer_a,
            background,
        })
    }

    /// The only permitted state change: adds a zero background row. `fc_a` is moved
    /// through untouched.
    pub fn into_detector(self) -> Result<Self, ModelError> {
        if self.background.is_some() {
            return Err(ModelError::State("head is already in detector state".into()));
        }
        let cols = self.cols();
        Ok(Self {
            background: Some(WeightMatrix::zeros(1, cols)),
            ..self
        })
    }

    pub fn state(&self) -> HeadState {
        if self.background.is_some() {
            HeadState::Detector
        } else {
            HeadState::Classification
        }
    }

    pub fn cols(&self) -> usize {
        self.fc_b.cols()
    }

    pub fn num_categories(&self) -> usize {
        self.fc_b.rows() + self.fc_a.rows()
    }

    /// Number of outputs produced by [`NetworkParams::forward`]: `K` or `K + 1`.
    pub fn num_outputs(&self) -> usize {
        self.num_categories() + usize::from(self.background.is_some())
    }

    pub fn fc_a(&self) -> &WeightMatrix<T> {
        &self.fc_a
    }

    pub fn fc_b(&self) -> &WeightMatrix<T> {
        &self.fc_b
    }

    pub fn delta_b(&self) -> &WeightMatrix<T> {
        &self.delta_b
    }

    /// Deltas transferred onto the held-out rows by nearest-neighbour adaptation.
    pub fn transfer_a(&self) -> &WeightMatrix<T> {
        &self.transfer_a
    }

    pub fn background(&self) -> Option<&WeightMatrix<T>> {
        self.background.as_ref()
    }

    /// Consumes the head, returning `(fc_a, fc_b, delta_b, transfer_a, background)`.
    #[allow(clippy::type_complexity)]
    pub fn into_parts(
        self,
    ) -> (
        WeightMatrix<T>,
        WeightMatrix<T>,
        WeightMatrix<T>,
        WeightMatrix<T>,
        Option<WeightMatrix<T>>,
    ) {
        (self.fc_a, self.fc_b, self.delta_b, self.transfer_a, self.background)
    }

    #[cfg(test)]
    pub(crate) fn delta_b_mut(&mut self) -> &mut WeightMatrix<T> {
        &mut self.delta_b
    }

    #[cfg(test)]
    pub(crate) fn background_mut(&mut self) -> Option<&mut WeightMatrix<T>> {
        self.background.as_mut()
    }

    #[cfg(test)]
    pub(crate) fn set_transfer_a(&mut self, transfer: WeightMatrix<T>) -> Result<(), ModelError> {
        if transfer.rows() != self.fc_a.rows() || transfer.cols() != self.cols() {
            return Err(shape_err("transfer_a rows", self.fc_a.rows(), transfer.rows()));
        }
        self.transfer_a = transfer;
        Ok(())
    }

    /// Classifier weights `W^c` in partition order (`fc_b` rows then `fc_a` rows).
    pub fn classifier(&self) -> WeightMatrix<T> {
        WeightMatrix::stack(&[&self.fc_b, &self.fc_a]).expect("head blocks share columns")
    }

    /// Category rows with all deltas applied (`W^d`), no background row.
    pub fn category_weights(&self) -> WeightMatrix<T> {
        let b = self.fc_b.add(&self.delta_b).expect("validated shapes");
        let a = self.fc_a.add(&self.transfer_a).expect("validated shapes");
        WeightMatrix::stack(&[&b, &a]).expect("head blocks share columns")
    }

    /// Every output row in forward order, background last when present.
    pub fn effective(&self) -> WeightMatrix<T> {
        let cats = self.category_weights();
        match &self.background {
            Some(bg) => WeightMatrix::stack(&[&cats, bg]).expect("head blocks share columns"),
            None => cats,
        }
    }
}

/// Layer widths of the hidden stack and the square input crop side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_side: usize,
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_side: 32,
            hidden: vec![128, 128],
        }
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.input_side * self.input_side
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden.len() < 2 {
            return Err(ModelError::Architecture(format!(
                "need at least 2 hidden layers, got {}",
                self.hidden.len()
            )));
        }
        if self.input_side == 0 || self.hidden.contains(&0) {
            return Err(ModelError::Architecture("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Name of hidden layer `index` (0-based).
pub fn layer_name(index: usize) -> String {
    format!("layer_{}", index + 1)
}

/// `fc6` / `fc7` alias of hidden layer `index` in a stack of `depth` layers.
pub fn layer_alias(index: usize, depth: usize) -> Option<&'static str> {
    match depth.checked_sub(index) {
        Some(2) => Some("fc6"),
        Some(1) => Some("fc7"),
        _ => None,
    }
}

/// Full network: hidden ReLU stack, output head and the category partition the
/// head rows are ordered by.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    input_dim: usize,
    layers: Vec<WeightMatrix<T>>,
    head: OutputHead<T>,
    partition: CategoryPartition,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new(
        input_dim: usize,
        layers: Vec<WeightMatrix<T>>,
        head: OutputHead<T>,
        partition: CategoryPartition,
    ) -> Result<Self, ModelError> {
        if layers.len() < 2 {
            return Err(ModelError::Architecture(format!(
                "need at least 2 hidden layers, got {}",
                layers.len()
            )));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.cols() != width {
                return Err(shape_err(format!("{} columns", layer_name(i)), width, layer.cols()));
            }
            width = layer.rows();
        }
        if head.cols() != width {
            return Err(shape_err("head columns", width, head.cols()));
        }
        if head.fc_b().rows() != partition.m() {
            return Err(shape_err("fc_b rows", partition.m(), head.fc_b().rows()));
        }
        if head.fc_a().rows() != partition.num_held_out() {
            return Err(shape_err("fc_a rows", partition.num_held_out(), head.fc_a().rows()));
        }
        Ok(Self {
            input_dim,
            layers,
            head,
            partition,
        })
    }

    /// Randomly initialized classification-state network.
    pub fn random<R: Rng + ?Sized>(
        arch: &Architecture,
        partition: CategoryPartition,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.input_dim();
        for &h in &arch.hidden {
            layers.push(WeightMatrix::random(h, width, rng));
            width = h;
        }
        let classifier = WeightMatrix::random(partition.k(), width, rng);
        let head = OutputHead::from_classifier(&classifier, partition.m())?;
        Self::new(arch.input_dim(), layers, head, partition)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.head.cols()
    }

    pub fn layers(&self) -> &[WeightMatrix<T>] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .map(layer_name)
            .collect()
    }

    pub fn head(&self) -> &OutputHead<T> {
        &self.head
    }

    #[cfg(test)]
    pub(crate) fn head_mut(&mut self) -> &mut OutputHead<T> {
        &mut self.head
    }

    pub fn partition(&self) -> &CategoryPartition {
        &self.partition
    }

    pub fn state(&self) -> HeadState {
        self.head.state()
    }

    /// Replaces the head; shapes are revalidated.
    pub fn with_head(self, head: OutputHead<T>) -> Result<Self, ModelError> {
        Self::new(self.input_dim, self.layers, head, self.partition)
    }

    /// Moves the head to detector state, see [`OutputHead::into_detector`].
    pub fn into_detector(self) -> Result<Self, ModelError> {
        let head = self.head.clone().into_detector()?;
        self.with_head(head)
    }

    /// Output of the hidden stack for one input.
    pub fn features(&self, input: &[T]) -> Result<Array1<T>, ModelError> {
        if input.len() != self.input_dim {
            return Err(shape_err("input length", self.input_dim, input.len()));
        }
        let mut h = ArrayView1::from(input).to_owned();
        for layer in &self.layers {
            h = layer.apply(h.view());
            h.mapv_inplace(relu);
        }
        Ok(h)
    }

    /// Raw head outputs for one input: `K` scores, or `K + 1` with the
    /// background last in detector state.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, ModelError> {
        let features = self.features(input)?;
        Ok(self.head.effective().apply(features.view()).to_vec())
    }

    /// Hidden features for a batch, one example per row.
    pub fn features_batch(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>, ModelError> {
        if inputs.ncols() != self.input_dim {
            return Err(shape_err("input length", self.input_dim, inputs.ncols()));
        }
        let mut h = self.layers[0].apply_batch(inputs);
        h.mapv_inplace(relu);
        for layer in &self.layers[1..] {
            h = layer.apply_batch(h.view());
            h.mapv_inplace(relu);
        }
        Ok(h)
    }

    /// Batched [`forward`](Self::forward).
    pub fn forward_batch(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>, ModelError> {
        let features = self.features_batch(inputs)?;
        Ok(self.head.effective().apply_batch(features.view()))
    }
}

#[inline]
pub(crate) fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Elementwise `a == b` on raw bits, so `-0.0` and `0.0` differ.
pub fn bit_identical<T: Scalar>(a: &WeightMatrix<T>, b: &WeightMatrix<T>) -> bool {
    a.weights.shape() == b.weights.shape()
        && a.bias.len() == b.bias.len()
        && Zip::from(&a.weights)
            .and(&b.weights)
            .all(|x, y| x.as_f64().to_bits() == y.as_f64().to_bits())
        && a
            .bias
            .iter()
            .zip(b.bias.iter())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn partition(k: usize, m: usize) -> CategoryPartition {
        CategoryPartition::new((0..k).map(|i| format!("c{i:02}")).collect(), m).unwrap()
    }

    fn random_net(seed: u64, arch: &Architecture, k: usize, m: usize) -> NetworkParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::random(arch, partition(k, m), &mut rng).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_scores() {
        let arch = Architecture {
            input_side: 3,
            hidden: vec![4, 4],
        };
        let layers = vec![WeightMatrix::<f64>::zeros(4, 9), WeightMatrix::zeros(4, 4)];
        let head = OutputHead::from_classifier(&WeightMatrix::zeros(5, 4), 2).unwrap();
        let net = NetworkParams::new(arch.input_dim(), layers, head, partition(5, 2)).unwrap();
        let out = net.forward(&[0.7; 9]).unwrap();
        assert_eq!(out, vec![0.0; 5]);
    }

    #[test]
    fn identity_layer_composition() {
        let eye = WeightMatrix::new(Array2::<f64>::eye(3), Array1::zeros(3)).unwrap();
        let w = array![[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let head = OutputHead::from_classifier(&WeightMatrix::new(w, array![0.25, -0.5]).unwrap(), 1).unwrap();
        let net = NetworkParams::new(3, vec![eye.clone(), eye], head, partition(2, 1)).unwrap();
        let x = [1.0, -2.0, 3.0];
        let out = net.forward(&x).unwrap();
        // max(x, 0) = (1, 0, 3)
        assert_eq!(out, vec![0.5 + 6.0 + 0.25, 1.0 + 3.0 - 0.5]);
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        let arch = Architecture {
            input_side: 4,
            hidden: vec![7, 5],
        };
        let net = random_net(11, &arch, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Straight-line evaluation without ndarray.
        let mut h = x.clone();
        for layer in net.layers() {
            let mut next = vec![0.0; layer.rows()];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut acc = layer.bias()[r];
                for (c, xv) in h.iter().enumerate() {
                    acc += layer.weights()[[r, c]] * xv;
                }
                *slot = if acc > 0.0 { acc } else { 0.0 };
            }
            h = next;
        }
        let head = net.head().classifier();
        let expected: Vec<f64> = (0..head.rows())
            .map(|r| head.bias()[r] + (0..h.len()).map(|c| head.weights()[[r, c]] * h[c]).sum::<f64>())
            .collect();

        let got = net.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1e-300), "{g} vs {e}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = random_net(1, &Architecture { input_side: 2, hidden: vec![3, 3] }, 3, 1);
        assert!(matches!(net.forward(&[1.0; 3]), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn forward_is_deterministic_and_batch_agrees() {
        let net = random_net(3, &Architecture { input_side: 3, hidden: vec![6, 4] }, 4, 2);
        let x: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        let batch = Array2::from_shape_vec((1, 9), x).unwrap();
        let y = net.forward_batch(batch.view()).unwrap();
        for (u, v) in a.iter().zip(y.row(0)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_activations_nonnegative() {
        let net = random_net(9, &Architecture { input_side: 3, hidden: vec![8, 8] }, 3, 1);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.3).collect();
        assert!(net.features(&x).unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn normalize_three_four_five() {
        let w = WeightMatrix::<f64>::new(array![[3.0, 4.0]], array![7.0]).unwrap();
        let n = l2_normalize_rows(&w).unwrap();
        assert!((n.weights()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((n.weights()[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(n.bias()[0], 7.0);
    }

    #[test]
    fn normalize_zero_row_names_index() {
        let w = WeightMatrix::new(array![[1.0, 0.0], [0.0, 0.0]], array![0.0, 0.0]).unwrap();
        assert_eq!(l2_normalize_rows(&w), Err(ModelError::ZeroRow { row: 1 }));
    }

    #[test]
    fn normalize_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = WeightMatrix::<f64>::random(5, 8, &mut rng);
        let n = l2_normalize_rows(&w).unwrap();
        for r in 0..5 {
            let norm: f64 = n.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            let orig_norm: f64 = w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos: f64 = n.row(r).dot(&w.row(r)) / orig_norm;
            assert!((cos - 1.0).abs() < 1e-12);
        }
        let again = l2_normalize_rows(&n).unwrap();
        for (a, b) in again.weights().iter().zip(n.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detector_transition_adds_background_only() {
        let net = random_net(4, &Architecture { input_side: 2, hidden: vec![3, 3] }, 5, 2);
        assert_eq!(net.state(), HeadState::Classification);
        let fc_a = net.head().fc_a().clone();
        let det = net.into_detector().unwrap();
        assert_eq!(det.state(), HeadState::Detector);
        assert!(bit_identical(det.head().fc_a(), &fc_a));
        assert_eq!(det.head().num_outputs(), 6);
        assert!(det.head().background().unwrap().is_zero());
        assert!(det.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap().len() == 6);
        assert!(matches!(det.into_detector(), Err(ModelError::State(_))));
    }

    #[test]
    fn partition_rules() {
        assert!(CategoryPartition::new(vec!["a".into(), "b".into()], 0).is_err());
        assert!(CategoryPartition::new(vec!["a".into(), "b".into()], 2).is_err());
        assert!(CategoryPartition::new(vec!["b".into(), "a".into()], 1).is_err());
        assert!(CategoryPartition::new(vec!["a".into(), "a".into()], 1).is_err());
        let p = CategoryPartition::sorted(vec!["zeta".into(), "alpha".into(), "mu".into()], 1).unwrap();
        assert_eq!(p.names(), ["alpha", "mu", "zeta"]);
        assert_eq!(p.index_of("mu"), Some(1));
        assert_eq!(p.held_out(), 1..3);
    }

    #[test]
    fn layer_aliases() {
        assert_eq!(layer_name(0), "layer_1");
        assert_eq!(layer_alias(0, 3), None);
        assert_eq!(layer_alias(1, 3), Some("fc6"));
        assert_eq!(layer_alias(2, 3), Some("fc7"));
    }

    #[test]
    fn classification_head_rejects_nonzero_delta() {
        let z = WeightMatrix::<f64>::zeros(2, 3);
        let nz = WeightMatrix::new(Array2::ones((2, 3)), Array1::zeros(2)).unwrap();
        assert!(OutputHead::from_parts(z.clone(), z.clone(), nz, z.clone(), None).is_err());
    }
}
