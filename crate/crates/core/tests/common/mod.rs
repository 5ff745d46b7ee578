//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the adapter; rows are plain vectors with the bias
//! stored as the last element.

#![allow(dead_code)]

use lsda::adapter::{AdaptConfig, NeighborCount};
use lsda::WeightMatrix;
use ndarray::{Array1, Array2};
use rand::Rng;

/// One random adaptation problem: `K` classifier rows (B first), `m` delta rows.
#[derive(Debug, Clone)]
pub struct Instance {
    pub m: usize,
    pub wc: Vec<Vec<f64>>,
    pub delta_b: Vec<Vec<f64>>,
}

impl Instance {
    pub fn k(&self) -> usize {
        self.wc.len()
    }

    pub fn wc_matrix(&self) -> WeightMatrix<f64> {
        to_matrix(&self.wc)
    }

    pub fn delta_matrix(&self) -> WeightMatrix<f64> {
        to_matrix(&self.delta_b)
    }
}

/// `|B|` in `3..=10`, `|A|` in `1..=6`, feature dimension in `1..=32`. With
/// `ties`, some box-annotated rows are exact copies of others so that several
/// neighbours sit at exactly the same distance.
pub fn random_instance<R: Rng>(rng: &mut R, ties: bool) -> Instance {
    let m = rng.gen_range(3..=10);
    let a = rng.gen_range(1..=6);
    let d = rng.gen_range(1..=32);
    let row = |rng: &mut R| (0..=d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut wc: Vec<Vec<f64>> = (0..m + a).map(|_| row(rng)).collect();
    if ties {
        for _ in 0..rng.gen_range(1..=m / 2) {
            let src = rng.gen_range(0..m);
            let dst = rng.gen_range(0..m);
            wc[dst] = wc[src].clone();
        }
        // A held-out row may also coincide with a box-annotated one (distance 0).
        if rng.gen_bool(0.5) {
            let src = rng.gen_range(0..m);
            let dst = rng.gen_range(m..m + a);
            wc[dst] = wc[src].clone();
        }
    }
    let delta_b = (0..m).map(|_| row(rng)).collect();
    Instance { m, wc, delta_b }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> WeightMatrix<f64> {
    let d = rows[0].len() - 1;
    let w = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    let b = Array1::from_iter(rows.iter().map(|r| r[d]));
    WeightMatrix::new(w, b).expect("well-formed rows")
}

pub fn from_matrix(m: &WeightMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let mut r: Vec<f64> = m.weights().row(i).to_vec();
            r.push(m.bias()[i]);
            r
        })
        .collect()
}

fn unit(row: &[f64], include_bias: bool) -> Vec<f64> {
    let used = if include_bias { row } else { &row[..row.len() - 1] };
    let norm = used.iter().map(|v| v * v).sum::<f64>().sqrt();
    used.iter().map(|v| v / norm).collect()
}

/// Every held-out category's full list of `(b, distance)` sorted by distance,
/// ties to the lower index, from an explicit all-pairs distance table.
pub fn all_pairs_sorted(wc: &[Vec<f64>], m: usize, include_bias: bool) -> Vec<Vec<(usize, f64)>> {
    let units: Vec<Vec<f64>> = wc.iter().map(|r| unit(r, include_bias)).collect();
    let mut table = vec![vec![0.0; m]; wc.len() - m];
    for j in m..wc.len() {
        for i in 0..m {
            let mut s = 0.0;
            for c in 0..units[j].len() {
                let diff = units[j][c] - units[i][c];
                s += diff * diff;
            }
            table[j - m][i] = s.sqrt();
        }
    }
    table
        .into_iter()
        .map(|dists| {
            let mut idx: Vec<(usize, f64)> = dists.into_iter().enumerate().collect();
            idx.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
            idx
        })
        .collect()
}

/// Literal Eq. 1: for every held-out `j`, `W^d_j = W^c_j + (1/k) sum_i (W^d_i - W^c_i)`
/// over its `k` nearest box-annotated `i`, where `W^d_i = W^c_i + deltaB_i`.
/// Box-annotated rows are `W^c_i + deltaB_i`. Without `adapt_bias` the bias
/// column of held-out rows is left alone.
pub fn eq1_oracle(inst: &Instance, config: &AdaptConfig) -> Vec<Vec<f64>> {
    let m = inst.m;
    let k = match config.k {
        NeighborCount::Count(k) => k,
        NeighborCount::Full => m,
    };
    let cols = inst.wc[0].len();
    let mut wd_b: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        let mut r = vec![0.0; cols];
        for c in 0..cols {
            r[c] = inst.wc[i][c] + inst.delta_b[i][c];
        }
        wd_b.push(r);
    }
    let order = all_pairs_sorted(&inst.wc, m, config.include_bias);
    let mut out = wd_b.clone();
    for j in m..inst.k() {
        let mut r = inst.wc[j].clone();
        let last = if config.adapt_bias { cols } else { cols - 1 };
        for c in 0..last {
            let mut sum = 0.0;
            for &(i, _) in &order[j - m][..k] {
                sum += wd_b[i][c] - inst.wc[i][c];
            }
            r[c] += sum / k as f64;
        }
        out.push(r);
    }
    out
}

/// Largest absolute difference over the largest magnitude of `expected`.
pub fn max_relative_error(actual: &[Vec<f64>], expected: &[Vec<f64>]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "row count");
    let mut diff: f64 = 0.0;
    let mut scale: f64 = f64::MIN_POSITIVE;
    for (a, e) in actual.iter().zip(expected) {
        assert_eq!(a.len(), e.len(), "column count");
        for (x, y) in a.iter().zip(e) {
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    diff / scale
}

/// Intersection over union of half-open integer boxes by area arithmetic.
pub fn box_iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
    let iw = a.2.min(b.2).saturating_sub(a.0.max(b.0)) as f64;
    let ih = a.3.min(b.3).saturating_sub(a.1.max(b.1)) as f64;
    let inter = iw * ih;
    let area = |r: (u32, u32, u32, u32)| ((r.2 - r.0) * (r.3 - r.1)) as f64;
    inter / (area(a) + area(b) - inter)
}
