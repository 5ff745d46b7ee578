mod common;

use std::collections::BTreeMap;

use lsda::adapter::{adapt_weights, nearest_neighbors, AdaptConfig, NeighborCount};
use lsda::analysis::{breakdown, classify_fp, Bands, FpKind, FpRecord};
use lsda::bbox::iou;
use lsda::data::{Annotation, DatasetManifest, Record, SplitKind};
use lsda::detector::{nms, rank_cmp, score_inputs, Detection, ScoreMode};
use lsda::eval::{average_precision, evaluate};
use lsda::model::l2_normalize_rows;
use lsda::{BBox, CategoryPartition, NetworkParams, OutputHead, WeightMatrix};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn partition(k: usize, m: usize) -> CategoryPartition {
    CategoryPartition::new((0..k).map(|i| format!("c{i:02}")).collect(), m).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = WeightMatrix<f64>> {
    (
        prop::collection::vec(-1.0f64..1.0, rows * cols),
        prop::collection::vec(-1.0f64..1.0, rows),
    )
        .prop_map(move |(w, b)| {
            WeightMatrix::new(Array2::from_shape_vec((rows, cols), w).unwrap(), Array1::from(b)).unwrap()
        })
}

/// `(m, W^c, deltaB)` with `K = m + a` rows over `d` features.
fn adaptation_problem() -> impl Strategy<Value = (usize, WeightMatrix<f64>, WeightMatrix<f64>)> {
    (2usize..=6, 1usize..=4, 2usize..=8).prop_flat_map(|(m, a, d)| (Just(m), matrix(m + a, d), matrix(m, d)))
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0u32..40, 0u32..40, 1u32..25, 1u32..25).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn detections(category_max: usize, max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..category_max, 0u32..8, bbox()), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(category, s, bbox)| Detection {
                image_id: "img".into(),
                category,
                score: s as f64 / 4.0,
                bbox,
            })
            .collect()
    })
}

fn nn_rows(map: &lsda::adapter::NeighborMap) -> Vec<Vec<usize>> {
    map.iter().map(|(_, l)| l.iter().map(|e| e.0).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn eq1_is_linear_in_the_deltas((m, wc, delta) in adaptation_problem(), alpha in -3.0f64..3.0, k in 1usize..=6) {
        let k = k.min(m);
        let config = AdaptConfig::with_k(NeighborCount::Count(k));
        let map = nearest_neighbors(&wc, &partition(wc.rows(), m), &config).unwrap();
        let base = adapt_weights(&wc, &delta, &map, &config).unwrap();
        for a in [alpha, 0.0, 2.0] {
            let scaled = adapt_weights(&wc, &delta.scaled(a), &map, &config).unwrap();
            let expected = wc.weights() + &((base.weights() - wc.weights()) * a);
            let expected_bias = wc.bias() + &((base.bias() - wc.bias()) * a);
            for (x, y) in scaled.weights().iter().zip(expected.iter()).chain(scaled.bias().iter().zip(expected_bias.iter())) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn neighbours_ignore_row_scale((m, wc, _delta) in adaptation_problem(), row in 0usize..10, c in 0.01f64..100.0) {
        let row = row % wc.rows();
        let p = partition(wc.rows(), m);
        let config = AdaptConfig::with_k(NeighborCount::Full);
        let before = nearest_neighbors(&wc, &p, &config).unwrap();
        let mut w = wc.weights().clone();
        w.row_mut(row).mapv_inplace(|v| v * c);
        let scaled = WeightMatrix::new(w, wc.bias().clone()).unwrap();
        let after = nearest_neighbors(&scaled, &p, &config).unwrap();
        prop_assert_eq!(nn_rows(&before), nn_rows(&after));
    }

    #[test]
    fn permuting_box_annotated_rows_is_equivariant((m, wc, delta) in adaptation_problem(), seed in any::<u64>(), k in 1usize..=6) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let k = k.min(m);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        // Row i of the permuted problem is row perm[i] of the original.
        let rows_wc: Vec<usize> = perm.iter().copied().chain(m..wc.rows()).collect();
        let pick = |src: &WeightMatrix<f64>, rows: &[usize]| {
            let parts: Vec<WeightMatrix<f64>> = rows.iter().map(|&r| src.slice_rows(r, r + 1)).collect();
            WeightMatrix::stack(&parts.iter().collect::<Vec<_>>()).unwrap()
        };
        let wc_p = pick(&wc, &rows_wc);
        let delta_p = pick(&delta, &perm);
        let p = partition(wc.rows(), m);
        let config = AdaptConfig::with_k(NeighborCount::Count(k));
        let map = nearest_neighbors(&wc, &p, &config).unwrap();
        let map_p = nearest_neighbors(&wc_p, &p, &config).unwrap();
        for ((_, a), (_, b)) in map.iter().zip(map_p.iter()) {
            let mut orig: Vec<usize> = a.iter().map(|e| e.0).collect();
            let mut mapped: Vec<usize> = b.iter().map(|e| perm[e.0]).collect();
            orig.sort_unstable();
            mapped.sort_unstable();
            prop_assert_eq!(orig, mapped);
        }
        let adapted = adapt_weights(&wc, &delta, &map, &config).unwrap();
        let adapted_p = adapt_weights(&wc_p, &delta_p, &map_p, &config).unwrap();
        for j in m..wc.rows() {
            for (x, y) in adapted.row(j).iter().zip(adapted_p.row(j).iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn smaller_k_is_a_prefix((m, wc, _delta) in adaptation_problem()) {
        let p = partition(wc.rows(), m);
        let mut previous: Option<Vec<Vec<usize>>> = None;
        for k in 1..=m {
            let rows = nn_rows(&nearest_neighbors(&wc, &p, &AdaptConfig::with_k(NeighborCount::Count(k))).unwrap());
            if let Some(prev) = &previous {
                for (short, long) in prev.iter().zip(&rows) {
                    prop_assert_eq!(&long[..k - 1], &short[..]);
                }
            }
            previous = Some(rows);
        }
    }

    #[test]
    fn shifting_every_output_bias_leaves_scores_alone(
        head in matrix(6, 4),
        bg in matrix(1, 4),
        delta in matrix(3, 4),
        l1 in matrix(5, 9),
        l2 in matrix(4, 5),
        inputs in prop::collection::vec(0.0f64..1.0, 9 * 6),
        shift in -5.0f64..5.0,
    ) {
        let build = |shift: f64| {
            let add = |w: &WeightMatrix<f64>| WeightMatrix::new(w.weights().clone(), w.bias().mapv(|b| b + shift)).unwrap();
            let h = OutputHead::from_classifier(&add(&head), 3).unwrap().into_detector().unwrap();
            let h = OutputHead::from_parts(h.fc_a().clone(), h.fc_b().clone(), delta.clone(), h.transfer_a().clone(), Some(add(&bg))).unwrap();
            NetworkParams::new(9, vec![l1.clone(), l2.clone()], h, partition(6, 3)).unwrap()
        };
        let x = Array2::from_shape_vec((6, 9), inputs).unwrap();
        for mode in [ScoreMode::Logit, ScoreMode::Softmax] {
            let a = score_inputs(&build(0.0), x.view(), mode).unwrap();
            let b = score_inputs(&build(shift), x.view(), mode).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() <= 1e-9, "{mode:?}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn nms_output_is_an_idempotent_antichain(dets in detections(1, 30), t in 0.05f64..0.95) {
        let kept = nms(dets.clone(), t);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) < t);
            }
        }
        prop_assert_eq!(nms(kept.clone(), t), kept.clone());
        // Every discarded detection overlaps a kept one that outranks it.
        for d in dets.iter().filter(|d| !kept.contains(d)) {
            prop_assert!(kept.iter().any(|k| rank_cmp(k, d).is_le() && iou(&k.bbox, &d.bbox) >= t));
        }
    }

    #[test]
    fn late_false_positives_and_promotions(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let tp = flags.iter().filter(|f| **f).count();
        let num_gt = tp + extra;
        let ap = average_precision(&flags, num_gt);
        let mut with_fp = flags.clone();
        with_fp.push(false);
        prop_assert!(average_precision(&with_fp, num_gt) <= ap);
        for i in (0..flags.len()).filter(|&i| !flags[i]) {
            let mut promoted = flags.clone();
            promoted[i] = true;
            if extra > 0 {
                prop_assert!(average_precision(&promoted, num_gt) >= ap);
            }
        }
    }

    #[test]
    fn map_ignores_positive_rescaling_per_category(
        dets in detections(3, 40),
        gts in prop::collection::vec((0usize..3, bbox()), 1..8),
        exps in prop::collection::vec(-6i32..6, 3),
    ) {
        let manifest = DatasetManifest {
            split: SplitKind::Eval,
            partition: partition(3, 1),
            seed: 0,
            records: vec![Record { id: "img".into(), path: "img.pgm".into(), annotation: Annotation::Boxes(gts) }],
        };
        let base = evaluate(&dets, &manifest, 0.5).unwrap();
        prop_assert_eq!(&evaluate(&dets, &manifest, 0.5).unwrap(), &base);
        let rescaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: d.score * 2f64.powi(exps[d.category]), ..d.clone() })
            .collect();
        prop_assert_eq!(evaluate(&rescaled, &manifest, 0.5).unwrap(), base);
    }

    #[test]
    fn breakdown_partitions_and_grows(kinds in prop::collection::vec(0u8..3, 0..60), mut cutoffs in prop::collection::vec(1usize..80, 1..6)) {
        cutoffs.sort_unstable();
        cutoffs.dedup();
        let fps: Vec<FpRecord> = kinds
            .iter()
            .map(|k| FpRecord {
                detection: Detection { image_id: "i".into(), category: 0, score: 0.0, bbox: BBox::new(0, 0, 1, 1).unwrap() },
                kind: [FpKind::Loc, FpKind::Bg, FpKind::Oth][*k as usize],
                same_iou: 0.0,
                any_iou: 0.0,
            })
            .collect();
        let curve = breakdown(&fps, &cutoffs);
        for (i, f) in curve.fractions.iter().enumerate() {
            let sum = f.0 + f.1 + f.2;
            if curve.used[i] > 0 {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
        for w in curve.counts.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1 && w[0].2 <= w[1].2);
        }
    }

    #[test]
    fn taxonomy_ignores_the_score(b in bbox(), category in 0usize..3, objects in prop::collection::vec((0usize..3, bbox()), 0..5), s1 in -10.0f64..10.0, s2 in -10.0f64..10.0) {
        let d = |score| Detection { image_id: "i".into(), category, score, bbox: b };
        prop_assert_eq!(classify_fp(&d(s1), &objects, Bands::default()), classify_fp(&d(s2), &objects, Bands::default()));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - common::box_iou(tuple(&a), tuple(&b))).abs() < 1e-15);
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn normalization_is_idempotent_and_keeps_directions(w in matrix(5, 8), probes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 1..6)) {
        prop_assume!(w.weights().outer_iter().all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let n = l2_normalize_rows(&w).unwrap();
        let nn = l2_normalize_rows(&n).unwrap();
        for (x, y) in n.weights().iter().zip(nn.weights().iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for i in 0..5 {
            let argmax = |row: ndarray::ArrayView1<f64>| {
                let dots: Vec<f64> = probes.iter().map(|p| row.iter().zip(p).map(|(a, b)| a * b).sum()).collect();
                (0..dots.len()).max_by(|&a, &b| dots[a].total_cmp(&dots[b])).unwrap()
            };
            prop_assert_eq!(argmax(w.weights().row(i)), argmax(n.weights().row(i)));
            let row = w.weights().row(i);
            let cos = row.dot(&n.weights().row(i)) / row.dot(&row).sqrt();
            prop_assert!((cos - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().zip(n.weights().row(i).iter()).all(|(a, b)| a.signum() == b.signum() || *a == 0.0));
        }
    }
}

fn tuple(b: &BBox) -> (u32, u32, u32, u32) {
    (b.x1, b.y1, b.x2, b.y2)
}

/// Independent greedy reference: repeatedly keep the best remaining box and
/// drop everything that overlaps it at or above the threshold.
fn greedy_reference(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut left: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let best = (0..left.len()).min_by(|&a, &b| rank_cmp(&left[a], &left[b])).unwrap();
        let top = left.remove(best);
        left.retain(|d| common::box_iou(tuple(&d.bbox), tuple(&top.bbox)) < t);
        kept.push(top);
    }
    kept
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nms_matches_greedy_reference(dets in detections(1, 12), t in 0.1f64..0.9) {
        prop_assert_eq!(nms(dets.clone(), t), greedy_reference(&dets, t));
    }

    #[test]
    fn cross_category_nms_matches_greedy_reference(dets in detections(3, 3), t in 0.1f64..0.9) {
        let got = lsda::detector::cross_category_nms(dets.clone(), t);
        let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
        for d in dets {
            by_image.entry(d.image_id.clone()).or_default().push(d);
        }
        let expected: Vec<Detection> = by_image.values().flat_map(|v| greedy_reference(v, t)).collect();
        prop_assert_eq!(got, expected);
    }
}
