use proptest::prelude::*;

use truthprobe::baseline::fit_threshold;
use truthprobe::experiment::{aggregate_report, rows_from_csv, rows_to_csv, ReportRow};
use truthprobe::probe::{lr_gradient, lr_loss, train_lr_traced, train_mm};
use truthprobe::select::{select_top_num, LocationScoreTable, SplitScores};
use truthprobe::store::{
    read_activation_file_unchecked, write_activation_file, ActivationHeader, ActivationRecord,
    ModelGeometry,
};
use truthprobe::{FeatureMatrix, LocationId, LocationKind, ProbeType, Split, TrainConfig};

/// Rows with at least one sample of each class.
fn labelled_rows(max_rows: usize, max_dim: usize) -> impl Strategy<Value = FeatureMatrix> {
    (1..=max_dim, 2..=max_rows).prop_flat_map(|(dim, rows)| {
        (
            prop::collection::vec(-5.0f64..5.0, rows * dim),
            prop::collection::vec(0u8..2, rows - 2),
        )
            .prop_map(move |(values, mut labels)| {
                labels.insert(0, 0);
                labels.insert(1, 1);
                FeatureMatrix::new(dim, values, labels).unwrap()
            })
    })
}

fn permuted(m: &FeatureMatrix, order: &[usize]) -> FeatureMatrix {
    FeatureMatrix::from_rows(
        m.dim(),
        order
            .iter()
            .map(|&i| (m.row(i).iter().copied(), m.labels()[i])),
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mm_invariant_under_row_permutation(m in labelled_rows(40, 6), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..m.rows()).collect();
        let n = order.len();
        for i in (1..n).rev() {
            order.swap(i, (seed.rotate_left(i as u32) as usize) % (i + 1));
        }
        let a = train_mm(&m).unwrap();
        let b = train_mm(&permuted(&m, &order)).unwrap();
        prop_assert!(close(&a.weights, &b.weights, 1e-12));
        prop_assert!((a.bias - b.bias).abs() <= 1e-9);
    }

    #[test]
    fn mm_label_flip_negates_direction(m in labelled_rows(40, 6)) {
        let flipped = FeatureMatrix::new(
            m.dim(),
            m.values().to_vec(),
            m.labels().iter().map(|l| 1 - l).collect(),
        ).unwrap();
        let a = train_mm(&m).unwrap();
        let b = train_mm(&flipped).unwrap();
        let neg: Vec<f64> = b.weights.iter().map(|v| -v).collect();
        prop_assert!(close(&a.weights, &neg, 1e-12));
    }

    #[test]
    fn mm_predictions_invariant_under_positive_scaling(m in labelled_rows(30, 5), c in 0.1f64..10.0) {
        let scaled = FeatureMatrix::new(
            m.dim(),
            m.values().iter().map(|v| v * c).collect(),
            m.labels().to_vec(),
        ).unwrap();
        let a = train_mm(&m).unwrap();
        let b = train_mm(&scaled).unwrap();
        for i in 0..m.rows() {
            let sa = a.predict(m.row(i)).unwrap().score;
            let sb = b.predict(scaled.row(i)).unwrap().score;
            // scores scale by c²; compare signs away from the boundary
            if sa.abs() > 1e-9 {
                prop_assert_eq!(sa >= 0.0, sb >= 0.0);
            }
        }
    }

    #[test]
    fn lr_gradient_matches_finite_differences(
        m in labelled_rows(30, 6),
        lambda in 0.0f64..1.0,
        seed in prop::collection::vec(-2.0f64..2.0, 7),
    ) {
        let d = m.dim();
        let mut x: Vec<f64> = seed[..=d].to_vec();
        let (g, gb) = lr_gradient(&x[..d], x[d], &m, lambda).unwrap();
        let analytic: Vec<f64> = g.into_iter().chain([gb]).collect();
        let h = 1e-5;
        for j in 0..=d {
            let orig = x[j];
            x[j] = orig + h;
            let up = lr_loss(&x[..d], x[d], &m, lambda).unwrap();
            x[j] = orig - h;
            let down = lr_loss(&x[..d], x[d], &m, lambda).unwrap();
            x[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            prop_assert!((numeric - analytic[j]).abs() <= 1e-6 * (1.0 + numeric.abs()));
        }
    }

    #[test]
    fn lr_loss_never_increases(m in labelled_rows(40, 5)) {
        let (_, trace) = train_lr_traced(&m, &TrainConfig::default()).unwrap();
        for w in trace.losses.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn lr_is_deterministic(m in labelled_rows(30, 4)) {
        let cfg = TrainConfig::default();
        let a = truthprobe::probe::train_lr(&m, &cfg).unwrap();
        let b = truthprobe::probe::train_lr(&m, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn threshold_is_optimal(
        scores in prop::collection::vec(-3i32..3, 2..40),
        labels_seed in prop::collection::vec(0u8..2, 40),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let mut labels = labels_seed[..scores.len()].to_vec();
        labels[0] = 0;
        labels[1] = 1;
        let (tau, acc) = fit_threshold(&scores, &labels).unwrap();
        let accuracy = |t: f64| scores.iter().zip(&labels)
            .filter(|(s, l)| u8::from(**s >= t) == **l).count() as f64 / scores.len() as f64;
        prop_assert_eq!(accuracy(tau), acc);
        for &s in &scores {
            prop_assert!(accuracy(s) <= acc);
        }
        prop_assert!(accuracy(f64::INFINITY) <= acc);
    }

    #[test]
    fn selection_grows_with_num(
        accs in prop::collection::vec(prop::collection::vec(0u8..4, 12), 1..5),
        num in 1usize..12,
    ) {
        let locations: Vec<LocationId> = (0..3).flat_map(|l| (0..4).map(move |h| LocationId::head(l, h))).collect();
        let table = LocationScoreTable {
            probe_type: ProbeType::Lr,
            kind: LocationKind::AttentionHead,
            location_dim: 2,
            locations,
            splits: accs.iter().enumerate().map(|(i, a)| SplitScores {
                dataset_id: i as u32,
                dataset: format!("d{i}"),
                used: true,
                accuracies: a.iter().map(|&v| 0.5 + f64::from(v) / 10.0).collect(),
            }).collect(),
        };
        let small = select_top_num(&table, num).unwrap().location_ids();
        let large = select_top_num(&table, num + 1).unwrap().location_ids();
        prop_assert!(small.iter().all(|l| large.contains(l)));
        prop_assert!(small.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(small.len() <= num * accs.len());
    }

    #[test]
    fn report_rows_survive_csv(
        accs in prop::collection::vec(0u32..10001, 1..10),
    ) {
        let rows: Vec<ReportRow> = accs.iter().enumerate().map(|(i, &a)| ReportRow {
            regime: "cross-task".into(),
            probe_type: "lr".into(),
            task: format!("task-{}", i % 3),
            dataset: format!("data,{i}"),
            n_test: i * 7,
            accuracy_percent: f64::from(a) / 100.0,
        }).collect();
        let text = rows_to_csv(&rows).unwrap();
        let back = rows_from_csv(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &rows);
        let report = aggregate_report(back).unwrap();
        let again = aggregate_report(rows).unwrap();
        prop_assert_eq!(report.aggregates_csv().unwrap(), again.aggregates_csv().unwrap());
    }

    #[test]
    fn activation_files_round_trip(
        n_layers in 1usize..4,
        n_heads in 1usize..4,
        head_dim in 1usize..5,
        layer_kind in any::<bool>(),
        logprob in any::<bool>(),
        values in prop::collection::vec(-1e6f32..1e6, 0..200),
        ids in prop::collection::vec(any::<u64>(), 0..8),
    ) {
        let geometry = ModelGeometry {
            name: "prop".into(),
            n_layers,
            n_heads,
            head_dim,
            hidden_dim: n_heads * head_dim,
        };
        let kind = if layer_kind { LocationKind::LayerResidual } else { LocationKind::AttentionHead };
        let header = ActivationHeader::new(3, Split::Validation, kind, &geometry, logprob).unwrap();
        let len = header.record_len();
        let records: Vec<ActivationRecord> = ids.iter().enumerate().map(|(i, &id)| ActivationRecord {
            sample_id: id,
            label: (i % 2) as u8,
            answer_token_count: if logprob { i as u32 + 1 } else { 0 },
            answer_logprob_sum: if logprob { -(i as f64) * 0.75 } else { 0.0 },
            activations: (0..len).map(|j| values.get((i * len + j) % values.len().max(1)).copied().unwrap_or(0.5)).collect(),
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.actv");
        let b = dir.path().join("b.actv");
        write_activation_file(&a, &header, &records).unwrap();
        let view = read_activation_file_unchecked(&a).unwrap();
        write_activation_file(&b, &view.header, &view.records).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        prop_assert_eq!(view.records, records);
    }
}
