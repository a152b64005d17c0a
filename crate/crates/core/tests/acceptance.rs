//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use truthprobe::baseline::fit_threshold;
use truthprobe::experiment::{
    ablate_split_size, ablate_task_count, aggregate_report, cross_task_accuracy, run_all,
    tune_hyperparams, Pipeline, ReportRow, Scope, Subsample, SweepConfig,
};
use truthprobe::probe::{lr_gradient, train_lr, train_mm, StepPolicy};
use truthprobe::select::{select_top_num, LocationScoreTable, SplitScores};
use truthprobe::sparsify::compress_and_retrain;
use truthprobe::store::{
    read_activation_file_unchecked, write_activation_file, ActivationHeader, ActivationRecord,
    DatasetEntry, ModelGeometry,
};
use truthprobe::synth::{generate, SynthConfig};
use truthprobe::{
    ActivationStore, FeatureMatrix, HyperParams, LocationId, LocationKind, ProbeType, Regime,
    Split, SplitRef, SplitView, TrainConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureMatrix {
    let mut values = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        // guarantee both classes
        let y = if i < 2 {
            i as u8
        } else {
            rng.random_range(0..2u8)
        };
        let shift = if y == 1 { 0.5 } else { -0.5 };
        for _ in 0..dim {
            values.push(shift + rng.sample::<f64, _>(StandardNormal) * rng.random_range(0.1..3.0));
        }
        labels.push(y);
    }
    FeatureMatrix::new(dim, values, labels).unwrap()
}

fn mm_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=32);
        let rows = rng.random_range(2..=200);
        let m = random_matrix(&mut rng, rows, dim);
        let probe = train_mm(&m).map_err(|e| e.to_string())?;
        // two passes per class: plain mean, then a mean-of-residuals correction
        let class_mean = |label: u8| -> Vec<f64> {
            let idx: Vec<usize> = (0..m.rows()).filter(|&i| m.labels()[i] == label).collect();
            let n = idx.len() as f64;
            (0..dim)
                .map(|j| {
                    let first = idx.iter().map(|&i| m.row(i)[j]).sum::<f64>() / n;
                    first + idx.iter().map(|&i| m.row(i)[j] - first).sum::<f64>() / n
                })
                .collect()
        };
        let (pos, neg) = (class_mean(1), class_mean(0));
        for j in 0..dim {
            worst = worst.max((probe.weights[j] - (pos[j] - neg[j])).abs());
        }
    }
    check(worst <= 1e-12, format!("max |Δθ| = {worst:.2e}"))
}

fn lr_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dim = rng.random_range(1..=20);
        let rows = rng.random_range(2..=100);
        let m = random_matrix(&mut rng, rows, dim);
        let lambda = rng.random_range(0.0..0.5);
        let mut x: Vec<f64> = (0..=dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (g, gb) = lr_gradient(&x[..dim], x[dim], &m, lambda).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g.into_iter().chain([gb]).collect();
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(dim + 1);
        for j in 0..=dim {
            let orig = x[j];
            x[j] = orig + h;
            let up = truthprobe::probe::lr_loss(&x[..dim], x[dim], &m, lambda).unwrap();
            x[j] = orig - h;
            let down = truthprobe::probe::lr_loss(&x[..dim], x[dim], &m, lambda).unwrap();
            x[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(norm(&diff) / scale);
    }
    check(worst <= 1e-5, format!("max relative error = {worst:.2e}"))
}

fn lr_closed_form() -> Outcome {
    let lambda = 0.1;
    // root of σ(θ) = 1 − λθ by bisection
    let f = |t: f64| 1.0 / (1.0 + (-t).exp()) - (1.0 - lambda * t);
    let (mut lo, mut hi) = (0.0, 1.0 / lambda);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let m = FeatureMatrix::new(1, vec![1.0, -1.0], vec![1, 0]).unwrap();
    let mut detail = format!("root {root:.6}");
    let mut ok = true;
    for step in [
        StepPolicy::Lbfgs { memory: 10 },
        StepPolicy::GradientDescent,
    ] {
        let cfg = TrainConfig {
            l2_lambda: lambda,
            step,
            ..TrainConfig::default()
        };
        let p = train_lr(&m, &cfg).map_err(|e| e.to_string())?;
        ok &= (p.weights[0] - root).abs() <= 1e-3;
        detail.push_str(&format!(", {step:?} θ = {:.6}", p.weights[0]));
    }
    check(ok, detail)
}

fn table_arithmetic() -> Outcome {
    let datasets = [
        ("short-answer-closebook-qa", "nq"),
        ("short-answer-closebook-qa", "triviaqa"),
        ("short-answer-closebook-qa", "sciq"),
        ("summarization", "xsum"),
        ("summarization", "cnndm"),
        ("sentence-completion", "storycloze"),
        ("sentence-completion", "hellaswag"),
        ("sentence-completion", "copa"),
    ];
    let table: [(&str, &str, [f64; 8], f64); 3] = [
        (
            "cross-task",
            "mm",
            [58.52, 71.88, 82.60, 75.82, 71.38, 73.06, 59.50, 71.00],
            70.47,
        ),
        (
            "cross-task",
            "lr",
            [63.90, 71.36, 76.90, 63.98, 80.66, 70.71, 64.40, 62.00],
            69.24,
        ),
        (
            "ood",
            "lr",
            [60.40, 54.70, 51.25, 58.06, 52.30, 62.26, 50.02, 46.50],
            54.44,
        ),
    ];
    let rows: Vec<ReportRow> = table
        .iter()
        .flat_map(|(regime, probe, accs, _)| {
            datasets
                .iter()
                .zip(accs)
                .map(move |((task, name), &acc)| ReportRow {
                    regime: regime.to_string(),
                    probe_type: probe.to_string(),
                    task: task.to_string(),
                    dataset: name.to_string(),
                    n_test: 0,
                    accuracy_percent: acc,
                })
        })
        .collect();
    let report = aggregate_report(rows).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (regime, probe, _, want) in &table {
        let got = report
            .aggregate(regime, probe, Scope::Overall, "average")
            .ok_or("missing aggregate")?;
        let shown: f64 = format!("{got:.2}").parse().unwrap();
        ok &= (shown - want).abs() <= 0.005;
        parts.push(format!("{regime}/{probe} {shown:.2}"));
    }
    check(ok, parts.join(", "))
}

/// The sweep used for every synthetic experiment.
fn synthetic_sweep() -> SweepConfig {
    SweepConfig {
        cap_rule: true,
        ..SweepConfig::heads(vec![1, 2, 4, 8], vec![8, 16])
    }
}

fn train_split<'a>(store: &'a ActivationStore, d: &DatasetEntry) -> &'a SplitView {
    store.view(SplitRef::new(d.id, Split::Train))
}

fn universality(store: &ActivationStore) -> Outcome {
    let p = Pipeline::new(store, ProbeType::Lr, TrainConfig::default());
    let m = store.manifest();
    let first = m.train_task_datasets().next().unwrap();

    let sweep_one = SweepConfig {
        tasks_subset: Some(vec![first.task.clone()]),
        ..synthetic_sweep()
    };
    let hp_one = tune_hyperparams(&p, &sweep_one)
        .map_err(|e| e.to_string())?
        .best;
    let (held_one, run_one, _) =
        cross_task_accuracy(&p, &[first], &[train_split(store, first)], hp_one)
            .map_err(|e| e.to_string())?;
    let in_dist = 100.0
        * p.evaluate(
            &run_one.model,
            store.view(SplitRef::new(first.id, Split::Test)),
        )
        .map_err(|e| e.to_string())?;

    let curve =
        ablate_task_count(&p, &[1, 4, 8, 12], &synthetic_sweep()).map_err(|e| e.to_string())?;
    let accs: Vec<f64> = curve.iter().map(|c| c.accuracy_percent).collect();
    let rising = accs.windows(2).all(|w| w[1] >= w[0] - 1.0);
    let gain = accs[3] - accs[0];

    let a = in_dist >= 90.0 && held_one <= 65.0;
    let b = accs[3] >= 90.0;
    let c = rising && gain >= 20.0;
    check(
        a && b && c,
        format!(
            "one dataset: in-dist {in_dist:.2}%, held-out {held_one:.2}%; t=1,4,8,12: {}; gain {gain:.2}",
            accs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn all_train_views(store: &ActivationStore) -> (Vec<&DatasetEntry>, Vec<&SplitView>) {
    let datasets: Vec<&DatasetEntry> = store.manifest().train_task_datasets().collect();
    let views = datasets.iter().map(|d| train_split(store, d)).collect();
    (datasets, views)
}

fn tuned_full(store: &ActivationStore) -> Result<HyperParams, String> {
    let p = Pipeline::new(store, ProbeType::Lr, TrainConfig::default());
    Ok(tune_hyperparams(&p, &synthetic_sweep())
        .map_err(|e| e.to_string())?
        .best)
}

fn sparsity(store: &ActivationStore) -> Outcome {
    let p = Pipeline::new(store, ProbeType::Lr, TrainConfig::default());
    let dim = store
        .manifest()
        .model
        .location_dim(LocationKind::AttentionHead);
    let hp = tuned_full(store)?;
    let (datasets, train) = all_train_views(store);
    let full = HyperParams { k: dim, ..hp };
    let half = HyperParams { k: dim / 2, ..hp };
    let (acc_full, run_full, _) =
        cross_task_accuracy(&p, &datasets, &train, full).map_err(|e| e.to_string())?;
    let (acc_half, _, _) =
        cross_task_accuracy(&p, &datasets, &train, half).map_err(|e| e.to_string())?;
    let compressed = compress_and_retrain(
        &run_full.plan.entries(),
        &train,
        ProbeType::Lr,
        dim,
        &TrainConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let exact = compressed.model == compressed.full_model;
    check(
        acc_full - acc_half <= 2.0 && exact,
        format!(
            "num={}: k={dim} {acc_full:.2}%, k={} {acc_half:.2}%; k=dim identical to uncompressed: {exact}",
            hp.num,
            dim / 2
        ),
    )
}

fn sample_efficiency(store: &ActivationStore) -> Outcome {
    let p = Pipeline::new(store, ProbeType::Lr, TrainConfig::default());
    let hp = tuned_full(store)?;
    let full = store
        .manifest()
        .train_task_datasets()
        .map(|d| train_split(store, d).len())
        .min()
        .unwrap();
    let points =
        ablate_split_size(&p, &[10, full], hp, Subsample::Prefix).map_err(|e| e.to_string())?;
    let (small, big) = (points[0].accuracy_percent, points[1].accuracy_percent);
    check(
        (big - small).abs() <= 3.0,
        format!("10 samples {small:.2}%, {full} samples {big:.2}%"),
    )
}

fn selection_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (layers, heads) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let locations: Vec<LocationId> = (0..layers)
            .flat_map(|l| (0..heads).map(move |h| LocationId::head(l, h)))
            .collect();
        // few distinct levels so ties are common
        let levels = rng.random_range(1..=5);
        let splits: Vec<SplitScores> = (0..rng.random_range(1..=6))
            .map(|s| SplitScores {
                dataset_id: s,
                dataset: format!("d{s}"),
                used: s == 0 || rng.random_bool(0.8),
                accuracies: (0..locations.len())
                    .map(|_| 0.5 + 0.1 * rng.random_range(0..levels) as f64)
                    .collect(),
            })
            .collect();
        let table = LocationScoreTable {
            probe_type: ProbeType::Mm,
            kind: LocationKind::AttentionHead,
            location_dim: 4,
            locations: locations.clone(),
            splits: splits.clone(),
        };
        let num = rng.random_range(1..=locations.len());
        let plan = select_top_num(&table, num).map_err(|e| e.to_string())?;

        let mut expected = std::collections::BTreeSet::new();
        for s in splits.iter().filter(|s| s.used) {
            for (i, loc) in locations.iter().enumerate() {
                // rank = locations strictly better, or equally good and smaller
                let rank = locations
                    .iter()
                    .enumerate()
                    .filter(|&(j, other)| {
                        s.accuracies[j] > s.accuracies[i]
                            || (s.accuracies[j] == s.accuracies[i] && other < loc)
                    })
                    .count();
                if rank < num {
                    expected.insert(*loc);
                }
            }
        }
        if plan.location_ids() != expected.into_iter().collect::<Vec<_>>() {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} mismatches in 100 tables"),
    )
}

fn threshold_brute_force() -> Outcome {
    let (tau, acc) =
        fit_threshold(&[0.1, 0.4, 0.6, 0.9], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let example = tau == 0.5 && acc == 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=60);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..12) as f64 / 4.0 - 1.5)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let mut distinct = scores.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut candidates = vec![f64::NEG_INFINITY];
        candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        candidates.push(f64::INFINITY);
        let accuracy = |t: f64| {
            scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| u8::from(**s >= t) == **l)
                .count() as f64
                / n as f64
        };
        let mut best = (candidates[0], accuracy(candidates[0]));
        for &t in &candidates[1..] {
            let a = accuracy(t);
            if a > best.1 {
                best = (t, a);
            }
        }
        let got = fit_threshold(&scores, &labels).map_err(|e| e.to_string())?;
        if got != best {
            mismatches += 1;
        }
    }
    check(
        example && mismatches == 0,
        format!(
            "midpoint example τ = {tau}, accuracy {acc}; {mismatches} mismatches in 100 instances"
        ),
    )
}

fn determinism_and_hygiene() -> Outcome {
    let run = || -> Result<(String, usize), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let paths = truthprobe::synth::generate_to(&SynthConfig::default(), dir.path())
            .map_err(|e| e.to_string())?;
        let manifest = truthprobe::Manifest::load(&paths.manifest).map_err(|e| e.to_string())?;
        let store = ActivationStore::open(&manifest, LocationKind::AttentionHead)
            .map_err(|e| e.to_string())?;
        let mut text = String::new();
        let mut overlap = 0;
        for probe in [ProbeType::Lr, ProbeType::Mm] {
            let p = Pipeline::new(&store, probe, TrainConfig::default());
            let full = run_all(
                &p,
                &synthetic_sweep(),
                &[Regime::CrossTask, Regime::CrossDomain, Regime::InDomain],
            )
            .map_err(|e| e.to_string())?;
            overlap += full.audit.overlap();
            overlap += full.runs.iter().map(|r| r.audit.overlap()).sum::<usize>();
            text.push_str(&full.report.rows_csv().map_err(|e| e.to_string())?);
            text.push_str(&full.report.aggregates_csv().map_err(|e| e.to_string())?);
        }
        Ok((text, overlap))
    };
    let (a, overlap_a) = run()?;
    let (b, overlap_b) = run()?;
    check(
        a == b && overlap_a == 0 && overlap_b == 0,
        format!(
            "reports identical: {}, {} bytes; train/test overlap {} and {}",
            a == b,
            a.len(),
            overlap_a,
            overlap_b
        ),
    )
}

fn file_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut failures = 0;
    for case in 0..50 {
        let geometry = ModelGeometry {
            name: "random".into(),
            n_layers: rng.random_range(1..=6),
            n_heads: rng.random_range(1..=6),
            head_dim: rng.random_range(1..=8),
            hidden_dim: 0,
        };
        let geometry = ModelGeometry {
            hidden_dim: geometry.n_heads * geometry.head_dim,
            ..geometry
        };
        let kind = if rng.random_bool(0.5) {
            LocationKind::AttentionHead
        } else {
            LocationKind::LayerResidual
        };
        let split = Split::ALL[rng.random_range(0..3)];
        let logprob = rng.random_bool(0.5);
        let header =
            ActivationHeader::new(rng.random_range(0..1000), split, kind, &geometry, logprob)
                .map_err(|e| e.to_string())?;
        let records: Vec<ActivationRecord> = (0..rng.random_range(0..20))
            .map(|_| ActivationRecord {
                sample_id: rng.random(),
                label: rng.random_range(0..2),
                answer_token_count: if logprob { rng.random_range(0..20) } else { 0 },
                answer_logprob_sum: if logprob {
                    -rng.random_range(0.0..50.0)
                } else {
                    0.0
                },
                activations: (0..header.record_len())
                    .map(|_| rng.sample::<f32, _>(StandardNormal) * 10.0)
                    .collect(),
            })
            .collect();
        let first = dir.path().join(format!("{case}_a.actv"));
        let second = dir.path().join(format!("{case}_b.actv"));
        write_activation_file(&first, &header, &records).map_err(|e| e.to_string())?;
        let view = read_activation_file_unchecked(&first).map_err(|e| e.to_string())?;
        write_activation_file(&second, &view.header, &view.records).map_err(|e| e.to_string())?;
        let (a, b) = (
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap(),
        );
        if a != b || view.records != records {
            failures += 1;
        }
    }
    check(failures == 0, format!("{failures} of 50 files differ"))
}

fn main() -> ExitCode {
    let single_core = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let corpus = generate(&SynthConfig::default()).expect("synthetic corpus");
    let store = corpus
        .store(LocationKind::AttentionHead)
        .expect("head store");

    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (
            "mass-mean exactness",
            Duration::from_secs(1),
            Box::new(mm_exactness),
        ),
        (
            "logistic gradient vs finite differences",
            Duration::from_secs(5),
            Box::new(lr_gradient_check),
        ),
        (
            "logistic 1-D closed form",
            Duration::from_secs(1),
            Box::new(lr_closed_form),
        ),
        (
            "table arithmetic",
            Duration::MAX,
            Box::new(table_arithmetic),
        ),
        (
            "synthetic universality",
            Duration::from_secs(120),
            Box::new(|| single_core.install(|| universality(&store))),
        ),
        (
            "sparsity",
            Duration::from_secs(60),
            Box::new(|| single_core.install(|| sparsity(&store))),
        ),
        (
            "sample efficiency",
            Duration::from_secs(120),
            Box::new(|| single_core.install(|| sample_efficiency(&store))),
        ),
        (
            "selection vs brute force",
            Duration::from_secs(1),
            Box::new(selection_brute_force),
        ),
        (
            "probability threshold vs exhaustive scan",
            Duration::from_secs(1),
            Box::new(threshold_brute_force),
        ),
        (
            "determinism and hygiene",
            Duration::MAX,
            Box::new(determinism_and_hygiene),
        ),
        (
            "activation file round trip",
            Duration::MAX,
            Box::new(file_round_trip),
        ),
    ];

    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let over = elapsed > *budget;
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget:?} budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "[{status}] {:>2}. {name} ({:.2} s): {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
