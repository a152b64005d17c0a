//! End-to-end runs: hyperparameter tuning, regime evaluation, ablations,
//! and report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::error::{Error, Result};
use crate::probe::{ProbeModel, ProbeType, TrainConfig};
use crate::select::{
    assemble_features, score_all_locations, select_top_num, HyperParams, LocationScoreTable,
    SelectionPlan,
};
use crate::sparsify::compress_and_retrain;
use crate::store::{
    partition_regime, ActivationStore, DatasetEntry, Group, LocationKind, Regime, Split, SplitRef,
    SplitView,
};

/// Overall budget of selected locations used by the `num ≤ 160 / t` cap.
pub const LOCATION_BUDGET: usize = 160;
/// Evaluated splits whose positive share leaves [0.45, 0.55] trigger a warning.
pub const IMBALANCE_BAND: (f64, f64) = (0.45, 0.55);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub num_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub cap_rule: bool,
    pub location_kind: LocationKind,
    #[serde(default)]
    pub samples_per_dataset: Option<usize>,
    #[serde(default)]
    pub tasks_subset: Option<Vec<String>>,
}

impl SweepConfig {
    pub fn heads(num_grid: Vec<usize>, k_grid: Vec<usize>) -> Self {
        SweepConfig {
            num_grid,
            k_grid,
            cap_rule: false,
            location_kind: LocationKind::AttentionHead,
            samples_per_dataset: None,
            tasks_subset: None,
        }
    }

    /// Layer-residual sweeps select one layer per split and only vary `k`.
    pub fn layers(k_grid: Vec<usize>) -> Self {
        SweepConfig {
            num_grid: vec![1],
            k_grid,
            cap_rule: false,
            location_kind: LocationKind::LayerResidual,
            samples_per_dataset: None,
            tasks_subset: None,
        }
    }

    /// Grid cells that survive the location-dim and cap filters, in
    /// ascending (num, k) order.
    pub fn cells(
        &self,
        n_train_datasets: usize,
        grid: usize,
        location_dim: usize,
    ) -> Result<Vec<HyperParams>> {
        if self.num_grid.is_empty() || self.k_grid.is_empty() {
            return Err(Error::EmptyGrid(None));
        }
        let mut nums: Vec<usize> = self.num_grid.clone();
        if self.location_kind == LocationKind::LayerResidual {
            nums = vec![1];
        }
        nums.sort_unstable();
        nums.dedup();
        let nums: Vec<usize> = nums
            .into_iter()
            .filter(|&n| n >= 1 && n <= grid)
            .filter(|&n| !self.cap_rule || n * n_train_datasets <= LOCATION_BUDGET)
            .collect();
        let mut ks = self.k_grid.clone();
        ks.sort_unstable();
        ks.dedup();
        let dropped: Vec<usize> = ks.iter().copied().filter(|&k| k > location_dim).collect();
        if !dropped.is_empty() {
            log::warn!("k values {dropped:?} exceed the location dim {location_dim}; dropped");
        }
        let ks: Vec<usize> = ks
            .into_iter()
            .filter(|&k| k >= 1 && k <= location_dim)
            .collect();
        let cells: Vec<HyperParams> = nums
            .iter()
            .flat_map(|&num| {
                ks.iter().map(move |&k| HyperParams {
                    num,
                    k,
                    location_kind: self.location_kind,
                })
            })
            .collect();
        if cells.is_empty() {
            return Err(Error::EmptyGrid(Some(format!(
                "no (num, k) cell survives for t = {n_train_datasets}"
            ))));
        }
        Ok(cells)
    }
}

/// Every record triple a run touched, split by role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLog {
    pub training: BTreeSet<(u32, Split, u64)>,
    pub evaluated: BTreeSet<(u32, Split, u64)>,
}

impl AuditLog {
    fn add(set: &mut BTreeSet<(u32, Split, u64)>, views: &[&SplitView]) {
        for v in views {
            set.extend(
                v.records
                    .iter()
                    .map(|r| (v.dataset_id(), v.split(), r.sample_id)),
            );
        }
    }

    pub fn record_training(&mut self, views: &[&SplitView]) {
        Self::add(&mut self.training, views);
    }

    pub fn record_evaluated(&mut self, views: &[&SplitView]) {
        Self::add(&mut self.evaluated, views);
    }

    pub fn overlap(&self) -> usize {
        self.training.intersection(&self.evaluated).count()
    }

    pub fn verify(&self) -> Result<()> {
        match self.overlap() {
            0 => Ok(()),
            n => Err(Error::HygieneViolation(format!(
                "{n} evaluated records were also used for training or tuning"
            ))),
        }
    }

    pub fn merge(&mut self, other: &AuditLog) {
        self.training.extend(other.training.iter().copied());
        self.evaluated.extend(other.evaluated.iter().copied());
    }
}

/// Everything one pipeline fit produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub hp: HyperParams,
    pub scores: LocationScoreTable,
    pub plan: SelectionPlan,
    pub model: ProbeModel,
}

impl RunArtifacts {
    /// Writes `<stem>.scores.json`, `<stem>.plan.json` and `<stem>.model.json`.
    pub fn persist(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |suffix: &str, text: String| {
            let path = dir.join(format!("{stem}.{suffix}.json"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("scores", self.scores.to_json()?)?;
        write("plan", self.plan.to_json()?)?;
        write("model", self.model.to_json()?)
    }
}

/// Probe type, training config and the location kind a pipeline works on.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    pub store: &'a ActivationStore,
    pub probe_type: ProbeType,
    pub cfg: TrainConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(store: &'a ActivationStore, probe_type: ProbeType, cfg: TrainConfig) -> Self {
        Pipeline {
            store,
            probe_type,
            cfg,
        }
    }

    fn named<'v>(&self, views: &[&'v SplitView]) -> Vec<(&'v SplitView, &'a str)> {
        views
            .iter()
            .map(|v| (*v, self.store.dataset_name(v.dataset_id())))
            .collect()
    }

    pub fn score(
        &self,
        train: &[&SplitView],
        validation: &[&SplitView],
    ) -> Result<LocationScoreTable> {
        let locations = self.store.manifest().model.locations(self.store.kind());
        score_all_locations(
            train,
            &self.named(validation),
            &locations,
            self.probe_type,
            &self.cfg,
        )
    }

    /// Selection and compression for one hyperparameter cell.
    pub fn fit_with_scores(
        &self,
        scores: &LocationScoreTable,
        train: &[&SplitView],
        hp: HyperParams,
    ) -> Result<RunArtifacts> {
        hp.validate(&self.store.manifest().model)?;
        let mut plan = select_top_num(scores, hp.num)?;
        let compressed =
            compress_and_retrain(&plan.entries(), train, self.probe_type, hp.k, &self.cfg)?;
        plan.k = Some(hp.k);
        for (loc, entry) in plan.locations.iter_mut().zip(&compressed.plan) {
            loc.entry.dims = entry.dims.clone();
        }
        Ok(RunArtifacts {
            hp,
            scores: scores.clone(),
            plan,
            model: compressed.model,
        })
    }

    /// Score, select, compress, retrain.
    pub fn fit(
        &self,
        train: &[&SplitView],
        validation: &[&SplitView],
        hp: HyperParams,
    ) -> Result<RunArtifacts> {
        check_classes(self.store, train)?;
        let scores = self.score(train, validation)?;
        self.fit_with_scores(&scores, train, hp)
    }

    /// Accuracy of a fitted model on one view, as a fraction.
    pub fn evaluate(&self, model: &ProbeModel, view: &SplitView) -> Result<f64> {
        warn_if_imbalanced(view, self.store.dataset_name(view.dataset_id()));
        let m = assemble_features(&model.feature_map, view)?;
        model.probe.accuracy(&m)
    }

    fn mean_accuracy(&self, model: &ProbeModel, views: &[&SplitView]) -> Result<f64> {
        let accs = views
            .iter()
            .map(|v| self.evaluate(model, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&accs))
    }
}

fn check_classes(store: &ActivationStore, train: &[&SplitView]) -> Result<()> {
    let mut pos = 0;
    let mut total = 0;
    for v in train {
        pos += v.records.iter().filter(|r| r.label == 1).count();
        total += v.len();
    }
    if pos == 0 || pos == total {
        let names: Vec<&str> = train
            .iter()
            .map(|v| store.dataset_name(v.dataset_id()))
            .collect();
        return Err(Error::SingleClassInput(Some(names.join(", "))));
    }
    Ok(())
}

fn warn_if_imbalanced(view: &SplitView, name: &str) {
    if view.is_empty() {
        return;
    }
    let share = view.records.iter().filter(|r| r.label == 1).count() as f64 / view.len() as f64;
    if share < IMBALANCE_BAND.0 || share > IMBALANCE_BAND.1 {
        log::warn!(
            "{name} {} split is imbalanced ({:.1}% positive); accuracy is not chance-corrected",
            view.split(),
            100.0 * share
        );
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// How training splits are cut down for sample-efficiency runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsample {
    /// The first `n` records in file order.
    Prefix,
    /// `n` records drawn without replacement, kept in file order.
    Seeded(u64),
}

fn subsample(view: &SplitView, n: usize, mode: Subsample, name: &str) -> Result<SplitView> {
    if n > view.len() {
        return Err(Error::SizeExceedsSplit {
            dataset: name.to_string(),
            size: n,
            available: view.len(),
        });
    }
    let out = match mode {
        Subsample::Prefix => view.prefix(n),
        Subsample::Seeded(seed) => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ u64::from(view.dataset_id()).rotate_left(32));
            let mut idx = sample(&mut rng, view.len(), n).into_vec();
            idx.sort_unstable();
            SplitView {
                header: crate::store::ActivationHeader {
                    record_count: n as u64,
                    ..view.header
                },
                records: idx.into_iter().map(|i| view.records[i].clone()).collect(),
            }
        }
    };
    let pos = out.records.iter().filter(|r| r.label == 1).count();
    if pos == 0 || pos == out.len() {
        return Err(Error::in_dataset(name, Error::SingleClassInput(None)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneCell {
    pub hp: HyperParams,
    /// Mean accuracy over the tuning splits, as a fraction.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: HyperParams,
    pub cells: Vec<TuneCell>,
    pub n_train_datasets: usize,
}

/// Train-task datasets, optionally restricted to some tasks.
fn train_task_datasets<'m>(
    store: &'m ActivationStore,
    tasks: Option<&[String]>,
) -> Vec<&'m DatasetEntry> {
    store
        .manifest()
        .datasets
        .iter()
        .filter(|d| d.group == Group::TrainTask)
        .filter(|d| tasks.is_none_or(|t| t.contains(&d.task)))
        .collect()
}

/// Grid search over (num, k) scored on the test splits of the training
/// datasets only; ties go to the smaller num, then the smaller k.
pub fn tune_hyperparams(pipeline: &Pipeline<'_>, sweep: &SweepConfig) -> Result<TuneResult> {
    tune_on(
        pipeline,
        sweep,
        &train_task_datasets(pipeline.store, sweep.tasks_subset.as_deref()),
    )
    .map(|(r, _)| r)
}

fn tune_on(
    pipeline: &Pipeline<'_>,
    sweep: &SweepConfig,
    datasets: &[&DatasetEntry],
) -> Result<(TuneResult, AuditLog)> {
    if sweep.location_kind != pipeline.store.kind() {
        return Err(Error::InvalidConfig(format!(
            "sweep targets {} but the store holds {}",
            sweep.location_kind,
            pipeline.store.kind()
        )));
    }
    if datasets.is_empty() {
        return Err(Error::InvalidConfig(
            "no training datasets to tune on".into(),
        ));
    }
    let store = pipeline.store;
    let geometry = &store.manifest().model;
    let cells = sweep.cells(
        datasets.len(),
        geometry.grid_size(sweep.location_kind),
        geometry.location_dim(sweep.location_kind),
    )?;
    let owned_train: Vec<SplitView> = datasets
        .iter()
        .map(|d| {
            let v = store.view(SplitRef::new(d.id, Split::Train));
            match sweep.samples_per_dataset {
                Some(n) => subsample(v, n, Subsample::Prefix, &d.name),
                None => Ok(v.clone()),
            }
        })
        .collect::<Result<_>>()?;
    let train: Vec<&SplitView> = owned_train.iter().collect();
    let validation: Vec<&SplitView> = datasets
        .iter()
        .map(|d| store.view(SplitRef::new(d.id, Split::Validation)))
        .collect();
    let tuning: Vec<&SplitView> = datasets
        .iter()
        .map(|d| store.view(SplitRef::new(d.id, Split::Test)))
        .collect();
    if tuning.iter().any(|v| v.is_empty()) {
        return Err(Error::InvalidConfig(
            "training datasets need nonempty test splits for tuning".into(),
        ));
    }
    check_classes(store, &train)?;
    let scores = pipeline.score(&train, &validation)?;
    let results: Vec<TuneCell> = cells
        .par_iter()
        .map(|&hp| {
            let run = pipeline.fit_with_scores(&scores, &train, hp)?;
            let accuracy = pipeline.mean_accuracy(&run.model, &tuning)?;
            Ok(TuneCell { hp, accuracy })
        })
        .collect::<Result<_>>()?;
    let mut best = &results[0];
    for cell in &results[1..] {
        if cell.accuracy > best.accuracy {
            best = cell;
        }
    }
    log::info!(
        "tuned {} on {} datasets: num={} k={} ({:.2}%)",
        pipeline.probe_type,
        datasets.len(),
        best.hp.num,
        best.hp.k,
        100.0 * best.accuracy
    );
    let mut audit = AuditLog::default();
    audit.record_training(&train);
    audit.record_training(&validation);
    audit.record_training(&tuning);
    Ok((
        TuneResult {
            best: best.hp,
            cells: results.clone(),
            n_train_datasets: datasets.len(),
        },
        audit,
    ))
}

/// One evaluated (regime, probe, dataset) cell. Accuracy is in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: String,
    pub probe_type: String,
    pub task: String,
    pub dataset: String,
    pub n_test: usize,
    pub accuracy_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Task,
    Overall,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Task => "task",
            Scope::Overall => "overall",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub regime: String,
    pub probe_type: String,
    pub scope: Scope,
    pub name: String,
    pub accuracy_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

pub const ROWS_HEADER: [&str; 6] = [
    "regime",
    "probe_type",
    "task",
    "dataset",
    "n_test",
    "accuracy_percent",
];
pub const AGGREGATES_HEADER: [&str; 5] =
    ["regime", "probe_type", "scope", "name", "accuracy_percent"];

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

impl EvalReport {
    pub fn rows_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn aggregates_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(AGGREGATES_HEADER).map_err(csv_err)?;
        for a in &self.aggregates {
            w.write_record([
                a.regime.clone(),
                a.probe_type.clone(),
                a.scope.to_string(),
                a.name.clone(),
                format!("{:.2}", a.accuracy_percent),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }

    /// The aggregate for one (regime, probe) pair and scope name.
    pub fn aggregate(
        &self,
        regime: &str,
        probe_type: &str,
        scope: Scope,
        name: &str,
    ) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| {
                a.regime == regime
                    && a.probe_type == probe_type
                    && a.scope == scope
                    && a.name == name
            })
            .map(|a| a.accuracy_percent)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROWS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.regime.clone(),
            r.probe_type.clone(),
            r.task.clone(),
            r.dataset.clone(),
            r.n_test.to_string(),
            format!("{:.2}", r.accuracy_percent),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn rows_from_csv(reader: impl Read) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(ROWS_HEADER) {
        return Err(Error::Parse(format!(
            "expected header {}, found {}",
            ROWS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: {e}", &rec[i])))
            };
            Ok(ReportRow {
                regime: rec[0].to_string(),
                probe_type: rec[1].to_string(),
                task: rec[2].to_string(),
                dataset: rec[3].to_string(),
                n_test: rec[4]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("n_test {}: {e}", &rec[4])))?,
                accuracy_percent: num(5)?,
            })
        })
        .collect()
}

/// Sorts rows and computes per-task and overall unweighted means for every
/// (regime, probe) pair.
pub fn aggregate_report(rows: Vec<ReportRow>) -> Result<EvalReport> {
    let mut seen = BTreeSet::new();
    for r in &rows {
        if !seen.insert((r.regime.as_str(), r.probe_type.as_str(), r.dataset.as_str())) {
            return Err(Error::DuplicateCell(format!(
                "{} / {} / {}",
                r.regime, r.probe_type, r.dataset
            )));
        }
    }
    let mut rows = rows;
    rows.sort_by(|a, b| {
        (&a.regime, &a.probe_type, &a.task, &a.dataset).cmp(&(
            &b.regime,
            &b.probe_type,
            &b.task,
            &b.dataset,
        ))
    });
    let mut groups: BTreeMap<(&str, &str), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((&r.regime, &r.probe_type))
            .or_default()
            .entry(&r.task)
            .or_default()
            .push(r.accuracy_percent);
    }
    let mut aggregates = Vec::new();
    for ((regime, probe_type), tasks) in &groups {
        let mut all = Vec::new();
        for (task, accs) in tasks {
            aggregates.push(Aggregate {
                regime: regime.to_string(),
                probe_type: probe_type.to_string(),
                scope: Scope::Task,
                name: task.to_string(),
                accuracy_percent: mean(accs),
            });
            all.extend_from_slice(accs);
        }
        aggregates.push(Aggregate {
            regime: regime.to_string(),
            probe_type: probe_type.to_string(),
            scope: Scope::Overall,
            name: "average".into(),
            accuracy_percent: mean(&all),
        });
    }
    Ok(EvalReport { rows, aggregates })
}

/// Result of one regime run on one held-out dataset.
#[derive(Debug, Clone)]
pub struct RegimeRun {
    pub row: ReportRow,
    pub artifacts: RunArtifacts,
    pub audit: AuditLog,
}

/// Trains under `regime` and evaluates on `test_dataset`'s test split.
pub fn run_regime(
    pipeline: &Pipeline<'_>,
    regime: Regime,
    test_dataset: &str,
    hp: HyperParams,
) -> Result<RegimeRun> {
    let store = pipeline.store;
    let partition = partition_regime(store.manifest(), regime, test_dataset)?;
    let train = store.views(&partition.train);
    let validation = store.views(&partition.validation);
    let artifacts = pipeline.fit(&train, &validation, hp)?;
    let test = store.view(partition.test);
    let accuracy = pipeline.evaluate(&artifacts.model, test)?;
    let mut audit = AuditLog::default();
    audit.record_training(&train);
    audit.record_training(&validation);
    audit.record_evaluated(&[test]);
    audit.verify()?;
    let entry = store.manifest().dataset(test_dataset)?;
    Ok(RegimeRun {
        row: ReportRow {
            regime: regime.to_string(),
            probe_type: pipeline.probe_type.to_string(),
            task: entry.task.clone(),
            dataset: entry.name.clone(),
            n_test: test.len(),
            accuracy_percent: 100.0 * accuracy,
        },
        artifacts,
        audit,
    })
}

/// Tunes once, then runs every requested regime on every test-task dataset.
#[derive(Debug, Clone)]
pub struct FullRun {
    pub tune: TuneResult,
    pub report: EvalReport,
    pub runs: Vec<RegimeRun>,
    pub audit: AuditLog,
}

pub fn run_all(
    pipeline: &Pipeline<'_>,
    sweep: &SweepConfig,
    regimes: &[Regime],
) -> Result<FullRun> {
    let datasets = train_task_datasets(pipeline.store, sweep.tasks_subset.as_deref());
    let (tune, mut audit) = tune_on(pipeline, sweep, &datasets)?;
    let names: Vec<String> = pipeline
        .store
        .manifest()
        .test_task_datasets()
        .map(|d| d.name.clone())
        .collect();
    let jobs: Vec<(Regime, &str)> = regimes
        .iter()
        .flat_map(|&r| names.iter().map(move |n| (r, n.as_str())))
        .collect();
    let runs: Vec<RegimeRun> = jobs
        .par_iter()
        .map(|&(regime, name)| run_regime(pipeline, regime, name, tune.best))
        .collect::<Result<_>>()?;
    for run in &runs {
        audit.merge(&run.audit);
    }
    audit.verify()?;
    let report = aggregate_report(runs.iter().map(|r| r.row.clone()).collect())?;
    Ok(FullRun {
        tune,
        report,
        runs,
        audit,
    })
}

/// One point of an ablation curve. Accuracy is the mean over test-task
/// datasets, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: String,
    pub hp: HyperParams,
    pub accuracy_percent: f64,
}

pub fn ablation_csv(vary: &str, points: &[AblationPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([vary, "num", "k", "accuracy_percent"])
        .map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.value.clone(),
            p.hp.num.to_string(),
            p.hp.k.to_string(),
            format!("{:.2}", p.accuracy_percent),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn held_out_views(store: &ActivationStore) -> Vec<&SplitView> {
    store
        .manifest()
        .test_task_datasets()
        .map(|d| store.view(SplitRef::new(d.id, Split::Test)))
        .collect()
}

/// Cross-task fit on the given training datasets, scored on every test-task
/// dataset; the mean accuracy is returned in percent.
pub fn cross_task_accuracy(
    pipeline: &Pipeline<'_>,
    datasets: &[&DatasetEntry],
    train: &[&SplitView],
    hp: HyperParams,
) -> Result<(f64, RunArtifacts, AuditLog)> {
    let store = pipeline.store;
    let validation: Vec<&SplitView> = datasets
        .iter()
        .map(|d| store.view(SplitRef::new(d.id, Split::Validation)))
        .collect();
    let run = pipeline.fit(train, &validation, hp)?;
    let held_out = held_out_views(store);
    let acc = pipeline.mean_accuracy(&run.model, &held_out)?;
    let mut audit = AuditLog::default();
    audit.record_training(train);
    audit.record_training(&validation);
    audit.record_evaluated(&held_out);
    audit.verify()?;
    Ok((100.0 * acc, run, audit))
}

/// Cross-task accuracy as the number of training tasks grows; tasks enter
/// in manifest order and each point is re-tuned under the sweep (with the
/// `num ≤ 160 / t` cap when enabled).
pub fn ablate_task_count(
    pipeline: &Pipeline<'_>,
    task_counts: &[usize],
    sweep: &SweepConfig,
) -> Result<Vec<AblationPoint>> {
    let store = pipeline.store;
    let mut tasks: Vec<&str> = Vec::new();
    for d in store.manifest().train_task_datasets() {
        if !tasks.contains(&d.task.as_str()) {
            tasks.push(&d.task);
        }
    }
    task_counts
        .iter()
        .map(|&t| {
            if t == 0 || t > tasks.len() {
                return Err(Error::InvalidConfig(format!(
                    "task count {t} outside 1..={}",
                    tasks.len()
                )));
            }
            let chosen: Vec<String> = tasks[..t].iter().map(|s| s.to_string()).collect();
            let datasets = train_task_datasets(store, Some(&chosen));
            let (tuned, _) = tune_on(pipeline, sweep, &datasets)?;
            let train: Vec<&SplitView> = datasets
                .iter()
                .map(|d| store.view(SplitRef::new(d.id, Split::Train)))
                .collect();
            let (acc, _, _) = cross_task_accuracy(pipeline, &datasets, &train, tuned.best)?;
            log::info!(
                "t = {t}: {acc:.2}% (num={}, k={})",
                tuned.best.num,
                tuned.best.k
            );
            Ok(AblationPoint {
                value: t.to_string(),
                hp: tuned.best,
                accuracy_percent: acc,
            })
        })
        .collect()
}

/// Cross-task accuracy with every training split cut to `size` records.
pub fn ablate_split_size(
    pipeline: &Pipeline<'_>,
    sizes: &[usize],
    hp: HyperParams,
    mode: Subsample,
) -> Result<Vec<AblationPoint>> {
    let store = pipeline.store;
    let datasets = train_task_datasets(store, None);
    sizes
        .iter()
        .map(|&size| {
            let owned: Vec<SplitView> = datasets
                .iter()
                .map(|d| {
                    subsample(
                        store.view(SplitRef::new(d.id, Split::Train)),
                        size,
                        mode,
                        &d.name,
                    )
                })
                .collect::<Result<_>>()?;
            let train: Vec<&SplitView> = owned.iter().collect();
            let (acc, _, _) = cross_task_accuracy(pipeline, &datasets, &train, hp)?;
            log::info!("{size} samples per dataset: {acc:.2}%");
            Ok(AblationPoint {
                value: size.to_string(),
                hp,
                accuracy_percent: acc,
            })
        })
        .collect()
}

/// Tuned cross-task accuracy for the head pipeline and the layer pipeline.
pub fn compare_location_kinds(
    heads: &Pipeline<'_>,
    layers: Option<&Pipeline<'_>>,
    head_sweep: &SweepConfig,
    layer_sweep: &SweepConfig,
) -> Result<Vec<AblationPoint>> {
    let layers =
        layers.ok_or_else(|| Error::LocationKindAbsent(LocationKind::LayerResidual.to_string()))?;
    if heads.store.kind() != LocationKind::AttentionHead {
        return Err(Error::LocationKindAbsent(
            LocationKind::AttentionHead.to_string(),
        ));
    }
    if layers.store.kind() != LocationKind::LayerResidual {
        return Err(Error::LocationKindAbsent(
            LocationKind::LayerResidual.to_string(),
        ));
    }
    [(heads, head_sweep), (layers, layer_sweep)]
        .into_iter()
        .map(|(p, sweep)| {
            let datasets = train_task_datasets(p.store, sweep.tasks_subset.as_deref());
            let (tuned, _) = tune_on(p, sweep, &datasets)?;
            let train: Vec<&SplitView> = datasets
                .iter()
                .map(|d| p.store.view(SplitRef::new(d.id, Split::Train)))
                .collect();
            let (acc, _, _) = cross_task_accuracy(p, &datasets, &train, tuned.best)?;
            Ok(AblationPoint {
                value: p.store.kind().file_tag().to_string(),
                hp: tuned.best,
                accuracy_percent: acc,
            })
        })
        .collect()
}

/// Probability-baseline row for one regime and test dataset, calibrated on
/// `calibration`'s training split (or the default source for the regime).
pub fn run_probability_baseline(
    store: &ActivationStore,
    regime: Option<Regime>,
    calibration: Option<&str>,
    test_dataset: &str,
) -> Result<(ReportRow, baseline::ProbBaselineModel)> {
    let manifest = store.manifest();
    let target = manifest.dataset(test_dataset)?;
    let source = match (calibration, regime) {
        (Some(name), _) => manifest.dataset(name)?,
        (None, Some(r)) => baseline::default_calibration_source(manifest, r, test_dataset)?,
        (None, None) => {
            return Err(Error::InvalidConfig(
                "need a calibration dataset or a regime".into(),
            ))
        }
    };
    let calibration_view = store.view(SplitRef::new(source.id, Split::Train));
    let model = baseline::fit_baseline(calibration_view, source)?;
    let test = store.view(SplitRef::new(target.id, Split::Test));
    let eval = baseline::eval_baseline(&model, test)?;
    let regime_label = regime
        .map(|r| r.to_string())
        .unwrap_or_else(|| "custom".into());
    Ok((
        ReportRow {
            regime: regime_label,
            probe_type: "probability".into(),
            task: target.task.clone(),
            dataset: target.name.clone(),
            n_test: eval.scored,
            accuracy_percent: 100.0 * eval.accuracy,
        },
        model,
    ))
}

/// Scores externally produced predictions (`dataset,sample_id,predicted_label`)
/// against the test-split labels.
pub fn import_predictions(
    store: &ActivationStore,
    reader: impl Read,
    method: &str,
    regime: &str,
) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    if header
        .iter()
        .ne(["dataset", "sample_id", "predicted_label"])
    {
        return Err(Error::Parse(
            "expected header dataset,sample_id,predicted_label".into(),
        ));
    }
    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut labels: BTreeMap<String, BTreeMap<u64, u8>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let name = rec[0].to_string();
        if !labels.contains_key(&name) {
            let d = store.manifest().dataset(&name)?;
            let view = store.view(SplitRef::new(d.id, Split::Test));
            labels.insert(
                name.clone(),
                view.records
                    .iter()
                    .map(|r| (r.sample_id, r.label))
                    .collect(),
            );
        }
        let id: u64 = rec[1]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("sample_id {}: {e}", &rec[1])))?;
        let predicted: u8 = match rec[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Parse(format!("predicted_label {other:?}"))),
        };
        let truth = *labels[&name]
            .get(&id)
            .ok_or_else(|| Error::Parse(format!("{name} has no test sample {id}")))?;
        let t = tallies.entry(name).or_default();
        t.1 += 1;
        if truth == predicted {
            t.0 += 1;
        }
    }
    tallies
        .into_iter()
        .map(|(name, (correct, total))| {
            let d = store.manifest().dataset(&name)?;
            Ok(ReportRow {
                regime: regime.to_string(),
                probe_type: method.to_string(),
                task: d.task.clone(),
                dataset: name,
                n_test: total,
                accuracy_percent: 100.0 * correct as f64 / total as f64,
            })
        })
        .collect()
}
