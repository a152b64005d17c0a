use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use truthprobe::experiment::{
    ablate_split_size, ablate_task_count, ablation_csv, aggregate_report, compare_location_kinds,
    import_predictions, rows_from_csv, rows_to_csv, run_all, run_probability_baseline, run_regime,
    tune_hyperparams, Pipeline, ReportRow, Subsample, SweepConfig,
};
use truthprobe::select::{score_all_locations, select_top_num, LocationScoreTable};
use truthprobe::synth::{generate_to, recovery_metrics, Sidecar, SynthConfig};
use truthprobe::{
    ActivationStore, HyperParams, LocationKind, Manifest, ProbeModel, ProbeType, Regime, Split,
    SplitRef, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "truthprobe",
    version,
    about = "Linear truthfulness probes over activation dumps"
)]
struct Cli {
    /// Seed for every seeded step (synthetic generation, random subsampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifest, activation files and sidecar.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-location preliminary probe accuracies on every validation split.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "lr")]
        probe: ProbeType,
        #[arg(long, default_value = "head")]
        kind: LocationKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-split top-num location selection from a score table.
    Select {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the full pipeline for one regime and held-out dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        test_dataset: String,
        #[arg(long, default_value = "lr")]
        probe: ProbeType,
        #[arg(long, default_value = "head")]
        kind: LocationKind,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search over (num, k) on the training tasks.
    Tune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "lr")]
        probe: ProbeType,
        #[arg(long, default_value = "head")]
        kind: LocationKind,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [1, 2, 4])]
        num_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        k_grid: Vec<usize>,
        #[arg(long)]
        cap_rule: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a saved model on a dataset's test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Regime label written into the report row.
        #[arg(long, default_value = "custom")]
        regime: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer-probability baseline with a fitted threshold.
    BaselineProb {
        #[arg(long)]
        manifest: PathBuf,
        /// Calibration dataset; defaults to the regime's standard source.
        #[arg(long)]
        calibrate: Option<String>,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out accuracy as one factor varies.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vary: Vary,
        /// Task counts or per-dataset sample sizes; unused for `kind`.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        grid: Vec<usize>,
        #[arg(long, default_value = "lr")]
        probe: ProbeType,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [1, 2, 4])]
        num_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        k_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        layer_k_grid: Vec<usize>,
        #[arg(long)]
        cap_rule: bool,
        /// Fixed hyperparameters for `samples`.
        #[arg(long)]
        num: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Draw subsamples at random (with --seed) instead of taking prefixes.
        #[arg(long)]
        random_subsample: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune once and evaluate every regime on every held-out dataset.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "lr")]
        probe: ProbeType,
        #[arg(long, default_value = "head")]
        kind: LocationKind,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [1, 2, 4])]
        num_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        k_grid: Vec<usize>,
        #[arg(long)]
        cap_rule: bool,
        #[arg(long, value_delimiter = ',', num_args = 1..,
              default_values_t = [Regime::CrossTask, Regime::CrossDomain, Regime::InDomain])]
        regimes: Vec<Regime>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory for rows, aggregates, hyperparameters and artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task and overall averages over report rows.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        rows: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score external predictions (dataset,sample_id,predicted_label).
    ImportPreds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "custom")]
        regime: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recovery of the planted truth direction by saved models.
    VerifySynth {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Vary {
    Tasks,
    Samples,
    Kind,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    log::info!("resolved configuration: {cli:?}");
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn open(manifest: &Path, kind: LocationKind) -> Result<ActivationStore> {
    let m = Manifest::load(manifest)?;
    Ok(ActivationStore::open(&m, kind)?)
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))
}

/// `model.json` → `model.<suffix>.json` next to it.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = TrainConfig::default();
    match cli.command {
        Command::Synth { config, out_dir } => {
            let mut synth = match config {
                Some(p) => SynthConfig::from_toml(&read(&p)?)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = cli.seed {
                synth.seed = seed;
            }
            log::info!("synthetic config: {synth:?}");
            let paths = generate_to(&synth, &out_dir)?;
            println!("{}", paths.manifest.display());
        }
        Command::Score {
            manifest,
            probe,
            kind,
            out,
        } => {
            let store = open(&manifest, kind)?;
            let m = store.manifest();
            let train: Vec<_> = m
                .train_task_datasets()
                .map(|d| store.view(SplitRef::new(d.id, Split::Train)))
                .collect();
            let validation: Vec<_> = m
                .train_task_datasets()
                .map(|d| {
                    (
                        store.view(SplitRef::new(d.id, Split::Validation)),
                        d.name.as_str(),
                    )
                })
                .collect();
            let table =
                score_all_locations(&train, &validation, &m.model.locations(kind), probe, &cfg)?;
            write_out(&out, &table.to_json()?)?;
        }
        Command::Select { scores, num, out } => {
            let table = LocationScoreTable::from_json(&read(&scores)?)?;
            let plan = select_top_num(&table, num)?;
            log::info!("selected {} locations", plan.len());
            write_out(&out, &plan.to_json()?)?;
        }
        Command::Train {
            manifest,
            regime,
            test_dataset,
            probe,
            kind,
            num,
            k,
            out,
        } => {
            let store = open(&manifest, kind)?;
            let pipeline = Pipeline::new(&store, probe, cfg);
            let hp = HyperParams {
                num,
                k,
                location_kind: kind,
            };
            let run = run_regime(&pipeline, regime, &test_dataset, hp)?;
            log::info!(
                "{} {} on {}: {:.2}%",
                regime,
                probe,
                test_dataset,
                run.row.accuracy_percent
            );
            write_out(&out, &run.artifacts.model.to_json()?)?;
            write_out(&sibling(&out, "scores"), &run.artifacts.scores.to_json()?)?;
            write_out(&sibling(&out, "plan"), &run.artifacts.plan.to_json()?)?;
        }
        Command::Tune {
            manifest,
            probe,
            kind,
            num_grid,
            k_grid,
            cap_rule,
            jobs,
            out,
        } => {
            let store = open(&manifest, kind)?;
            let pipeline = Pipeline::new(&store, probe, cfg);
            let sweep = sweep_for(kind, num_grid, k_grid, cap_rule);
            let result = thread_pool(jobs)?.install(|| tune_hyperparams(&pipeline, &sweep))?;
            write_out(&out, &serde_json::to_string_pretty(&result)?)?;
        }
        Command::Eval {
            manifest,
            model,
            dataset,
            regime,
            out,
        } => {
            let model = ProbeModel::from_json(&read(&model)?)?;
            let kind = model
                .feature_map
                .first()
                .map(|e| e.location.kind)
                .ok_or_else(|| anyhow!("model has an empty feature map"))?;
            let store = open(&manifest, kind)?;
            let entry = store.manifest().dataset(&dataset)?;
            let view = store.view(SplitRef::new(entry.id, Split::Test));
            let pipeline = Pipeline::new(&store, model.probe.probe_type, cfg);
            let acc = pipeline.evaluate(&model, view)?;
            let row = ReportRow {
                regime,
                probe_type: model.probe.probe_type.to_string(),
                task: entry.task.clone(),
                dataset: entry.name.clone(),
                n_test: view.len(),
                accuracy_percent: 100.0 * acc,
            };
            log::info!("{dataset}: {:.2}%", row.accuracy_percent);
            write_out(&out, &rows_to_csv(&[row])?)?;
        }
        Command::BaselineProb {
            manifest,
            calibrate,
            regime,
            dataset,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let kind = m.location_kinds[0];
            let store = ActivationStore::open(&m, kind)?;
            let (row, model) =
                run_probability_baseline(&store, regime, calibrate.as_deref(), &dataset)?;
            log::info!(
                "threshold {} calibrated on {} ({:.2}%)",
                model.threshold,
                model.calibration_source,
                100.0 * model.calibration_accuracy
            );
            write_out(&out, &rows_to_csv(&[row])?)?;
        }
        Command::Ablate {
            manifest,
            vary,
            grid,
            probe,
            num_grid,
            k_grid,
            layer_k_grid,
            cap_rule,
            num,
            k,
            random_subsample,
            jobs,
            out,
        } => {
            let pool = thread_pool(jobs)?;
            let heads = open(&manifest, LocationKind::AttentionHead)?;
            let pipeline = Pipeline::new(&heads, probe, cfg.clone());
            let table = match vary {
                Vary::Tasks => {
                    if grid.is_empty() || k_grid.is_empty() {
                        bail!("--vary tasks needs --grid and --k-grid");
                    }
                    let sweep = sweep_for(LocationKind::AttentionHead, num_grid, k_grid, cap_rule);
                    let points = pool.install(|| ablate_task_count(&pipeline, &grid, &sweep))?;
                    ablation_csv("tasks", &points)?
                }
                Vary::Samples => {
                    let (Some(num), Some(k)) = (num, k) else {
                        bail!("--vary samples needs fixed --num and --k");
                    };
                    if grid.is_empty() {
                        bail!("--vary samples needs --grid");
                    }
                    let hp = HyperParams {
                        num,
                        k,
                        location_kind: LocationKind::AttentionHead,
                    };
                    let mode = if random_subsample {
                        Subsample::Seeded(cli.seed.unwrap_or(0))
                    } else {
                        Subsample::Prefix
                    };
                    let points = pool.install(|| ablate_split_size(&pipeline, &grid, hp, mode))?;
                    ablation_csv("samples", &points)?
                }
                Vary::Kind => {
                    if k_grid.is_empty() || layer_k_grid.is_empty() {
                        bail!("--vary kind needs --k-grid and --layer-k-grid");
                    }
                    let m = heads.manifest();
                    let layers = if m.has_kind(LocationKind::LayerResidual) {
                        Some(ActivationStore::open(m, LocationKind::LayerResidual)?)
                    } else {
                        None
                    };
                    let layer_pipeline = layers
                        .as_ref()
                        .map(|s| Pipeline::new(s, probe, cfg.clone()));
                    let head_sweep =
                        sweep_for(LocationKind::AttentionHead, num_grid, k_grid, cap_rule);
                    let layer_sweep =
                        sweep_for(LocationKind::LayerResidual, vec![1], layer_k_grid, false);
                    let points = pool.install(|| {
                        compare_location_kinds(
                            &pipeline,
                            layer_pipeline.as_ref(),
                            &head_sweep,
                            &layer_sweep,
                        )
                    })?;
                    ablation_csv("kind", &points)?
                }
            };
            write_out(&out, &table)?;
        }
        Command::Run {
            manifest,
            probe,
            kind,
            num_grid,
            k_grid,
            cap_rule,
            regimes,
            jobs,
            out,
        } => {
            let store = open(&manifest, kind)?;
            let pipeline = Pipeline::new(&store, probe, cfg);
            let sweep = sweep_for(kind, num_grid, k_grid, cap_rule);
            let run = thread_pool(jobs)?.install(|| run_all(&pipeline, &sweep, &regimes))?;
            write_out(&out.join("rows.csv"), &run.report.rows_csv()?)?;
            write_out(&out.join("aggregates.csv"), &run.report.aggregates_csv()?)?;
            write_out(
                &out.join("hp.json"),
                &serde_json::to_string_pretty(&run.tune)?,
            )?;
            for r in &run.runs {
                r.artifacts.persist(
                    out.join("artifacts"),
                    &format!("{}.{}", r.row.regime, r.row.dataset),
                )?;
            }
        }
        Command::Report { rows, out } => {
            let mut all = Vec::new();
            for path in &rows {
                let text = read(path)?;
                all.extend(
                    rows_from_csv(text.as_bytes())
                        .with_context(|| format!("parsing {}", path.display()))?,
                );
            }
            let report = aggregate_report(all)?;
            for a in &report.aggregates {
                log::info!(
                    "{} {} {} {}: {:.2}",
                    a.regime,
                    a.probe_type,
                    a.scope,
                    a.name,
                    a.accuracy_percent
                );
            }
            write_out(&out, &report.aggregates_csv()?)?;
        }
        Command::ImportPreds {
            manifest,
            preds,
            method,
            regime,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let store = ActivationStore::open(&m, m.location_kinds[0])?;
            let text = read(&preds)?;
            let rows = import_predictions(&store, text.as_bytes(), &method, &regime)?;
            write_out(&out, &rows_to_csv(&rows)?)?;
        }
        Command::VerifySynth {
            run_dir,
            sidecar,
            out,
        } => {
            let sidecar = Sidecar::from_json(&read(&sidecar)?)?;
            let mut models: Vec<PathBuf> = fs::read_dir(&run_dir)
                .with_context(|| format!("listing {}", run_dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n == "model.json" || n.ends_with(".model.json"))
                })
                .collect();
            models.sort();
            if models.is_empty() {
                bail!("no model files under {}", run_dir.display());
            }
            let mut metrics = serde_json::Map::new();
            for path in &models {
                let model = ProbeModel::from_json(&read(path)?)?;
                let m = recovery_metrics(&model, &sidecar)?;
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                log::info!(
                    "{name}: recall {:.3}, cosine {:.3}",
                    m.truth_recall,
                    m.cosine
                );
                metrics.insert(name, serde_json::to_value(m)?);
            }
            let text = serde_json::to_string_pretty(&metrics)?;
            match out {
                Some(p) => write_out(&p, &text)?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn sweep_for(
    kind: LocationKind,
    num_grid: Vec<usize>,
    k_grid: Vec<usize>,
    cap_rule: bool,
) -> SweepConfig {
    let base = match kind {
        LocationKind::AttentionHead => SweepConfig::heads(num_grid, k_grid),
        LocationKind::LayerResidual => SweepConfig::layers(k_grid),
    };
    SweepConfig { cap_rule, ..base }
}
