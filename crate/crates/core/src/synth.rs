//! Synthetic activation corpora with a planted shared truth direction.
//!
//! Every dataset shares one label-aligned direction `u` spread over a few
//! "truth" heads, and additionally carries its own label-aligned spurious
//! direction `s_j` over a few other heads. Probes trained on one dataset
//! latch onto `s_j`; probes trained on many datasets are pushed towards
//! `u`, which is the only signal that transfers.
//!
//! Strengths are per-coordinate RMS shifts: a block of `D` planted
//! coordinates with strength `a` moves each class mean by `±a·√D·v` for a
//! unit vector `v`, so the Bayes accuracy of the truth block alone is
//! `Φ(α·√D / σ)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeModel;
use crate::store::{
    write_activation_file, ActivationHeader, ActivationRecord, ActivationStore, DatasetEntry,
    Group, LocationId, LocationKind, Manifest, ModelGeometry, Split, SplitEntry, SplitFiles,
    SplitRef, SplitView, FORMAT_VERSION, KIND_PLACEHOLDER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_datasets_train: usize,
    pub n_datasets_test: usize,
    /// Test datasets are spread round-robin over this many held-out tasks.
    pub n_test_tasks: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub truth_locations: usize,
    pub truth_dims: usize,
    pub truth_strength: f64,
    pub spurious_strength: f64,
    pub spurious_locations: usize,
    pub noise: f64,
    /// Per-token log-probability gap between correct and incorrect answers.
    pub logprob_gap: f64,
    pub logprob_noise: f64,
    /// Also emit layer-residual files (each layer = its heads concatenated).
    pub layer_residual: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_layers: 8,
            n_heads: 8,
            head_dim: 16,
            n_datasets_train: 12,
            n_datasets_test: 4,
            n_test_tasks: 2,
            train_samples: 200,
            validation_samples: 100,
            test_samples: 500,
            truth_locations: 3,
            truth_dims: 8,
            truth_strength: 0.6,
            spurious_strength: 1.0,
            spurious_locations: 2,
            noise: 1.0,
            logprob_gap: 0.5,
            logprob_noise: 1.0,
            layer_residual: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("noise", self.noise), ("logprob_noise", self.logprob_noise)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        // zero strengths switch a signal off
        let non_negative = [
            ("truth_strength", self.truth_strength),
            ("spurious_strength", self.spurious_strength),
            ("logprob_gap", self.logprob_gap),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::GeometryOverflow("zero-sized model".into()));
        }
        if self.n_layers > u16::MAX as usize || self.n_heads > u16::MAX as usize {
            return Err(Error::GeometryOverflow(
                "layer or head count exceeds u16".into(),
            ));
        }
        let grid = self.n_layers * self.n_heads;
        if self.truth_locations == 0 || self.truth_locations > grid {
            return Err(Error::GeometryOverflow(format!(
                "{} truth locations in a grid of {grid}",
                self.truth_locations
            )));
        }
        if self.truth_dims == 0 || self.truth_dims > self.head_dim {
            return Err(Error::GeometryOverflow(format!(
                "{} truth dims in heads of {}",
                self.truth_dims, self.head_dim
            )));
        }
        if self.spurious_locations == 0 || self.spurious_locations > grid {
            return Err(Error::GeometryOverflow(format!(
                "{} spurious locations in a grid of {grid}",
                self.spurious_locations
            )));
        }
        if self.n_datasets_train == 0 || self.n_datasets_test == 0 {
            return Err(Error::InvalidConfig(
                "need at least one train and one test dataset".into(),
            ));
        }
        if self.n_test_tasks == 0 || self.n_test_tasks > self.n_datasets_test {
            return Err(Error::InvalidConfig(
                "n_test_tasks must be in 1..=n_datasets_test".into(),
            ));
        }
        if self.train_samples < 2 || self.validation_samples < 2 || self.test_samples < 2 {
            return Err(Error::InvalidConfig(
                "every split needs at least two samples".into(),
            ));
        }
        if self.train_samples > crate::store::MAX_TRAIN_COUNT
            || self.test_samples > crate::store::MAX_TEST_COUNT
        {
            return Err(Error::InvalidConfig(
                "split sizes exceed manifest limits".into(),
            ));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry {
            name: "synthetic".into(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            hidden_dim: self.n_heads * self.head_dim,
        }
    }

    pub fn n_datasets(&self) -> usize {
        self.n_datasets_train + self.n_datasets_test
    }

    /// Closed-form accuracy of the Bayes classifier `sign(u·h)` on the truth block.
    pub fn truth_bayes_accuracy(&self) -> f64 {
        let planted = (self.truth_locations * self.truth_dims) as f64;
        normal_cdf(self.truth_strength * planted.sqrt() / self.noise)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One planted coordinate and its unit-vector component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCoord {
    #[serde(flatten)]
    pub location: LocationId,
    pub dim: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousDirection {
    pub dataset: String,
    pub locations: Vec<LocationId>,
    pub coords: Vec<PlantedCoord>,
}

/// Ground truth of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: SynthConfig,
    pub truth_locations: Vec<LocationId>,
    /// Unit vector `u` over the planted truth coordinates.
    pub truth: Vec<PlantedCoord>,
    pub spurious: Vec<SpuriousDirection>,
    pub logprob_gap: f64,
}

impl Sidecar {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Accuracy of `sign(u·h_truth)` on a head view, ignoring all other coordinates.
    pub fn bayes_accuracy(&self, view: &SplitView) -> Result<f64> {
        if view.is_empty() {
            return Err(Error::EmptyView);
        }
        let offsets = self
            .truth
            .iter()
            .map(|c| Ok(view.location_offset(c.location)? + c.dim))
            .collect::<Result<Vec<_>>>()?;
        let correct = view
            .records
            .iter()
            .filter(|r| {
                let s: f64 = self
                    .truth
                    .iter()
                    .zip(&offsets)
                    .map(|(c, &o)| c.value * f64::from(r.activations[o]))
                    .sum();
                u8::from(s >= 0.0) == r.label
            })
            .count();
        Ok(correct as f64 / view.len() as f64)
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub sidecar: Sidecar,
    views: BTreeMap<(LocationKind, SplitRef), SplitView>,
}

impl SynthCorpus {
    pub fn store(&self, kind: LocationKind) -> Result<ActivationStore> {
        if !self.manifest.has_kind(kind) {
            return Err(Error::LocationKindAbsent(kind.to_string()));
        }
        let views = self
            .views
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, v)| v.clone());
        ActivationStore::from_views(self.manifest.clone(), kind, views)
    }

    pub fn view(&self, kind: LocationKind, split: SplitRef) -> Option<&SplitView> {
        self.views.get(&(kind, split))
    }

    /// Writes the manifest, every activation file, and the sidecar into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthPaths> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        manifest.base_dir = dir.to_path_buf();
        for ((kind, split), view) in &self.views {
            let d = manifest.dataset_by_id(split.dataset_id)?;
            let path = manifest.split_path(d, split.split, *kind);
            write_activation_file(&path, &view.header, &view.records)?;
        }
        let manifest_path = dir.join("manifest.toml");
        manifest.save(&manifest_path)?;
        let sidecar_path = dir.join("sidecar.json");
        fs::write(&sidecar_path, self.sidecar.to_json()?)
            .map_err(|e| Error::io(&sidecar_path, e))?;
        Ok(SynthPaths {
            manifest: manifest_path,
            sidecar: sidecar_path,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub sidecar: PathBuf,
}

pub fn generate_to(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthPaths> {
    generate(cfg)?.write(dir)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, dataset: u64, split: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ splitmix(dataset.wrapping_mul(8).wrapping_add(split).wrapping_add(1)),
    )
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn pick_locations(rng: &mut ChaCha8Rng, cfg: &SynthConfig, count: usize) -> Vec<LocationId> {
    let grid = cfg.n_layers * cfg.n_heads;
    let mut picked: Vec<LocationId> = sample(rng, grid, count)
        .into_iter()
        .map(|i| LocationId::head(i / cfg.n_heads, i % cfg.n_heads))
        .collect();
    picked.sort();
    picked
}

struct DatasetPlan {
    entry: DatasetEntry,
    spurious: SpuriousDirection,
}

/// Generates a corpus fully determined by `cfg` (including its seed).
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let geometry = cfg.geometry();
    let mut rng = stream(cfg.seed, u64::MAX, 0);

    let truth_locations = pick_locations(&mut rng, cfg, cfg.truth_locations);
    let mut truth = Vec::new();
    for &loc in &truth_locations {
        let mut dims: Vec<usize> = sample(&mut rng, cfg.head_dim, cfg.truth_dims).into_vec();
        dims.sort_unstable();
        truth.extend(dims.into_iter().map(|dim| PlantedCoord {
            location: loc,
            dim,
            value: 0.0,
        }));
    }
    let u = unit_gaussian(&mut rng, truth.len());
    for (c, v) in truth.iter_mut().zip(u) {
        c.value = v;
    }
    let truth_lookup: BTreeMap<(LocationId, usize), f64> = truth
        .iter()
        .map(|c| ((c.location, c.dim), c.value))
        .collect();

    let kinds = if cfg.layer_residual {
        vec![LocationKind::AttentionHead, LocationKind::LayerResidual]
    } else {
        vec![LocationKind::AttentionHead]
    };
    let file_for = |name: &str, split: Split| {
        if kinds.len() > 1 {
            format!("{name}_{split}.{KIND_PLACEHOLDER}.actv")
        } else {
            format!("{name}_{split}.actv")
        }
    };

    let mut plans = Vec::with_capacity(cfg.n_datasets());
    for j in 0..cfg.n_datasets() {
        let (name, task, group) = if j < cfg.n_datasets_train {
            (
                format!("synth-train-{j:02}"),
                format!("train-task-{j:02}"),
                Group::TrainTask,
            )
        } else {
            let t = j - cfg.n_datasets_train;
            (
                format!("synth-test-{t:02}"),
                format!("heldout-task-{}", t % cfg.n_test_tasks),
                Group::TestTask,
            )
        };
        let locations = pick_locations(&mut rng, cfg, cfg.spurious_locations);
        let coords_idx: Vec<(LocationId, usize)> = locations
            .iter()
            .flat_map(|&l| (0..cfg.head_dim).map(move |d| (l, d)))
            .collect();
        let mut s = unit_gaussian(&mut rng, coords_idx.len());
        // keep s_j orthogonal to u wherever the two share coordinates
        let overlap: Vec<f64> = coords_idx
            .iter()
            .map(|key| truth_lookup.get(key).copied().unwrap_or(0.0))
            .collect();
        let uu: f64 = overlap.iter().map(|x| x * x).sum();
        if uu > 0.0 {
            let proj = s.iter().zip(&overlap).map(|(a, b)| a * b).sum::<f64>() / uu;
            s.iter_mut().zip(&overlap).for_each(|(a, b)| *a -= proj * b);
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            s.iter_mut().for_each(|a| *a /= norm);
        }
        let coords = coords_idx
            .into_iter()
            .zip(s)
            .map(|((location, dim), value)| PlantedCoord {
                location,
                dim,
                value,
            })
            .collect();
        let counts = [cfg.train_samples, cfg.validation_samples, cfg.test_samples];
        let entry = DatasetEntry {
            id: j as u32,
            name: name.clone(),
            task,
            group,
            long_answer: j % 3 == 2,
            splits: SplitFiles {
                train: SplitEntry {
                    file: file_for(&name, Split::Train),
                    count: counts[0],
                },
                validation: SplitEntry {
                    file: file_for(&name, Split::Validation),
                    count: counts[1],
                },
                test: SplitEntry {
                    file: file_for(&name, Split::Test),
                    count: counts[2],
                },
            },
        };
        plans.push(DatasetPlan {
            entry,
            spurious: SpuriousDirection {
                dataset: name,
                locations,
                coords,
            },
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        validation_count: Some(cfg.validation_samples),
        model: geometry.clone(),
        location_kinds: kinds.clone(),
        datasets: plans.iter().map(|p| p.entry.clone()).collect(),
        base_dir: PathBuf::new(),
    };
    manifest.validate()?;

    let truth_scale = cfg.truth_strength * (truth.len() as f64).sqrt();
    let spurious_scale = |n: usize| cfg.spurious_strength * (n as f64).sqrt();
    let head_offset = |l: LocationId| (l.layer * cfg.n_heads + l.head) * cfg.head_dim;
    let width = cfg.n_layers * cfg.n_heads * cfg.head_dim;

    let mut views = BTreeMap::new();
    for (j, plan) in plans.iter().enumerate() {
        let s_scale = spurious_scale(plan.spurious.coords.len());
        for split in Split::ALL {
            let count = plan.entry.splits.get(split).count;
            let mut rng = stream(cfg.seed, j as u64, split as u64);
            let mut records = Vec::with_capacity(count);
            for i in 0..count {
                let label = (i % 2) as u8;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let mut x: Vec<f64> = (0..width)
                    .map(|_| cfg.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for c in &truth {
                    x[head_offset(c.location) + c.dim] += sign * truth_scale * c.value;
                }
                for c in &plan.spurious.coords {
                    x[head_offset(c.location) + c.dim] += sign * s_scale * c.value;
                }
                let tokens: u32 = if plan.entry.long_answer {
                    rng.random_range(4..=12)
                } else {
                    1
                };
                let jitter: f64 = rng.sample(StandardNormal);
                let per_token = -1.0 + sign * cfg.logprob_gap + cfg.logprob_noise * jitter;
                records.push(ActivationRecord {
                    sample_id: (j as u64) << 32 | (split as u64) << 24 | i as u64,
                    label,
                    answer_token_count: tokens,
                    answer_logprob_sum: per_token * f64::from(tokens),
                    activations: x.into_iter().map(|v| v as f32).collect(),
                });
            }
            for &kind in &kinds {
                let header = ActivationHeader {
                    record_count: count as u64,
                    ..ActivationHeader::new(j as u32, split, kind, &geometry, true)?
                };
                // a layer's residual is the concatenation of its heads, so the
                // flat layout is shared by both kinds
                views.insert(
                    (kind, SplitRef::new(j as u32, split)),
                    SplitView {
                        header,
                        records: records.clone(),
                    },
                );
            }
        }
    }

    let sidecar = Sidecar {
        config: cfg.clone(),
        truth_locations,
        truth,
        spurious: plans.into_iter().map(|p| p.spurious).collect(),
        logprob_gap: cfg.logprob_gap,
    };
    Ok(SynthCorpus {
        manifest,
        sidecar,
        views,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    /// Fraction of planted truth locations present in the feature map.
    pub truth_recall: f64,
    /// Cosine between the raw-space weights on the planted coordinates and `u`.
    pub cosine: f64,
}

pub fn recovery_metrics(model: &ProbeModel, sidecar: &Sidecar) -> Result<RecoveryMetrics> {
    let cfg = &sidecar.config;
    let geometry = cfg.geometry();
    if sidecar.truth.is_empty() {
        return Err(Error::SidecarMismatch(
            "sidecar lists no truth coordinates".into(),
        ));
    }
    for e in &model.feature_map {
        if !geometry.contains(e.location) {
            return Err(Error::SidecarMismatch(format!(
                "model location {} outside the sidecar geometry",
                e.location
            )));
        }
        let limit = geometry.location_dim(e.location.kind);
        if e.dims.iter().any(|&d| d >= limit) {
            return Err(Error::SidecarMismatch(format!(
                "model dims of {} exceed {limit}",
                e.location
            )));
        }
    }
    let (raw, _) = model.probe.raw_weights();
    let mut weight_at: BTreeMap<(LocationId, usize), f64> = BTreeMap::new();
    let mut offset = 0;
    for e in &model.feature_map {
        for (j, &d) in e.dims.iter().enumerate() {
            weight_at.insert((e.location, d), raw[offset + j]);
        }
        offset += e.dims.len();
    }
    // a planted head coordinate as addressed by a feature map of `kind`
    let address = |c: &PlantedCoord, kind: LocationKind| match kind {
        LocationKind::AttentionHead => (c.location, c.dim),
        LocationKind::LayerResidual => (
            LocationId::layer(c.location.layer),
            c.location.head * cfg.head_dim + c.dim,
        ),
    };
    let kind = model
        .feature_map
        .first()
        .map(|e| e.location.kind)
        .unwrap_or(LocationKind::AttentionHead);
    let present: std::collections::BTreeSet<LocationId> =
        model.feature_map.iter().map(|e| e.location).collect();
    let hits = sidecar
        .truth_locations
        .iter()
        .filter(|&&l| {
            let probe_loc = match kind {
                LocationKind::AttentionHead => l,
                LocationKind::LayerResidual => LocationId::layer(l.layer),
            };
            present.contains(&probe_loc)
        })
        .count();
    let projected: Vec<f64> = sidecar
        .truth
        .iter()
        .map(|c| weight_at.get(&address(c, kind)).copied().unwrap_or(0.0))
        .collect();
    let u: Vec<f64> = sidecar.truth.iter().map(|c| c.value).collect();
    let norm_p = projected.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = if norm_p == 0.0 {
        0.0
    } else {
        crate::probe::dot(&projected, &u) / (norm_p * norm_u)
    };
    Ok(RecoveryMetrics {
        truth_recall: hits as f64 / sidecar.truth_locations.len() as f64,
        cosine,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Chebyshev fit of erfc, fractional error below 1.2e-7 everywhere.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87
                                        + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_layers: 2,
            n_heads: 3,
            head_dim: 4,
            n_datasets_train: 2,
            n_datasets_test: 2,
            train_samples: 20,
            validation_samples: 10,
            test_samples: 10,
            truth_locations: 2,
            truth_dims: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.sidecar, b.sidecar);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.views, c.views);
    }

    #[test]
    fn planted_vectors_are_unit_and_orthogonal_when_co_located() {
        let cfg = SynthConfig {
            n_layers: 1,
            n_heads: 2,
            truth_locations: 2,
            spurious_locations: 2,
            ..small()
        };
        let corpus = generate(&cfg).unwrap();
        let u: BTreeMap<_, _> = corpus
            .sidecar
            .truth
            .iter()
            .map(|c| ((c.location, c.dim), c.value))
            .collect();
        let norm: f64 = u.values().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        for s in &corpus.sidecar.spurious {
            let n: f64 = s.coords.iter().map(|c| c.value * c.value).sum();
            assert!((n - 1.0).abs() < 1e-12);
            let overlap: f64 = s
                .coords
                .iter()
                .map(|c| c.value * u.get(&(c.location, c.dim)).copied().unwrap_or(0.0))
                .sum();
            assert!(overlap.abs() < 1e-12);
        }
    }

    #[test]
    fn labels_alternate_and_balance() {
        let corpus = generate(&small()).unwrap();
        let v = corpus
            .view(LocationKind::AttentionHead, SplitRef::new(0, Split::Train))
            .unwrap();
        let labels = v.labels();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10);
        assert_eq!(&labels[..4], &[0, 1, 0, 1]);
    }

    #[test]
    fn overflow_rejected() {
        let cfg = SynthConfig {
            truth_locations: 7,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::GeometryOverflow(_))));
        let cfg = SynthConfig {
            truth_dims: 5,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::GeometryOverflow(_))));
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.0) - 0.841_344_746).abs() < 1e-6);
        assert!((normal_cdf(-1.959_963_985) - 0.025).abs() < 1e-6);
    }

    #[test]
    fn config_from_toml_with_defaults() {
        let cfg = SynthConfig::from_toml("seed = 7\nn_datasets_train = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n_datasets_train, 3);
        assert_eq!(cfg.head_dim, 16);
        assert!(SynthConfig::from_toml("bogus = 1").is_err());
    }
}
