//! Activation manifest, binary activation files, and regime partitioning.
//!
//! A manifest is a TOML document naming the model geometry and every
//! dataset with its three split files. Each split file holds the
//! last-token activations of one location kind for one (dataset, split):
//!
//! ```text
//! "ACTV" | version u32 | dataset_id u32 | split u8 | location_kind u8
//!        | n_layers u16 | n_per_layer u16 | dim u32 | flags u32 | record_count u64
//! record: sample_id u64 | label u8 | reserved [u8; 3] | answer_token_count u32
//!        | answer_logprob_sum f64 | activations [f32; n_layers * n_per_layer * dim]
//! ```
//!
//! All integers and floats are little-endian. Activations are laid out
//! layer-major, then head-major, then by dimension.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::FeatureMatrix;

pub const MAGIC: &[u8; 4] = b"ACTV";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 34;
const RECORD_FIXED_BYTES: usize = 24;

pub const MAX_TRAIN_COUNT: usize = 800;
pub const DEFAULT_VALIDATION_COUNT: usize = 100;
pub const MAX_TEST_COUNT: usize = 5000;

/// Placeholder in manifest file paths, replaced by [`LocationKind::file_tag`].
pub const KIND_PLACEHOLDER: &str = "{kind}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationKind {
    AttentionHead,
    LayerResidual,
}

impl LocationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LocationKind::AttentionHead => "attention_head",
            LocationKind::LayerResidual => "layer_residual",
        }
    }

    /// Short tag substituted for `{kind}` in manifest paths.
    pub fn file_tag(self) -> &'static str {
        match self {
            LocationKind::AttentionHead => "head",
            LocationKind::LayerResidual => "layer",
        }
    }

    fn code(self) -> u8 {
        match self {
            LocationKind::AttentionHead => 0,
            LocationKind::LayerResidual => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LocationKind::AttentionHead),
            1 => Some(LocationKind::LayerResidual),
            _ => None,
        }
    }
}

impl fmt::Display for LocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_head" | "head" => Ok(LocationKind::AttentionHead),
            "layer_residual" | "layer" => Ok(LocationKind::LayerResidual),
            other => Err(Error::Parse(format!("unknown location kind {other:?}"))),
        }
    }
}

/// An addressable hidden-state site. Ordered by (kind, layer, head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocationId {
    pub kind: LocationKind,
    pub layer: usize,
    pub head: usize,
}

impl LocationId {
    pub fn head(layer: usize, head: usize) -> Self {
        LocationId {
            kind: LocationKind::AttentionHead,
            layer,
            head,
        }
    }

    pub fn layer(layer: usize) -> Self {
        LocationId {
            kind: LocationKind::LayerResidual,
            layer,
            head: 0,
        }
    }
}

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LocationKind::AttentionHead => write!(f, "L{}H{}", self.layer, self.head),
            LocationKind::LayerResidual => write!(f, "L{}", self.layer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    TrainTask,
    TestTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub name: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
}

impl ModelGeometry {
    /// Locations per layer for a kind: heads, or the single residual vector.
    pub fn per_layer(&self, kind: LocationKind) -> usize {
        match kind {
            LocationKind::AttentionHead => self.n_heads,
            LocationKind::LayerResidual => 1,
        }
    }

    pub fn location_dim(&self, kind: LocationKind) -> usize {
        match kind {
            LocationKind::AttentionHead => self.head_dim,
            LocationKind::LayerResidual => self.hidden_dim,
        }
    }

    pub fn grid_size(&self, kind: LocationKind) -> usize {
        self.n_layers * self.per_layer(kind)
    }

    /// Every location of `kind` in ascending order.
    pub fn locations(&self, kind: LocationKind) -> Vec<LocationId> {
        let per_layer = self.per_layer(kind);
        (0..self.n_layers)
            .flat_map(|layer| (0..per_layer).map(move |head| LocationId { kind, layer, head }))
            .collect()
    }

    pub fn contains(&self, loc: LocationId) -> bool {
        loc.layer < self.n_layers && loc.head < self.per_layer(loc.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: SplitEntry,
    pub validation: SplitEntry,
    pub test: SplitEntry,
}

impl SplitFiles {
    pub fn get(&self, split: Split) -> &SplitEntry {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: u32,
    pub name: String,
    pub task: String,
    pub group: Group,
    pub long_answer: bool,
    pub splits: SplitFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Expected validation split size; splits of any other size only warn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_count: Option<usize>,
    pub model: ModelGeometry,
    pub location_kinds: Vec<LocationKind>,
    pub datasets: Vec<DatasetEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parses and validates a manifest, then cross-checks every split file header.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest::parse(&text, base_dir).map_err(|e| match e {
            Error::Parse(message) => Error::ManifestParse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        manifest.check_files()?;
        Ok(manifest)
    }

    /// Parses and validates the manifest text without touching split files.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
        let mut manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        manifest.base_dir = base_dir.into();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidManifest(format!(
                "format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.datasets.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let m = &self.model;
        if m.n_layers == 0 || m.n_heads == 0 || m.head_dim == 0 || m.hidden_dim == 0 {
            return Err(Error::InvalidManifest(
                "model geometry has a zero extent".into(),
            ));
        }
        if self.location_kinds.is_empty() {
            return Err(Error::InvalidManifest("no location kinds listed".into()));
        }
        let kinds: BTreeSet<_> = self.location_kinds.iter().collect();
        if kinds.len() != self.location_kinds.len() {
            return Err(Error::InvalidManifest("location kinds repeated".into()));
        }
        if m.hidden_dim != m.n_heads * m.head_dim {
            let msg = format!(
                "hidden_dim {} != n_heads {} x head_dim {}",
                m.hidden_dim, m.n_heads, m.head_dim
            );
            if kinds.len() == 2 {
                return Err(Error::GeometryMismatch(msg));
            }
            log::warn!("{msg}");
        }

        let mut names = HashSet::new();
        let mut ids = BTreeSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::DuplicateDataset(d.name.clone()));
            }
            if !ids.insert(d.id) {
                return Err(Error::DuplicateDataset(format!("id {}", d.id)));
            }
            if d.splits.train.count > MAX_TRAIN_COUNT {
                return Err(Error::InvalidManifest(format!(
                    "{}: train count {} exceeds {MAX_TRAIN_COUNT}",
                    d.name, d.splits.train.count
                )));
            }
            if d.splits.test.count > MAX_TEST_COUNT {
                return Err(Error::InvalidManifest(format!(
                    "{}: test count {} exceeds {MAX_TEST_COUNT}",
                    d.name, d.splits.test.count
                )));
            }
            let expected = self.validation_count.unwrap_or(DEFAULT_VALIDATION_COUNT);
            if d.splits.validation.count != expected {
                log::warn!(
                    "{}: validation split has {} records (expected {expected})",
                    d.name,
                    d.splits.validation.count
                );
            }
            if kinds.len() > 1 {
                for split in Split::ALL {
                    if !d.splits.get(split).file.contains(KIND_PLACEHOLDER) {
                        return Err(Error::InvalidManifest(format!(
                            "{}: {split} file must contain {KIND_PLACEHOLDER} when several kinds are stored",
                            d.name
                        )));
                    }
                }
            }
        }
        let dense = ids.iter().enumerate().all(|(i, &id)| id as usize == i);
        if !dense {
            return Err(Error::InvalidManifest(
                "dataset ids must be dense from 0".into(),
            ));
        }
        Ok(())
    }

    /// Checks that every split file exists and its header agrees with the manifest.
    pub fn check_files(&self) -> Result<()> {
        for d in &self.datasets {
            for &kind in &self.location_kinds {
                for split in Split::ALL {
                    let path = self.split_path(d, split, kind);
                    if !path.exists() {
                        return Err(Error::MissingFile(path));
                    }
                    let header = read_header(&path)?;
                    self.check_header(&header, kind)?;
                    let entry = d.splits.get(split);
                    if header.dataset_id != d.id || header.split != split {
                        return Err(Error::InvalidManifest(format!(
                            "{} declares dataset {} split {}, manifest expects {} {split}",
                            path.display(),
                            header.dataset_id,
                            header.split,
                            d.id
                        )));
                    }
                    if header.record_count != entry.count as u64 {
                        return Err(Error::InvalidManifest(format!(
                            "{} holds {} records, manifest says {}",
                            path.display(),
                            header.record_count,
                            entry.count
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks a header's kind and shape against the model geometry.
    pub fn check_header(&self, header: &ActivationHeader, kind: LocationKind) -> Result<()> {
        if header.kind != kind {
            return Err(Error::GeometryMismatch(format!(
                "file stores {}, expected {kind}",
                header.kind
            )));
        }
        check_geometry(header, &self.model)
    }

    pub fn has_kind(&self, kind: LocationKind) -> bool {
        self.location_kinds.contains(&kind)
    }

    pub fn split_path(&self, dataset: &DatasetEntry, split: Split, kind: LocationKind) -> PathBuf {
        let file = dataset
            .splits
            .get(split)
            .file
            .replace(KIND_PLACEHOLDER, kind.file_tag());
        self.base_dir.join(file)
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDataset(name.to_string()))
    }

    pub fn dataset_by_id(&self, id: u32) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDataset(format!("id {id}")))
    }

    pub fn train_task_datasets(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.datasets.iter().filter(|d| d.group == Group::TrainTask)
    }

    pub fn test_task_datasets(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.datasets.iter().filter(|d| d.group == Group::TestTask)
    }
}

fn check_geometry(header: &ActivationHeader, model: &ModelGeometry) -> Result<()> {
    let want = (
        model.n_layers,
        model.per_layer(header.kind),
        model.location_dim(header.kind),
    );
    let got = (
        header.n_layers as usize,
        header.n_per_layer as usize,
        header.dim as usize,
    );
    if want != got {
        return Err(Error::GeometryMismatch(format!(
            "{} header declares (layers, per_layer, dim) = {got:?}, model has {want:?}",
            header.kind
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationHeader {
    pub dataset_id: u32,
    pub split: Split,
    pub kind: LocationKind,
    pub n_layers: u16,
    pub n_per_layer: u16,
    pub dim: u32,
    pub logprob_valid: bool,
    pub record_count: u64,
}

impl ActivationHeader {
    pub fn new(
        dataset_id: u32,
        split: Split,
        kind: LocationKind,
        geometry: &ModelGeometry,
        logprob_valid: bool,
    ) -> Result<Self> {
        let n_layers = u16::try_from(geometry.n_layers)
            .map_err(|_| Error::GeometryMismatch("n_layers exceeds u16".into()))?;
        let n_per_layer = u16::try_from(geometry.per_layer(kind))
            .map_err(|_| Error::GeometryMismatch("n_heads exceeds u16".into()))?;
        let dim = u32::try_from(geometry.location_dim(kind))
            .map_err(|_| Error::GeometryMismatch("dim exceeds u32".into()))?;
        Ok(ActivationHeader {
            dataset_id,
            split,
            kind,
            n_layers,
            n_per_layer,
            dim,
            logprob_valid,
            record_count: 0,
        })
    }

    /// Number of f32 activations in every record.
    pub fn record_len(&self) -> usize {
        self.n_layers as usize * self.n_per_layer as usize * self.dim as usize
    }

    fn record_bytes(&self) -> usize {
        RECORD_FIXED_BYTES + 4 * self.record_len()
    }

    fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0..4].copy_from_slice(MAGIC);
        out[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.dataset_id.to_le_bytes());
        out[12] = self.split.code();
        out[13] = self.kind.code();
        out[14..16].copy_from_slice(&self.n_layers.to_le_bytes());
        out[16..18].copy_from_slice(&self.n_per_layer.to_le_bytes());
        out[18..22].copy_from_slice(&self.dim.to_le_bytes());
        let flags: u32 = u32::from(self.logprob_valid);
        out[22..26].copy_from_slice(&flags.to_le_bytes());
        out[26..34].copy_from_slice(&self.record_count.to_le_bytes());
        out
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[0..4] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        if bytes.len() < HEADER_BYTES {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                message: format!("header is {} of {HEADER_BYTES} bytes", bytes.len()),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let split = Split::from_code(bytes[12])
            .ok_or_else(|| Error::Parse(format!("split code {}", bytes[12])))?;
        let kind = LocationKind::from_code(bytes[13])
            .ok_or_else(|| Error::Parse(format!("location kind code {}", bytes[13])))?;
        Ok(ActivationHeader {
            dataset_id: u32_at(8),
            split,
            kind,
            n_layers: u16_at(14),
            n_per_layer: u16_at(16),
            dim: u32_at(18),
            logprob_valid: u32_at(22) & 1 == 1,
            record_count: u64::from_le_bytes(bytes[26..34].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sample_id: u64,
    pub label: u8,
    /// Zero when no answer log-probability was captured.
    pub answer_token_count: u32,
    /// Natural-log units; meaningful only when `answer_token_count > 0`.
    pub answer_logprob_sum: f64,
    pub activations: Vec<f32>,
}

impl ActivationRecord {
    pub fn has_logprob(&self) -> bool {
        self.answer_token_count > 0
    }
}

/// Records of one (dataset, split, kind) in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    pub header: ActivationHeader,
    pub records: Vec<ActivationRecord>,
}

impl SplitView {
    pub fn dataset_id(&self) -> u32 {
        self.header.dataset_id
    }

    pub fn split(&self) -> Split {
        self.header.split
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `n` records, in file order.
    pub fn prefix(&self, n: usize) -> SplitView {
        let records: Vec<_> = self.records.iter().take(n).cloned().collect();
        SplitView {
            header: ActivationHeader {
                record_count: records.len() as u64,
                ..self.header
            },
            records,
        }
    }

    /// Offset of `loc` inside every record's activation vector.
    pub fn location_offset(&self, loc: LocationId) -> Result<usize> {
        if loc.kind != self.header.kind {
            return Err(Error::LocationKindAbsent(loc.kind.to_string()));
        }
        let per_layer = self.header.n_per_layer as usize;
        if loc.layer >= self.header.n_layers as usize || loc.head >= per_layer {
            return Err(Error::LocationOutOfRange(loc));
        }
        Ok((loc.layer * per_layer + loc.head) * self.header.dim as usize)
    }

    pub fn location_dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Reads only the fixed-size header of an activation file.
pub fn read_header(path: impl AsRef<Path>) -> Result<ActivationHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_BYTES);
    Read::by_ref(&mut file)
        .take(HEADER_BYTES as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    ActivationHeader::decode(path, &buf)
}

/// Reads an activation file and checks its header against `expected`.
pub fn read_activation_file(path: impl AsRef<Path>, expected: &ModelGeometry) -> Result<SplitView> {
    let view = read_activation_file_unchecked(path)?;
    check_geometry(&view.header, expected)?;
    Ok(view)
}

/// Reads an activation file without a geometry cross-check.
pub fn read_activation_file_unchecked(path: impl AsRef<Path>) -> Result<SplitView> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_file(path, &bytes)
}

fn decode_file(path: &Path, bytes: &[u8]) -> Result<SplitView> {
    let header = ActivationHeader::decode(path, bytes)?;
    let record_bytes = header.record_bytes();
    let body = &bytes[HEADER_BYTES..];
    let expected = (header.record_count as usize)
        .checked_mul(record_bytes)
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            message: "record count overflows".into(),
        })?;
    if body.len() != expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            message: format!(
                "{} records of {record_bytes} bytes need {expected} bytes, found {}",
                header.record_count,
                body.len()
            ),
        });
    }
    let n = header.record_len();
    let mut records = Vec::with_capacity(header.record_count as usize);
    for chunk in body.chunks_exact(record_bytes) {
        let sample_id = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let label = chunk[8];
        if label > 1 {
            return Err(Error::LabelOutOfRange { sample_id, label });
        }
        let answer_token_count = u32::from_le_bytes(chunk[12..16].try_into().unwrap());
        let answer_logprob_sum = f64::from_le_bytes(chunk[16..24].try_into().unwrap());
        let mut activations = Vec::with_capacity(n);
        for v in chunk[RECORD_FIXED_BYTES..].chunks_exact(4) {
            activations.push(f32::from_le_bytes(v.try_into().unwrap()));
        }
        let finite_logprob = answer_token_count == 0 || answer_logprob_sum.is_finite();
        if !finite_logprob || activations.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                sample_id,
            });
        }
        records.push(ActivationRecord {
            sample_id,
            label,
            answer_token_count,
            answer_logprob_sum,
            activations,
        });
    }
    Ok(SplitView { header, records })
}

/// Writes `records` under `header`; `header.record_count` is ignored and
/// replaced with the actual count.
pub fn write_activation_file(
    path: impl AsRef<Path>,
    header: &ActivationHeader,
    records: &[ActivationRecord],
) -> Result<()> {
    let path = path.as_ref();
    let n = header.record_len();
    for r in records {
        if r.activations.len() != n {
            return Err(Error::GeometryMismatch(format!(
                "record {} has {} activations, header expects {n}",
                r.sample_id,
                r.activations.len()
            )));
        }
        if r.label > 1 {
            return Err(Error::LabelOutOfRange {
                sample_id: r.sample_id,
                label: r.label,
            });
        }
    }
    let header = ActivationHeader {
        record_count: records.len() as u64,
        ..*header
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(&header.encode()).map_err(io)?;
    for r in records {
        out.write_all(&r.sample_id.to_le_bytes()).map_err(io)?;
        out.write_all(&[r.label, 0, 0, 0]).map_err(io)?;
        out.write_all(&r.answer_token_count.to_le_bytes())
            .map_err(io)?;
        out.write_all(&r.answer_logprob_sum.to_le_bytes())
            .map_err(io)?;
        for v in &r.activations {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Rows of one location's activations, one row per record in file order.
pub fn slice_location(view: &SplitView, loc: LocationId) -> Result<FeatureMatrix> {
    let offset = view.location_offset(loc)?;
    let dim = view.location_dim();
    FeatureMatrix::from_rows(
        dim,
        view.records.iter().map(|r| {
            (
                r.activations[offset..offset + dim]
                    .iter()
                    .map(|&v| f64::from(v)),
                r.label,
            )
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    CrossTask,
    CrossDomain,
    InDomain,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::CrossTask, Regime::CrossDomain, Regime::InDomain];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::CrossTask => "cross-task",
            Regime::CrossDomain => "cross-domain",
            Regime::InDomain => "in-domain",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-task" | "cross_task" => Ok(Regime::CrossTask),
            "cross-domain" | "cross_domain" => Ok(Regime::CrossDomain),
            "in-domain" | "in_domain" => Ok(Regime::InDomain),
            other => Err(Error::UnknownRegime(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SplitRef {
    pub dataset_id: u32,
    pub split: Split,
}

impl SplitRef {
    pub fn new(dataset_id: u32, split: Split) -> Self {
        SplitRef { dataset_id, split }
    }
}

/// Which splits feed training, location scoring, and evaluation in one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<SplitRef>,
    pub validation: Vec<SplitRef>,
    pub test: SplitRef,
}

pub fn partition_regime(
    manifest: &Manifest,
    regime: Regime,
    test_dataset: &str,
) -> Result<Partition> {
    let target = manifest.dataset(test_dataset)?;
    if target.group != Group::TestTask {
        return Err(Error::NotATestDataset(test_dataset.to_string()));
    }
    let train_tasks: Vec<&DatasetEntry> = manifest.train_task_datasets().collect();
    let mut train: Vec<SplitRef> = train_tasks
        .iter()
        .map(|d| SplitRef::new(d.id, Split::Train))
        .collect();
    if matches!(regime, Regime::CrossDomain | Regime::InDomain) {
        train.extend(
            manifest
                .test_task_datasets()
                .filter(|d| d.task == target.task && d.id != target.id)
                .map(|d| SplitRef::new(d.id, Split::Train)),
        );
    }
    if regime == Regime::InDomain {
        train.push(SplitRef::new(target.id, Split::Train));
    }
    let validation = train_tasks
        .iter()
        .map(|d| SplitRef::new(d.id, Split::Validation))
        .collect();
    Ok(Partition {
        train,
        validation,
        test: SplitRef::new(target.id, Split::Test),
    })
}

/// All split views of one location kind, loaded eagerly and immutable afterwards.
#[derive(Debug, Clone)]
pub struct ActivationStore {
    manifest: Manifest,
    kind: LocationKind,
    views: BTreeMap<SplitRef, SplitView>,
}

impl ActivationStore {
    pub fn open(manifest: &Manifest, kind: LocationKind) -> Result<Self> {
        if !manifest.has_kind(kind) {
            return Err(Error::LocationKindAbsent(kind.to_string()));
        }
        let mut views = BTreeMap::new();
        for d in &manifest.datasets {
            for split in Split::ALL {
                let path = manifest.split_path(d, split, kind);
                let view = read_activation_file(&path, &manifest.model)?;
                manifest.check_header(&view.header, kind)?;
                if view.header.dataset_id != d.id || view.header.split != split {
                    return Err(Error::InvalidManifest(format!(
                        "{} does not hold {} {split}",
                        path.display(),
                        d.name
                    )));
                }
                views.insert(SplitRef::new(d.id, split), view);
            }
        }
        Ok(ActivationStore {
            manifest: manifest.clone(),
            kind,
            views,
        })
    }

    /// Builds a store from views already in memory.
    pub fn from_views(
        manifest: Manifest,
        kind: LocationKind,
        views: impl IntoIterator<Item = SplitView>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for v in views {
            manifest.check_header(&v.header, kind)?;
            map.insert(SplitRef::new(v.dataset_id(), v.split()), v);
        }
        for d in &manifest.datasets {
            for split in Split::ALL {
                if !map.contains_key(&SplitRef::new(d.id, split)) {
                    return Err(Error::InvalidManifest(format!(
                        "{} {split} view missing",
                        d.name
                    )));
                }
            }
        }
        Ok(ActivationStore {
            manifest,
            kind,
            views: map,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn kind(&self) -> LocationKind {
        self.kind
    }

    pub fn view(&self, split: SplitRef) -> &SplitView {
        &self.views[&split]
    }

    pub fn views(&self, splits: &[SplitRef]) -> Vec<&SplitView> {
        splits.iter().map(|s| self.view(*s)).collect()
    }

    pub fn dataset_name(&self, id: u32) -> &str {
        self.manifest
            .dataset_by_id(id)
            .map(|d| d.name.as_str())
            .unwrap_or("?")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> ModelGeometry {
        ModelGeometry {
            name: "toy".into(),
            n_layers: 2,
            n_heads: 3,
            head_dim: 4,
            hidden_dim: 12,
        }
    }

    fn record(id: u64, label: u8, n: usize) -> ActivationRecord {
        ActivationRecord {
            sample_id: id,
            label,
            answer_token_count: id as u32,
            answer_logprob_sum: -(id as f64) * 0.5,
            activations: (0..n).map(|i| (i as f32) + id as f32 * 100.0).collect(),
        }
    }

    fn head_view() -> SplitView {
        let header = ActivationHeader::new(
            0,
            Split::Train,
            LocationKind::AttentionHead,
            &geometry(),
            true,
        )
        .unwrap();
        let records: Vec<_> = (0..3).map(|i| record(i, (i % 2) as u8, 24)).collect();
        SplitView {
            header: ActivationHeader {
                record_count: 3,
                ..header
            },
            records,
        }
    }

    #[test]
    fn seven_b_geometry_grid_has_1024_heads() {
        let g = ModelGeometry {
            name: "llama".into(),
            n_layers: 32,
            n_heads: 32,
            head_dim: 128,
            hidden_dim: 4096,
        };
        assert_eq!(g.grid_size(LocationKind::AttentionHead), 1024);
        assert_eq!(g.locations(LocationKind::AttentionHead).len(), 1024);
        assert_eq!(g.locations(LocationKind::LayerResidual).len(), 32);
    }

    #[test]
    fn location_order_is_kind_layer_head() {
        let mut locs = vec![
            LocationId::layer(0),
            LocationId::head(1, 0),
            LocationId::head(0, 2),
        ];
        locs.sort();
        assert_eq!(
            locs,
            vec![
                LocationId::head(0, 2),
                LocationId::head(1, 0),
                LocationId::layer(0)
            ]
        );
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actv");
        let view = head_view();
        write_activation_file(&path, &view.header, &view.records).unwrap();
        let back = read_activation_file(&path, &geometry()).unwrap();
        assert_eq!(back, view);
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.actv");
        let header = head_view().header;
        write_activation_file(&path, &header, &[]).unwrap();
        let back = read_activation_file(&path, &geometry()).unwrap();
        assert_eq!(back.header.record_count, 0);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, HEADER_BYTES);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.actv");
        let view = head_view();
        write_activation_file(&path, &view.header, &view.records).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read_activation_file(&path, &geometry()),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.actv");
        fs::write(&path, b"NOPE0000000000000000000000000000000000").unwrap();
        assert!(matches!(
            read_activation_file(&path, &geometry()),
            Err(Error::BadMagic(_))
        ));
    }

    #[test]
    fn label_out_of_range_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.actv");
        let view = head_view();
        write_activation_file(&path, &view.header, &view.records).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_BYTES + 8] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_activation_file(&path, &geometry()),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.actv");
        let mut view = head_view();
        view.records[1].activations[5] = f32::NAN;
        write_activation_file(&path, &view.header, &view.records).unwrap();
        assert!(matches!(
            read_activation_file(&path, &geometry()),
            Err(Error::NonFiniteValue { sample_id: 1, .. })
        ));
    }

    #[test]
    fn mixed_lengths_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut view = head_view();
        view.records[2].activations.pop();
        assert!(matches!(
            write_activation_file(dir.path().join("x.actv"), &view.header, &view.records),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn geometry_mismatch_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.actv");
        let view = head_view();
        write_activation_file(&path, &view.header, &view.records).unwrap();
        let other = ModelGeometry {
            head_dim: 8,
            hidden_dim: 24,
            ..geometry()
        };
        assert!(matches!(
            read_activation_file(&path, &other),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn slice_first_head_takes_leading_dims() {
        let view = head_view();
        let m = slice_location(&view, LocationId::head(0, 0)).unwrap();
        assert_eq!(m.rows(), 3);
        assert_eq!(m.dim(), 4);
        for (i, r) in view.records.iter().enumerate() {
            let want: Vec<f64> = r.activations[..4].iter().map(|&v| v as f64).collect();
            assert_eq!(m.row(i), want.as_slice());
        }
    }

    #[test]
    fn slice_partition_reassembles_record() {
        let view = head_view();
        let g = geometry();
        let slices: Vec<_> = g
            .locations(LocationKind::AttentionHead)
            .into_iter()
            .map(|l| slice_location(&view, l).unwrap())
            .collect();
        for (i, r) in view.records.iter().enumerate() {
            let joined: Vec<f64> = slices.iter().flat_map(|s| s.row(i).to_vec()).collect();
            let want: Vec<f64> = r.activations.iter().map(|&v| v as f64).collect();
            assert_eq!(joined, want);
        }
    }

    #[test]
    fn slice_wrong_kind_or_range() {
        let view = head_view();
        assert!(matches!(
            slice_location(&view, LocationId::layer(1)),
            Err(Error::LocationKindAbsent(_))
        ));
        assert!(matches!(
            slice_location(&view, LocationId::head(0, 3)),
            Err(Error::LocationOutOfRange(_))
        ));
    }

    const MANIFEST: &str = r#"
format_version = 1
location_kinds = ["attention_head"]

[model]
name = "toy"
n_layers = 32
n_heads = 32
head_dim = 128
hidden_dim = 4096

[[datasets]]
id = 0
name = "a"
task = "qa"
group = "train_task"
long_answer = false
splits.train = { file = "a_train.actv", count = 10 }
splits.validation = { file = "a_val.actv", count = 100 }
splits.test = { file = "a_test.actv", count = 10 }
"#;

    #[test]
    fn manifest_parses() {
        let m = Manifest::parse(MANIFEST, ".").unwrap();
        assert_eq!(m.model.grid_size(LocationKind::AttentionHead), 1024);
        assert_eq!(m.datasets[0].group, Group::TrainTask);
    }

    #[test]
    fn manifest_without_datasets_is_empty() {
        let head = &MANIFEST[..MANIFEST.find("[model]").unwrap()];
        let model =
            &MANIFEST[MANIFEST.find("[model]").unwrap()..MANIFEST.find("[[datasets]]").unwrap()];
        let text = format!("{head}datasets = []\n{model}");
        assert!(matches!(
            Manifest::parse(&text, "."),
            Err(Error::EmptyManifest)
        ));
    }

    #[test]
    fn manifest_duplicate_names() {
        let dup = MANIFEST.to_string()
            + &MANIFEST[MANIFEST.find("[[datasets]]").unwrap()..].replace("id = 0", "id = 1");
        assert!(matches!(
            Manifest::parse(&dup, "."),
            Err(Error::DuplicateDataset(_))
        ));
    }

    #[test]
    fn manifest_header_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.toml"), MANIFEST).unwrap();
        let small = ModelGeometry {
            name: "toy".into(),
            n_layers: 32,
            n_heads: 32,
            head_dim: 64,
            hidden_dim: 2048,
        };
        for (file, split) in [
            ("a_train.actv", Split::Train),
            ("a_val.actv", Split::Validation),
            ("a_test.actv", Split::Test),
        ] {
            let h = ActivationHeader::new(0, split, LocationKind::AttentionHead, &small, false)
                .unwrap();
            write_activation_file(dir.path().join(file), &h, &[]).unwrap();
        }
        assert!(matches!(
            Manifest::load(dir.path().join("m.toml")),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn manifest_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.toml"), MANIFEST).unwrap();
        assert!(matches!(
            Manifest::load(dir.path().join("m.toml")),
            Err(Error::MissingFile(_))
        ));
        assert!(matches!(
            Manifest::load(dir.path().join("absent.toml")),
            Err(Error::MissingFile(_))
        ));
    }
}
