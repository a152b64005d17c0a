//! Hidden-state location selection.
//!
//! Every location gets a preliminary probe trained on the aggregated
//! training rows; each validation split then nominates its `num`
//! best-scoring locations and the union of nominations becomes the
//! feature map of the final probe.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{self, FeatureMatrix, ProbeType, TrainConfig};
use crate::store::{slice_location, LocationId, LocationKind, ModelGeometry, SplitView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HyperParams {
    pub num: usize,
    pub k: usize,
    pub location_kind: LocationKind,
}

impl HyperParams {
    pub fn validate(&self, geometry: &ModelGeometry) -> Result<()> {
        if self.num == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("num and k must be at least 1".into()));
        }
        let dim = geometry.location_dim(self.location_kind);
        if self.k > dim {
            return Err(Error::KTooLarge { k: self.k, dim });
        }
        if self.location_kind == LocationKind::LayerResidual && self.num != 1 {
            return Err(Error::InvalidConfig(
                "layer-residual probes select exactly one layer per validation split".into(),
            ));
        }
        Ok(())
    }
}

/// One location of a plan together with the coordinates it contributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    #[serde(flatten)]
    pub location: LocationId,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub dataset_id: u32,
    pub dataset: String,
    /// False when the split held a single label and was left out of selection.
    pub used: bool,
    /// Accuracy per location, aligned with [`LocationScoreTable::locations`].
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScoreTable {
    pub probe_type: ProbeType,
    pub kind: LocationKind,
    pub location_dim: usize,
    pub locations: Vec<LocationId>,
    pub splits: Vec<SplitScores>,
}

impl LocationScoreTable {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: LocationScoreTable =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if t.splits
            .iter()
            .any(|s| s.used && s.accuracies.len() != t.locations.len())
        {
            return Err(Error::Parse(
                "score table rows do not cover the grid".into(),
            ));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedLocation {
    #[serde(flatten)]
    pub entry: PlanEntry,
    pub picked_by_splits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub num: usize,
    pub k: Option<usize>,
    pub probe_type: ProbeType,
    /// Strictly ascending by location.
    pub locations: Vec<SelectedLocation>,
}

impl SelectionPlan {
    pub fn entries(&self) -> Vec<PlanEntry> {
        self.locations.iter().map(|l| l.entry.clone()).collect()
    }

    pub fn location_ids(&self) -> Vec<LocationId> {
        self.locations.iter().map(|l| l.entry.location).collect()
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn total_dims(&self) -> usize {
        self.locations.iter().map(|l| l.entry.dims.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: SelectionPlan =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let ordered = plan
            .locations
            .windows(2)
            .all(|w| w[0].entry.location < w[1].entry.location);
        if !ordered {
            return Err(Error::Parse(
                "plan locations must be strictly ascending".into(),
            ));
        }
        Ok(plan)
    }
}

/// Stacks the rows of one location across several views, in view order.
pub fn stack_location(views: &[&SplitView], loc: LocationId) -> Result<FeatureMatrix> {
    let parts = views
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| slice_location(v, loc))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::vconcat(&parts)
}

/// Trains one full-dimension probe per location on the stacked training
/// views and scores it on every validation view.
///
/// `validation` pairs each view with the dataset name used in the table.
pub fn score_all_locations(
    train: &[&SplitView],
    validation: &[(&SplitView, &str)],
    locations: &[LocationId],
    probe_type: ProbeType,
    cfg: &TrainConfig,
) -> Result<LocationScoreTable> {
    let first = train.first().ok_or(Error::EmptyView)?;
    let kind = first.header.kind;
    let location_dim = first.location_dim();
    let used: Vec<bool> = validation
        .iter()
        .map(|(v, name)| {
            let positives = v.records.iter().filter(|r| r.label == 1).count();
            let informative = positives > 0 && positives < v.len();
            if !informative {
                log::warn!("validation split of {name} holds a single label; skipped in selection");
            }
            informative
        })
        .collect();

    let per_location: Vec<Vec<f64>> = locations
        .par_iter()
        .map(|&loc| -> Result<Vec<f64>> {
            let tag = |e| Error::at_location(loc, e);
            let rows = stack_location(train, loc).map_err(tag)?;
            let model = probe::train(probe_type, &rows, cfg).map_err(tag)?;
            validation
                .iter()
                .zip(&used)
                .map(|((v, _), &u)| {
                    if !u {
                        return Ok(f64::NAN);
                    }
                    let m = slice_location(v, loc).map_err(tag)?;
                    model.accuracy(&m).map_err(tag)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let splits = validation
        .iter()
        .enumerate()
        .map(|(j, (v, name))| SplitScores {
            dataset_id: v.dataset_id(),
            dataset: name.to_string(),
            used: used[j],
            accuracies: if used[j] {
                per_location.iter().map(|accs| accs[j]).collect()
            } else {
                Vec::new()
            },
        })
        .collect();
    Ok(LocationScoreTable {
        probe_type,
        kind,
        location_dim,
        locations: locations.to_vec(),
        splits,
    })
}

/// Per split, the `num` most accurate locations (ties to the smaller
/// location), merged across splits without duplicates.
pub fn select_top_num(table: &LocationScoreTable, num: usize) -> Result<SelectionPlan> {
    let grid = table.locations.len();
    if num == 0 {
        return Err(Error::InvalidConfig("num must be at least 1".into()));
    }
    if num > grid {
        return Err(Error::NumExceedsGrid { num, grid });
    }
    let mut picks: BTreeMap<LocationId, Vec<String>> = BTreeMap::new();
    for split in table.splits.iter().filter(|s| s.used) {
        let mut order: Vec<usize> = (0..grid).collect();
        order.sort_by(|&a, &b| {
            split.accuracies[b]
                .total_cmp(&split.accuracies[a])
                .then(table.locations[a].cmp(&table.locations[b]))
        });
        for &i in order.iter().take(num) {
            picks
                .entry(table.locations[i])
                .or_default()
                .push(split.dataset.clone());
        }
    }
    if picks.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let full: Vec<usize> = (0..table.location_dim).collect();
    Ok(SelectionPlan {
        num,
        k: None,
        probe_type: table.probe_type,
        locations: picks
            .into_iter()
            .map(|(location, picked_by_splits)| SelectedLocation {
                entry: PlanEntry {
                    location,
                    dims: full.clone(),
                },
                picked_by_splits,
            })
            .collect(),
    })
}

/// Concatenates, per record, the planned coordinates of every planned location.
pub fn assemble_features(plan: &[PlanEntry], view: &SplitView) -> Result<FeatureMatrix> {
    assemble_rows(plan, &[view])
}

/// [`assemble_features`] over several views, stacked in view order.
pub fn assemble_rows(plan: &[PlanEntry], views: &[&SplitView]) -> Result<FeatureMatrix> {
    if plan.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let Some(first) = views.first() else {
        return Err(Error::EmptyView);
    };
    let limit = first.location_dim();
    let mut offsets = Vec::with_capacity(plan.len());
    for e in plan {
        let offset = first.location_offset(e.location)?;
        if let Some(&dim) = e.dims.iter().find(|&&d| d >= limit) {
            return Err(Error::DimOutOfRange {
                location: e.location,
                dim,
                limit,
            });
        }
        offsets.push(offset);
    }
    let width: usize = plan.iter().map(|e| e.dims.len()).sum();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for v in views {
        if v.header.kind != first.header.kind || v.location_dim() != limit {
            return Err(Error::GeometryMismatch("views disagree on layout".into()));
        }
        values.reserve(v.len() * width);
        for r in &v.records {
            for (e, &offset) in plan.iter().zip(&offsets) {
                values.extend(e.dims.iter().map(|&d| f64::from(r.activations[offset + d])));
            }
            labels.push(r.label);
        }
    }
    FeatureMatrix::new(width, values, labels)
}
