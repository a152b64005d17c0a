//! Linear-ranking compression of selected locations.
//!
//! A full-dimension probe ranks each location's coordinates by `|θ|`; the
//! top `k` per location are kept and a fresh probe is trained on them.

use crate::error::{Error, Result};
use crate::probe::{self, ProbeModel, ProbeType, TrainConfig};
use crate::select::{assemble_rows, PlanEntry};
use crate::store::{LocationId, SplitView};

/// The `k` coordinates of `loc` with the largest `|θ|`, ascending.
pub fn rank_dims_by_weight(model: &ProbeModel, loc: LocationId, k: usize) -> Result<Vec<usize>> {
    let mut offset = 0;
    for e in &model.feature_map {
        if e.location == loc {
            if k > e.dims.len() {
                return Err(Error::KTooLarge {
                    k,
                    dim: e.dims.len(),
                });
            }
            let block = &model.probe.weights[offset..offset + e.dims.len()];
            let mut order: Vec<usize> = (0..block.len()).collect();
            order.sort_by(|&a, &b| block[b].abs().total_cmp(&block[a].abs()).then(a.cmp(&b)));
            let mut kept: Vec<usize> = order[..k].iter().map(|&j| e.dims[j]).collect();
            kept.sort_unstable();
            return Ok(kept);
        }
        offset += e.dims.len();
    }
    Err(Error::LocationOutOfRange(loc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub plan: Vec<PlanEntry>,
    pub model: ProbeModel,
    /// Probe trained on the uncompressed plan, used for the ranking.
    pub full_model: ProbeModel,
}

/// Trains on the full plan, keeps the top-`k` coordinates per location,
/// and retrains on the compressed features.
pub fn compress_and_retrain(
    plan: &[PlanEntry],
    train: &[&SplitView],
    probe_type: ProbeType,
    k: usize,
    cfg: &TrainConfig,
) -> Result<Compressed> {
    let full_rows = assemble_rows(plan, train)?;
    let full_model = ProbeModel::new(plan.to_vec(), probe::train(probe_type, &full_rows, cfg)?)?;
    let compressed: Vec<PlanEntry> = plan
        .iter()
        .map(|e| {
            Ok(PlanEntry {
                location: e.location,
                dims: rank_dims_by_weight(&full_model, e.location, k)?,
            })
        })
        .collect::<Result<_>>()?;
    let rows = assemble_rows(&compressed, train)?;
    let model = ProbeModel::new(compressed.clone(), probe::train(probe_type, &rows, cfg)?)?;
    Ok(Compressed {
        plan: compressed,
        model,
        full_model,
    })
}
