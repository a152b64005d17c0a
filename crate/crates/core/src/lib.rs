//! Linear truthfulness probes over per-location transformer activations.
//!
//! Activations are read from flat binary dumps indexed by a TOML manifest.
//! Probes are trained per location, the best locations are selected on
//! validation splits, and a compressed probe over their top coordinates is
//! evaluated across held-out tasks.

pub mod baseline;
pub mod error;
pub mod experiment;
pub mod probe;
pub mod select;
pub mod sparsify;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use probe::{FeatureMatrix, LinearProbe, ProbeModel, ProbeType, TrainConfig};
pub use select::{HyperParams, PlanEntry, SelectionPlan};
pub use store::{
    ActivationStore, LocationId, LocationKind, Manifest, Regime, Split, SplitRef, SplitView,
};
