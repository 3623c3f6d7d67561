//! Grounded continuous evidence selection for multiple-instance bags.
//!
//! A gated attention-pooling host is wrapped with an anchor-grounded
//! selector, trained with a noisy-OR coverage objective, and its continuous
//! gates are turned into discrete evidence subsets by threshold-plus-repair.
//! The [`diagnostics`] module measures sufficiency, necessity and
//! recoverability of those subsets against budget-matched baselines.

pub mod checkpoint;
pub mod config;
pub mod coverage;
pub mod diagnostics;
pub mod error;
pub mod grounding;
pub mod math;
pub mod oracle;
pub mod parallel;
pub mod params;
pub mod predictor;
pub mod recovery;
pub mod selector;
pub mod synthbag;
pub mod training;

pub use config::ExperimentConfig;
pub use coverage::ClassAnchorWeights;
pub use diagnostics::{BaselineRule, DiagnosticsConfig, DiagnosticsReport, SnrReport};
pub use error::{Error, Result};
pub use grounding::{BridgeInput, GroundingParams};
pub use predictor::{InjectionMode, PredictorParams};
pub use recovery::{EvidenceSubset, RecoveryConfig};
pub use selector::{AnnealSchedule, GateVector, SelectorParams};
pub use synthbag::{AnchorBank, Bag, Dataset, GenConfig, Split};
pub use training::{Model, TrainConfig, TrainState};
