//! Volumetric segmentation ensemble engine.
//!
//! The crate is organized bottom-up:
//! - [`rng`]: counter-based deterministic randomness,
//! - [`volume`]: the voxel data model (scalar, label, probability volumes,
//!   plane stacks, augmentation),
//! - [`vvol`]: the on-disk volume format,
//! - [`synthgen`]: synthetic dataset generation and splitting,
//! - [`metrics`]: evaluation criteria,
//! - [`autodiff`]: reverse-mode differentiation and the optimizer,
//! - [`learners`]: the small dense FCNs used as base learners,
//! - [`ensemble`]: pseudo-label fusion and meta-learner training.

pub mod autodiff;
pub mod ensemble;
pub mod learners;
pub mod metrics;
pub mod rng;
pub mod synthgen;
pub mod volume;
pub mod vvol;

pub use ensemble::{
    EnsembleError, FitPhase, FitRecord, GtAudit, MetaItem, MetaLearner, MetaLearnerSpec,
    MetaSource, ProtocolSetting, SupervisionSource, TrainProtocol,
};
pub use learners::{
    BaseLearner, BaseTrainCfg, FeatureVolume, LearnerError, LearnerId, MiniFcn, PseudoLabelSet,
    Reduction, Summary, TileCfg, TrainRecord,
};
pub use metrics::{ClassMetrics, MetricsError, MetricsReport, Partition, RandScores};
pub use rng::SplitMix64;
pub use volume::{
    AugmentOp, Dims, LabelVolume, PlaneAxis, PlaneStack, ProbVolume, Slice2d, Spacing, Volume,
    VolumeError,
};
pub use vvol::{Dtype, Vvol, VvolError};
