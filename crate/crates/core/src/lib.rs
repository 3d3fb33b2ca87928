//! Density-ratio imitation losses for preference alignment, with exact
//! tabular oracles.
//!
//! The numeric code is generic over the scalar type through [`Real`]; the
//! aliases below fix it to `f64` (the default used by the tests and the
//! command-line tool) or `f32`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod datagen;
pub mod dre;
pub mod error;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod numeric;
pub mod policy;
pub mod scalar;
pub mod tabular;
pub mod trainer;
pub mod verify;

pub use data::{PreferenceDataset, PreferenceTriple, TokenSeq};
pub use datagen::{GenConfig, RewardSpec};
pub use dre::HKind;
pub use error::{Error, Result};
pub use losses::{LogRatioConfig, LossKind, LossSpec};
pub use policy::{Policy, TrainablePolicy};
pub use scalar::Real;
pub use trainer::{MetricsRow, OptimConfig, Optimizer, RunSummary, Schedule};
pub use verify::{Suite, SuiteReport, VerifyOptions};

pub type Domain = tabular::TabularDomain<f64>;
pub type DomainF32 = tabular::TabularDomain<f32>;
pub type GroundTruth = datagen::GroundTruth<f64>;
pub type GroundTruthF32 = datagen::GroundTruth<f32>;
pub type TabularPolicy = policy::TabularSoftmaxPolicy<f64>;
pub type TabularPolicyF32 = policy::TabularSoftmaxPolicy<f32>;
pub type SeqPolicy = policy::TinySeqPolicy<f64>;
pub type SeqPolicyF32 = policy::TinySeqPolicy<f32>;
pub type Checkpoint = policy::Checkpoint<f64>;
pub type CheckpointF32 = policy::Checkpoint<f32>;
pub type ParamVector = policy::ParamVector<f64>;
pub type ParamVectorF32 = policy::ParamVector<f32>;
pub type RatioModel = dre::RatioModel<f64>;
pub type RatioModelF32 = dre::RatioModel<f32>;
