//! Milestone-anchored policy optimization on synthetic compositional
//! environments.
//!
//! The library partitions rollouts at milestone boundaries, shapes rewards
//! toward each milestone, estimates advantages at trajectory and segment
//! scale, and optimizes a tabular softmax policy with a clipped surrogate
//! objective. A harness runs seeded, thread-count-independent experiments
//! over the ChainCraft environment family and exports a diagnostic metric
//! stream (ZAR, CAR, EGR, CCR, sample categories) as CSV.
//!
//! All numeric code is generic over the [`scalar::Scalar`] float type;
//! the aliases below pin the `f64` instantiations the harness and CLI use.

pub mod advantage;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod harness;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod shaping;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` instantiations used by the harness and CLI.
pub type Trajectory64 = types::Trajectory<f64>;
pub type StepRecord64 = types::StepRecord<f64>;
pub type GroupBatch64 = types::GroupBatch<f64>;
pub type AdvantageTensor64 = types::AdvantageTensor<f64>;
pub type BeaconConfig64 = types::BeaconConfig<f64>;
pub type ShapedTrajectory64 = shaping::ShapedTrajectory<f64>;
pub type SoftmaxPolicy64 = policy::SoftmaxPolicy<f64>;

/// `f32` instantiations for callers that trade precision for footprint.
pub type Trajectory32 = types::Trajectory<f32>;
pub type GroupBatch32 = types::GroupBatch<f32>;
pub type AdvantageTensor32 = types::AdvantageTensor<f32>;
pub type BeaconConfig32 = types::BeaconConfig<f32>;
pub type SoftmaxPolicy32 = policy::SoftmaxPolicy<f32>;
