//! Off-policy evaluation on tabular MDPs and measurement of the bias that appears when
//! the same replay buffer is used both to pick a policy and to evaluate it.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`.

// `!(x > 0.0)` is used deliberately so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod mdp;
pub mod optim;
pub mod policy;
pub mod scalar;
pub mod table;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Library version, recorded alongside experiment outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Mdp = mdp::Mdp<f64>;
pub type Trajectory = mdp::Trajectory<f64>;
pub type Table = table::Table<f64>;
pub type ReplayBuffer = buffer::ReplayBuffer<f64>;
pub type TabularSoftmaxPolicy = policy::TabularSoftmaxPolicy<f64>;
pub type ExplicitPolicy = policy::ExplicitPolicy<f64>;
pub type PolicySnapshot = policy::PolicySnapshot<f64>;
pub type EstimateBreakdown = estimators::EstimateBreakdown<f64>;
pub type TrainTrace = optim::TrainTrace<f64>;
