//! Decentralized primal-dual policy gradient for networked agents under peak
//! and average safety constraints.

pub mod consensus;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod policy;
pub mod seed;
pub mod topology;
pub mod trainer;

pub use envs::{EnvConfig, EnvKind, Environment, ParticleWorld};
pub use error::{Error, Result};
pub use estimator::{BaselineMode, ConstraintSpec};
pub use policy::{JointParams, MlpParams};
pub use topology::TopologyKind;
pub use trainer::{evaluate, train, MetricsRecord, RunConfig, TrainOutcome, Trainer};
