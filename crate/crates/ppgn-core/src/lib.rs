//! Two-stage graph network for fault localization on power distribution
//! feeders.
//!
//! The crate is organized around the data flow of the method:
//!
//! 1. [`feeder`] — feeder topology, three-phase bus admittance assembly, and
//!    electrical distance tables.
//! 2. [`fault`] — node-shunt fault simulation and labeled dataset generation.
//! 3. [`adjacency`] — kernel-weighted nearest-neighbor adjacency over
//!    electrical distances.
//! 4. [`stage1`] — node-level graph embedding network trained on voltage
//!    deviations.
//! 5. [`stage2`] — sample-level transductive propagation over an embedding
//!    similarity graph.
//! 6. [`influence`] — random-walk influence analysis of the aggregation
//!    operator.
//! 7. [`metrics`] — evaluation metrics and stratified splits.
//! 8. [`baselines`] — MLP and plain GCN reference models.
//! 9. [`experiment`] — end-to-end experiment harness and result tables.

pub mod adjacency;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod fault;
pub mod feeder;
pub mod influence;
pub mod metrics;
pub mod stage1;
pub mod stage2;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use adjacency::{AdjacencyA, CoverageReport};
pub use error::{Error, Result};
pub use stage1::{ThetaI, TrainConfigI};
pub use stage2::{SimilarityB, ThetaII, TrainConfigII};
pub use tensor::{Mat, ParamStore};
pub use fault::{FaultKind, FaultSpec, LoadScenario, NetworkState, Sample};
pub use experiment::{Arm, ArmConfig, ExperimentConfig, ResultRow};
pub use metrics::MetricsReport;
pub use feeder::{DistanceTable, FeederGraph, SwitchState, YBus};
