//! Stochastic nested distributed gradient methods over simulated networks.
//!
//! A network of `n` agents cooperatively minimizes `f(x) = Σ_i f_i(x)` where
//! agent `i` only sees noisy estimates of `∇f_i`. The crate provides:
//!
//! * [`topology`]: graph generators, Metropolis consensus matrices and
//!   their spectral diagnostics;
//! * [`objectives`]: quadratic and logistic local objectives, stochastic
//!   gradient oracles and reference solutions;
//! * [`methods`]: NEAR-DGD with arbitrary consensus schedules plus DGD,
//!   EXTRA, DSGT and centralized baselines as single-step state machines;
//! * [`analysis`]: theoretical constants, bound calculators and the
//!   per-iteration metrics written to run records;
//! * [`harness`]: JSON experiment configurations, seeded batch runs and
//!   summary reports.

pub mod analysis;
pub mod harness;
pub mod linalg;
pub mod methods;
pub mod objectives;
pub mod rng;
pub mod topology;

pub use analysis::{RunRecord, RunRow, TheoreticalConstants};
pub use harness::{ExperimentConfig, SummaryReport};
pub use methods::{ConsensusSchedule, Method, MethodState, StackedState};
pub use objectives::{Dataset, ObjectiveSuite, OracleMode, StochasticOracle};
pub use topology::{ConsensusMatrix, GraphKind, Topology};
