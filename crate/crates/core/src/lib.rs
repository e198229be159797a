//! Day-to-day route-choice simulation with learning human drivers and
//! autonomous vehicles trained by tabular multi-agent RL.
//!
//! The pipeline mirrors a commuting experiment: humans learn routes for a
//! number of days, a share of them is converted into AVs, the AVs train, and
//! a testing phase is recorded.

pub mod behaviors;
pub mod demand;
pub mod error;
pub mod experiment;
pub mod humans;
pub mod learners;
pub mod marlenv;
pub mod netgraph;
pub mod pathgen;
pub mod recorder;
pub mod seeds;
pub mod traffic;

pub use behaviors::{Behavior, BehaviorWeights};
pub use demand::{AgentId, AgentKind, AgentSpec, DemandConfig};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, RunReport};
pub use humans::{HumanModel, HumanModelParams};
pub use learners::{LearnerKind, Policies, TrainSchedule};
pub use marlenv::{EnvConfig, Phase, TrafficEnv};
pub use netgraph::{EdgeIdx, Network, NodeIdx};
pub use pathgen::{Route, RouteGenParams, RouteSet};
pub use recorder::{KpiSummary, Recorder};
pub use traffic::TrafficModel;
