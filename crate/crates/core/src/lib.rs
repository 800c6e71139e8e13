//! Learns a schedulability boundary from historical container executions and
//! recommends minimal, feasible configuration changes that let a task meet its
//! deadline.

pub mod engine;
pub mod error;
pub mod forest;
pub mod ingest;
pub mod synth;
pub mod task;
pub mod verify;

pub use engine::{
    generate_counterfactuals, oracle_counterfactuals, CandidateSet, FeasibleRow, NoFeasibleHint,
};
pub use error::{Error, Result};
pub use forest::{Forest, Hyperparams, Prediction};
pub use task::{
    apply_actions, normalized_distance, Action, AllocationGrid, ContainerConfig, Counterfactual, Feature,
    FeaturePolicy, TaskRecord, TaskSpec, TaskStatus, TaskType,
};
