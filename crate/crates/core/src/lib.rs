//! Desk-scale preference optimisation: a reverse-mode autodiff tape, a tabular
//! softmax policy, the ORPO and GRPO objectives, and their training loops.

pub mod autodiff;
pub mod objectives;
pub mod policy;
pub mod toy;
pub mod trainer;

pub use autodiff::{AutodiffError, Tape, Tensor, Var};
pub use objectives::{GrpoConfig, ObjectiveError, OrpoConfig, TokenGroup, TokenPair};
pub use policy::{PolicyError, PolicyParams, PolicySnapshot, SnapshotId, Token};
pub use trainer::{HyperParams, SchedulerKind, TrainError, TrainTrace};
