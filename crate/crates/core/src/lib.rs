//! Stochastic coded federated learning for linear regression.
//!
//! Devices share a noisy random projection of their data once; the server
//! trains on it to cover stragglers while devices run local SGD. The crate
//! also covers the wireless timing model, convergence and variance bounds,
//! mutual-information privacy budgets, and contract design for noise levels.

pub mod analysis;
pub mod coding;
pub mod data;
pub mod error;
pub mod harness;
pub mod incentive;
pub mod linalg;
pub mod privacy;
pub mod rng;
pub mod simulation;
pub mod system;
pub mod training;

pub use coding::{CodedShard, GlobalCodedDataset};
pub use data::{Dataset, DevicePartition};
pub use error::{Error, Result};
pub use incentive::{Contract, ContractItem, DeviceEcon, Gamma};
pub use linalg::Matrix;
pub use privacy::Budget;
pub use simulation::{BatchMode, Framework, RunOutput, Scenario, TrainConfig};
pub use system::{ChannelModel, DeviceProfile, FleetSpec};
pub use training::LrSchedule;
pub use harness::{ExperimentConfig, SweepAxis, SweepSpec};
