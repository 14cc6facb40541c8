//! Metric-transported sharpness-aware minimization: landscapes, learned
//! preconditioners, update rules, closed-form analysis and stochastic
//! simulation.

pub mod analysis;
pub mod landscapes;
pub mod metric;
pub mod numkit;
pub mod optimizers;
pub mod stochsim;
pub mod trajectory;

pub use landscapes::{Landscape, Region};
pub use metric::{MetricState, Structure};
pub use numkit::{ParamVector, SymMatrix};
pub use optimizers::{OptimizerConfig, Rule};
pub use stochsim::{noise_at, NoiseSchedule};
pub use trajectory::{TrajectoryRecord, TrajectoryRow};
