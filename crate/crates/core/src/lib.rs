//! Whole-body controller library and constrained rigid-body simulator for a
//! floating-base quadruped.

pub mod controller;
pub mod dynamics;
pub mod kinematics;
pub mod model;
pub mod projection;
pub mod qp;
pub mod scalar;
pub mod scenario;
pub mod simulator;
pub mod state;
pub mod task_space;
pub mod trajectories;

#[cfg(feature = "test-util")]
pub mod test_util;

pub use kinematics::DimMask;
pub use model::{default_quadruped, RobotModel};
pub use scalar::Real;
pub use state::{FramePlacement, GeneralizedState};

/// Concrete double-precision aliases.
pub type RobotModelF64 = model::RobotModel<f64>;
pub type GeneralizedStateF64 = state::GeneralizedState<f64>;

/// Concrete single-precision aliases.
pub type RobotModelF32 = model::RobotModel<f32>;
pub type GeneralizedStateF32 = state::GeneralizedState<f32>;
