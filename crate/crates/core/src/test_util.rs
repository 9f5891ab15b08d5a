//! Helpers shared by unit, integration and acceptance tests.

use nalgebra::{DVector, UnitQuaternion, Vector3};
use rand::Rng;

use crate::model::RobotModel;
use crate::scalar::{real, Real};
use crate::state::GeneralizedState;

pub use crate::scenario::standing_state;

/// Random state with joints inside their limits and moderate velocities.
pub fn random_state<T: Real, R: Rng>(model: &RobotModel<T>, rng: &mut R) -> GeneralizedState<T> {
    let n = model.dof();
    let mut q = DVector::zeros(n);
    let mut qd = DVector::zeros(n);
    for (j, joint) in model.joints.iter().enumerate() {
        let (lo, hi) = joint.position_limits;
        let t: T = real(rng.gen_range(0.1..0.9));
        q[j] = lo + (hi - lo) * t;
        qd[j] = real(rng.gen_range(-1.0..1.0));
    }
    let axis = Vector3::new(
        real(rng.gen_range(-1.0..1.0)),
        real(rng.gen_range(-1.0..1.0)),
        real(rng.gen_range(-1.0..1.0f64)),
    );
    let angle: T = real(rng.gen_range(-0.8..0.8));
    let orientation = if axis.norm() > real(1e-6) {
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
    } else {
        UnitQuaternion::identity()
    };
    GeneralizedState {
        base_position: Vector3::new(
            real(rng.gen_range(-0.5..0.5)),
            real(rng.gen_range(-0.5..0.5)),
            real(rng.gen_range(0.3..0.8)),
        ),
        base_orientation: orientation,
        base_linear_velocity: Vector3::new(
            real(rng.gen_range(-0.5..0.5)),
            real(rng.gen_range(-0.5..0.5)),
            real(rng.gen_range(-0.5..0.5)),
        ),
        base_angular_velocity: Vector3::new(
            real(rng.gen_range(-0.5..0.5)),
            real(rng.gen_range(-0.5..0.5)),
            real(rng.gen_range(-0.5..0.5)),
        ),
        joint_positions: q,
        joint_velocities: qd,
    }
}
