//! Generalized state of the floating-base system.
//!
//! Velocity convention: base linear velocity in the inertia frame, base
//! angular velocity in the base frame, then actuated joint rates. Every
//! Jacobian and dynamics quantity in this crate uses this same ordering.

use nalgebra::{DVector, UnitQuaternion, Vector3};

use crate::scalar::{real, Real};

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("quaternion norm deviates from 1 by more than 1e-9")]
    QuaternionNotNormalized,
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Base pose in SE(3) plus actuated joint positions and the generalized
/// velocity components.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedState<T: Real> {
    /// Base position in the inertia frame, m.
    pub base_position: Vector3<T>,
    /// Base orientation, inertia from base.
    pub base_orientation: UnitQuaternion<T>,
    /// Base linear velocity in the inertia frame, m/s.
    pub base_linear_velocity: Vector3<T>,
    /// Base angular velocity in the base frame, rad/s.
    pub base_angular_velocity: Vector3<T>,
    /// Actuated joint positions, rad.
    pub joint_positions: DVector<T>,
    /// Actuated joint velocities, rad/s.
    pub joint_velocities: DVector<T>,
}

impl<T: Real> GeneralizedState<T> {
    /// Rest state at the origin with the given joint angles.
    pub fn from_joint_positions(q_j: DVector<T>) -> Self {
        let n = q_j.len();
        GeneralizedState {
            base_position: Vector3::zeros(),
            base_orientation: UnitQuaternion::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_positions: q_j,
            joint_velocities: DVector::zeros(n),
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::from_joint_positions(DVector::zeros(n))
    }

    pub fn dof(&self) -> usize {
        self.joint_positions.len()
    }

    pub fn nv(&self) -> usize {
        6 + self.joint_positions.len()
    }

    /// Stacked generalized velocity (6 + n).
    pub fn velocity_vector(&self) -> DVector<T> {
        let n = self.dof();
        let mut u = DVector::zeros(6 + n);
        u.fixed_rows_mut::<3>(0).copy_from(&self.base_linear_velocity);
        u.fixed_rows_mut::<3>(3).copy_from(&self.base_angular_velocity);
        u.rows_mut(6, n).copy_from(&self.joint_velocities);
        u
    }

    pub fn set_velocity_vector(&mut self, u: &DVector<T>) {
        let n = self.dof();
        assert_eq!(u.len(), 6 + n, "generalized velocity dimension");
        self.base_linear_velocity = u.fixed_rows::<3>(0).into();
        self.base_angular_velocity = u.fixed_rows::<3>(3).into();
        self.joint_velocities = u.rows(6, n).into();
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let norm_err = (self.base_orientation.as_ref().norm() - T::one()).abs();
        if norm_err > real(1e-9) {
            return Err(StateError::QuaternionNotNormalized);
        }
        if self.joint_velocities.len() != self.joint_positions.len() {
            return Err(StateError::DimensionMismatch {
                expected: self.joint_positions.len(),
                got: self.joint_velocities.len(),
            });
        }
        Ok(())
    }

    /// Advance the configuration by `u * dt` with a multiplicative update of
    /// the base orientation. The stored velocity is unchanged.
    pub fn integrate_positions(&mut self, u: &DVector<T>, dt: T) {
        let n = self.dof();
        assert_eq!(u.len(), 6 + n, "generalized velocity dimension");
        let v: Vector3<T> = u.fixed_rows::<3>(0).into();
        let w: Vector3<T> = u.fixed_rows::<3>(3).into();
        self.base_position += v * dt;
        self.base_orientation =
            self.base_orientation * UnitQuaternion::from_scaled_axis(w * dt);
        for j in 0..n {
            self.joint_positions[j] += u[6 + j] * dt;
        }
    }

    /// Copy of this state displaced by `u * dt`; used by finite-difference
    /// oracles and integrators.
    pub fn displaced(&self, u: &DVector<T>, dt: T) -> Self {
        let mut s = self.clone();
        s.integrate_positions(u, dt);
        s
    }
}

/// Pose and spatial velocity of a frame in the inertia frame.
#[derive(Clone, Debug)]
pub struct FramePlacement<T: Real> {
    pub position: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
    /// Linear velocity of the frame origin, inertia frame, m/s.
    pub linear_velocity: Vector3<T>,
    /// Angular velocity, inertia frame, rad/s.
    pub angular_velocity: Vector3<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn velocity_vector_round_trip() {
        let mut s = GeneralizedState::<f64>::zero(12);
        let u = DVector::from_fn(18, |i, _| 0.1 * i as f64 - 0.5);
        s.set_velocity_vector(&u);
        assert_relative_eq!(s.velocity_vector(), u);
    }

    #[test]
    fn integration_is_multiplicative_on_orientation() {
        let mut s = GeneralizedState::<f64>::zero(2);
        let mut u = DVector::zeros(8);
        u[4] = std::f64::consts::FRAC_PI_2; // pitch rate
        s.integrate_positions(&u, 1.0);
        assert_relative_eq!(s.base_orientation.as_ref().norm(), 1.0, epsilon = 1e-12);
        let angle = s.base_orientation.angle();
        assert_relative_eq!(angle, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn validate_rejects_denormalized_quaternion() {
        let mut s = GeneralizedState::<f64>::zero(1);
        s.base_orientation = UnitQuaternion::new_unchecked(
            nalgebra::Quaternion::new(1.0 + 1e-6, 0.0, 0.0, 0.0),
        );
        assert!(matches!(s.validate(), Err(StateError::QuaternionNotNormalized)));
    }
}
