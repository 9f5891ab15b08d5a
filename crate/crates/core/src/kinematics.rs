//! Forward kinematics, frame Jacobians and their drift terms.
//!
//! A [`KinematicsCache`] is computed once per (model, state) pair and holds,
//! for every body: world pose, world angular/linear velocity, and the
//! acceleration the body would have if the generalized acceleration were
//! zero (the velocity-product terms). Frame Jacobians follow the crate-wide
//! velocity convention of [`crate::state::GeneralizedState`]; rows are
//! ordered linear x, y, z then angular about x, y, z.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::model::{FrameRef, ModelError, RobotModel};
use crate::scalar::Real;
use crate::state::{FramePlacement, GeneralizedState};

#[derive(Debug, thiserror::Error)]
pub enum KinematicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mask selects no rows")]
    EmptyMask,
}

/// Selection of task/constraint dimensions out of {x, y, z, roll, pitch, yaw}.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimMask(pub u8);

impl DimMask {
    pub const POSITION: DimMask = DimMask(0b000111);
    pub const ORIENTATION: DimMask = DimMask(0b111000);
    pub const ALL: DimMask = DimMask(0b111111);
    /// Full pose with yaw left free.
    pub const POSE_NO_YAW: DimMask = DimMask(0b011111);

    pub fn contains(self, dim: usize) -> bool {
        self.0 & (1 << dim) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 & 0b111111 == 0
    }

    /// Indices into the 6-row full Jacobian, in ascending order.
    pub fn rows(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..6).filter(move |d| bits & (1 << d) != 0)
    }
}

struct BodyKinematics<T: Real> {
    rotation: Rotation3<T>,
    origin: Vector3<T>,
    angular_velocity: Vector3<T>,
    origin_velocity: Vector3<T>,
    /// Angular acceleration with zero generalized acceleration.
    bias_angular_acc: Vector3<T>,
    /// Linear acceleration of the body origin with zero generalized acceleration.
    bias_origin_acc: Vector3<T>,
    /// World-frame axis of the joint driving this body (unused for the base).
    world_axis: Vector3<T>,
    /// World position of the driving joint (equals `origin`).
    parent: Option<usize>,
}

/// Per-state kinematic quantities for every body of the model.
pub struct KinematicsCache<'m, T: Real> {
    pub model: &'m RobotModel<T>,
    bodies: Vec<BodyKinematics<T>>,
}

impl<'m, T: Real> KinematicsCache<'m, T> {
    pub fn new(model: &'m RobotModel<T>, state: &GeneralizedState<T>) -> Self {
        let nb = model.links.len();
        let mut bodies = Vec::with_capacity(nb);

        let base_rot: Rotation3<T> = state.base_orientation.to_rotation_matrix();
        let omega_base = base_rot * state.base_angular_velocity;
        bodies.push(BodyKinematics {
            rotation: base_rot,
            origin: state.base_position,
            angular_velocity: omega_base,
            origin_velocity: state.base_linear_velocity,
            bias_angular_acc: Vector3::zeros(),
            bias_origin_acc: Vector3::zeros(),
            world_axis: Vector3::zeros(),
            parent: None,
        });

        for (j, joint) in model.joints.iter().enumerate() {
            let p = &bodies[joint.parent];
            let q = state.joint_positions[j];
            let qd = state.joint_velocities[j];

            let origin = p.origin + p.rotation * joint.origin;
            let world_axis = p.rotation * joint.axis.into_inner();
            let rotation = p.rotation * Rotation3::from_axis_angle(&joint.axis, q);

            let r = origin - p.origin;
            let origin_velocity = p.origin_velocity + p.angular_velocity.cross(&r);
            let bias_origin_acc = p.bias_origin_acc
                + p.bias_angular_acc.cross(&r)
                + p.angular_velocity.cross(&p.angular_velocity.cross(&r));

            let angular_velocity = p.angular_velocity + world_axis * qd;
            let bias_angular_acc =
                p.bias_angular_acc + p.angular_velocity.cross(&(world_axis * qd));

            bodies.push(BodyKinematics {
                rotation,
                origin,
                angular_velocity,
                origin_velocity,
                bias_angular_acc,
                bias_origin_acc,
                world_axis,
                parent: Some(joint.parent),
            });
        }

        KinematicsCache { model, bodies }
    }

    fn world_point(&self, frame: FrameRef<T>) -> Vector3<T> {
        let b = &self.bodies[frame.link];
        b.origin + b.rotation * frame.offset
    }

    /// Pose and spatial velocity of a frame in the inertia frame.
    pub fn placement(&self, frame: FrameRef<T>) -> FramePlacement<T> {
        let b = &self.bodies[frame.link];
        let position = b.origin + b.rotation * frame.offset;
        FramePlacement {
            position,
            orientation: UnitQuaternion::from_rotation_matrix(&b.rotation),
            linear_velocity: b.origin_velocity
                + b.angular_velocity.cross(&(position - b.origin)),
            angular_velocity: b.angular_velocity,
        }
    }

    /// Full 6 x (n+6) geometric Jacobian of a frame.
    pub fn full_jacobian(&self, frame: FrameRef<T>) -> DMatrix<T> {
        let nv = self.model.nv();
        let mut jac = DMatrix::zeros(6, nv);
        let p = self.world_point(frame);

        // Base linear rows.
        for k in 0..3 {
            jac[(k, k)] = T::one();
        }
        // Base angular columns: angular velocity is given in the base frame.
        let base = &self.bodies[0];
        let r = p - base.origin;
        let lin_block = -skew(&r) * base.rotation.matrix();
        for row in 0..3 {
            for col in 0..3 {
                jac[(row, 3 + col)] = lin_block[(row, col)];
                jac[(3 + row, 3 + col)] = base.rotation.matrix()[(row, col)];
            }
        }
        // Joint columns along the chain from the frame's link to the base.
        let mut link = frame.link;
        while let Some(joint_idx) = self.model.parent_joint(link) {
            let b = &self.bodies[link];
            let lin = b.world_axis.cross(&(p - b.origin));
            for row in 0..3 {
                jac[(row, 6 + joint_idx)] = lin[row];
                jac[(3 + row, 6 + joint_idx)] = b.world_axis[row];
            }
            link = self.bodies[link].parent.expect("non-base link has a parent");
        }
        jac
    }

    /// Rows of the full Jacobian selected by `dims`.
    pub fn frame_jacobian(
        &self,
        frame: FrameRef<T>,
        dims: DimMask,
    ) -> Result<DMatrix<T>, KinematicsError> {
        if dims.is_empty() {
            return Err(KinematicsError::EmptyMask);
        }
        let full = self.full_jacobian(frame);
        Ok(select_rows(&full, dims))
    }

    /// The velocity-product term `Jdot * qdot` of a frame, selected by `dims`.
    ///
    /// Equals the classical frame acceleration evaluated with zero
    /// generalized acceleration.
    pub fn jacobian_drift(
        &self,
        frame: FrameRef<T>,
        dims: DimMask,
    ) -> Result<DVector<T>, KinematicsError> {
        if dims.is_empty() {
            return Err(KinematicsError::EmptyMask);
        }
        let b = &self.bodies[frame.link];
        let p = self.world_point(frame);
        let r = p - b.origin;
        let lin = b.bias_origin_acc
            + b.bias_angular_acc.cross(&r)
            + b.angular_velocity.cross(&b.angular_velocity.cross(&r));
        let ang = b.bias_angular_acc;
        let mut out = DVector::zeros(dims.len());
        for (i, d) in dims.rows().enumerate() {
            out[i] = if d < 3 { lin[d] } else { ang[d - 3] };
        }
        Ok(out)
    }

    /// World rotation of a body.
    pub fn body_rotation(&self, link: usize) -> &Rotation3<T> {
        &self.bodies[link].rotation
    }

    /// World angular velocity of a body.
    pub fn body_angular_velocity(&self, link: usize) -> Vector3<T> {
        self.bodies[link].angular_velocity
    }

    /// World position, velocity and bias acceleration of a body's center of
    /// mass. Used by the dynamics routines.
    pub(crate) fn com_kinematics(&self, link: usize) -> (Vector3<T>, Vector3<T>, Vector3<T>) {
        let b = &self.bodies[link];
        let c = b.origin + b.rotation * self.model.links[link].com;
        let r = c - b.origin;
        let v = b.origin_velocity + b.angular_velocity.cross(&r);
        let a = b.bias_origin_acc
            + b.bias_angular_acc.cross(&r)
            + b.angular_velocity.cross(&b.angular_velocity.cross(&r));
        (c, v, a)
    }

    pub(crate) fn body_bias_angular_acc(&self, link: usize) -> Vector3<T> {
        self.bodies[link].bias_angular_acc
    }
}

pub(crate) fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(), -v.z, v.y,
        v.z, T::zero(), -v.x,
        -v.y, v.x, T::zero(),
    )
}

fn select_rows<T: Real>(full: &DMatrix<T>, dims: DimMask) -> DMatrix<T> {
    let mut out = DMatrix::zeros(dims.len(), full.ncols());
    for (i, d) in dims.rows().enumerate() {
        out.row_mut(i).copy_from(&full.row(d));
    }
    out
}

// ---------------------------------------------------------------------------
// Convenience wrappers taking frame names
// ---------------------------------------------------------------------------

pub fn forward_kinematics<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    frame: &str,
) -> Result<FramePlacement<T>, KinematicsError> {
    let f = model.frame(frame)?;
    Ok(KinematicsCache::new(model, state).placement(f))
}

pub fn frame_jacobian<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    frame: &str,
    dims: DimMask,
) -> Result<DMatrix<T>, KinematicsError> {
    let f = model.frame(frame)?;
    KinematicsCache::new(model, state).frame_jacobian(f, dims)
}

pub fn jacobian_drift<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    frame: &str,
    dims: DimMask,
) -> Result<DVector<T>, KinematicsError> {
    let f = model.frame(frame)?;
    KinematicsCache::new(model, state).jacobian_drift(f, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_quadruped;
    use crate::test_util::random_state;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_configuration_geometry() {
        let model = default_quadruped::<f64>();
        let state = GeneralizedState::zero(model.dof());
        let foot = forward_kinematics(&model, &state, "LF_FOOT").unwrap();
        // Sum of fixed offsets along the LF chain at zero angles.
        assert_relative_eq!(foot.position.x, 0.30, epsilon = 1e-14);
        assert_relative_eq!(foot.position.y, 0.17 + 0.08, epsilon = 1e-14);
        assert_relative_eq!(foot.position.z, -0.50, epsilon = 1e-14);
    }

    #[test]
    fn rigid_translation_shifts_every_frame() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = random_state(&model, &mut rng);
        let mut shifted = state.clone();
        shifted.base_position += Vector3::new(1.0, 0.0, 0.0);
        for cf in &model.contact_frames {
            let a = forward_kinematics(&model, &state, &cf.name).unwrap();
            let b = forward_kinematics(&model, &shifted, &cf.name).unwrap();
            assert_relative_eq!(
                b.position,
                a.position + Vector3::new(1.0, 0.0, 0.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn frame_velocity_matches_finite_difference() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let state = random_state(&model, &mut rng);
            let u = state.velocity_vector();
            let dt = 1e-6;
            let fwd = state.displaced(&u, dt);
            for name in ["LF_FOOT", "RH_FOOT", "PRONG_L", "LF_SHANK"] {
                let a = forward_kinematics(&model, &state, name).unwrap();
                let b = forward_kinematics(&model, &fwd, name).unwrap();
                let fd = (b.position - a.position) / dt;
                assert_relative_eq!(a.linear_velocity, fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_difference_velocity() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let state = random_state(&model, &mut rng);
            let cache = KinematicsCache::new(&model, &state);
            let u = state.velocity_vector();
            for name in ["LF_FOOT", "RH_FOOT", "LF_SHANK", "base"] {
                let f = model.frame(name).unwrap();
                let jac = cache.frame_jacobian(f, DimMask::ALL).unwrap();
                let twist = &jac * &u;
                let pl = cache.placement(f);
                for k in 0..3 {
                    assert_relative_eq!(twist[k], pl.linear_velocity[k], epsilon = 1e-10);
                    assert_relative_eq!(twist[3 + k], pl.angular_velocity[k], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn prong_jacobian_is_constant_in_joint_space() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base_state = GeneralizedState::zero(model.dof());
        let j0 = frame_jacobian(&model, &base_state, "PRONG_L", DimMask::POSITION).unwrap();
        for _ in 0..1000 {
            let mut state = random_state(&model, &mut rng);
            // Same base pose, random joints: the prong is fixed to the torso.
            state.base_position = base_state.base_position;
            state.base_orientation = base_state.base_orientation;
            let j = frame_jacobian(&model, &state, "PRONG_L", DimMask::POSITION).unwrap();
            assert_eq!((j - &j0).abs().max(), 0.0);
        }
    }

    #[test]
    fn off_chain_joint_columns_are_zero() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = random_state(&model, &mut rng);
        let jac = frame_jacobian(&model, &state, "LF_FOOT", DimMask::ALL).unwrap();
        // LF chain is joints 0..3; all other joint columns must vanish.
        for j in 3..model.dof() {
            assert_eq!(jac.column(6 + j).abs().max(), 0.0);
        }
    }

    #[test]
    fn drift_is_zero_at_rest_and_matches_finite_difference() {
        let model = default_quadruped::<f64>();
        let rest = GeneralizedState::zero(model.dof());
        let d = jacobian_drift(&model, &rest, "LF_FOOT", DimMask::ALL).unwrap();
        assert_eq!(d.abs().max(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let state = random_state(&model, &mut rng);
            let u = state.velocity_vector();
            let dt = 1e-6;
            let fwd = state.displaced(&u, dt);
            for name in ["LF_FOOT", "RH_FOOT", "LF_SHANK"] {
                let j0 = frame_jacobian(&model, &state, name, DimMask::ALL).unwrap();
                let j1 = frame_jacobian(&model, &fwd, name, DimMask::ALL).unwrap();
                let fd = (&j1 - &j0) * (1.0 / dt) * &u;
                let drift = jacobian_drift(&model, &state, name, DimMask::ALL).unwrap();
                assert_relative_eq!(drift, fd, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let model = default_quadruped::<f64>();
        let state = GeneralizedState::zero(model.dof());
        assert!(matches!(
            frame_jacobian(&model, &state, "LF_FOOT", DimMask(0)),
            Err(KinematicsError::EmptyMask)
        ));
    }
}
