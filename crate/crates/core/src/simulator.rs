//! Ground-truth constrained forward dynamics and integration.
//!
//! The simulator solves the full KKT system of the unprojected equations of
//! motion, deliberately independent of the controller's projected dynamics
//! path, so closing the loop cross-validates the two derivations. Contacts
//! are hard bilateral point constraints activated and deactivated by the
//! scenario script; there is no collision detection, no impacts (activation
//! projects the generalized velocity onto the constraint null space) and no
//! slip.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::dynamics::{bias_forces, embed_joint_torques, mass_matrix};
use crate::kinematics::{DimMask, KinematicsCache, KinematicsError};
use crate::model::RobotModel;
use crate::projection::{
    stack_constraint_jacobian, svd_pseudoinverse, ContactPoint, ContactSet, ProjectionError,
};
use crate::scalar::{real, Real};
use crate::state::GeneralizedState;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("KKT system singular beyond tolerance (residual {0})")]
    SingularKkt(f64),
    #[error("simulation diverged at t = {0} s")]
    Diverged(f64),
    #[error("torque vector has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Integration scheme for [`SimWorld::step`].
///
/// Semi-implicit Euler is the workhorse for closed-loop runs; the
/// Runge-Kutta option exists for the long unactuated energy-conservation
/// checks, where first-order integration error would dominate the quantity
/// under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    SemiImplicitEuler,
    RungeKutta4,
}

/// Step size and constraint stabilization gains.
#[derive(Clone, Copy, Debug)]
pub struct IntegratorConfig<T: Real> {
    /// Step size, s.
    pub dt: T,
    /// Baumgarte velocity gain, 1/s.
    pub baumgarte_alpha: T,
    /// Baumgarte position gain, 1/s^2.
    pub baumgarte_beta: T,
    pub integrator: Integrator,
}

impl<T: Real> Default for IntegratorConfig<T> {
    fn default() -> Self {
        Self {
            dt: real(1e-3),
            baumgarte_alpha: real(20.0),
            baumgarte_beta: real(100.0),
            integrator: Integrator::SemiImplicitEuler,
        }
    }
}

/// Flat terrain region; scenario scripting data, not collision geometry.
#[derive(Clone, Debug)]
pub struct TerrainPlane<T: Real> {
    pub point: Vector3<T>,
    pub normal: Vector3<T>,
    pub friction_mu: T,
}

impl<T: Real> TerrainPlane<T> {
    pub fn horizontal(height: T, friction_mu: T) -> Self {
        Self {
            point: Vector3::new(T::zero(), T::zero(), height),
            normal: Vector3::new(T::zero(), T::zero(), T::one()),
            friction_mu,
        }
    }
}

/// External wrench applied at a frame during a time window.
#[derive(Clone, Debug)]
pub struct ExternalWrench<T: Real> {
    pub frame: String,
    /// Force in the inertia frame, N.
    pub force: Vector3<T>,
    /// Torque in the inertia frame, N*m.
    pub torque: Vector3<T>,
    pub t_start: T,
    pub t_end: T,
}

/// A scripted contact with its captured anchor point.
#[derive(Clone, Debug)]
struct ActiveContact<T: Real> {
    point: ContactPoint<T>,
    /// World position of the contact frame at activation time.
    anchor: Vector3<T>,
}

/// Simulation state for one scenario run.
pub struct SimWorld<T: Real> {
    pub model: RobotModel<T>,
    pub state: GeneralizedState<T>,
    contacts: Vec<ActiveContact<T>>,
    pub terrain: Vec<TerrainPlane<T>>,
    /// Gravity acceleration, m/s^2.
    pub gravity: Vector3<T>,
    /// Simulated time, s.
    pub time: T,
    wrenches: Vec<ExternalWrench<T>>,
}

impl<T: Real> SimWorld<T> {
    pub fn new(model: RobotModel<T>, state: GeneralizedState<T>) -> Self {
        Self {
            model,
            state,
            contacts: Vec::new(),
            terrain: vec![TerrainPlane::horizontal(T::zero(), real(0.6))],
            gravity: crate::dynamics::standard_gravity(),
            time: T::zero(),
            wrenches: Vec::new(),
        }
    }

    /// Replace the active contact set, anchoring each constraint at the
    /// current world position of its frame. The generalized velocity is
    /// projected onto the constraint null space so the new contacts start
    /// at rest (no impact dynamics).
    pub fn set_contacts(&mut self, contacts: &ContactSet<T>) -> Result<(), SimError> {
        let cache = KinematicsCache::new(&self.model, &self.state);
        let mut active = Vec::with_capacity(contacts.len());
        for cp in contacts.iter() {
            let frame = self.model.frame(&cp.frame).map_err(KinematicsError::Model)?;
            let placement = cache.placement(frame);
            active.push(ActiveContact { point: cp.clone(), anchor: placement.position });
        }
        self.contacts = active;
        if !contacts.is_empty() {
            let j_c = stack_constraint_jacobian(&cache, contacts)?;
            let j_c_pinv = svd_pseudoinverse(&j_c, real(crate::projection::DEFAULT_SVD_REL_TOL));
            let u = self.state.velocity_vector();
            let projected = &u - j_c_pinv * (&j_c * &u);
            self.state.set_velocity_vector(&projected);
        }
        Ok(())
    }

    pub fn clear_contacts(&mut self) {
        self.contacts.clear();
    }

    /// The current contacts as a plain set, for handing to the controller.
    pub fn contact_set(&self) -> ContactSet<T> {
        ContactSet::new(self.contacts.iter().map(|c| c.point.clone()).collect())
            .expect("active contacts were validated at activation")
    }

    /// Schedule a wrench on `frame`, active for `t_start <= t < t_end`.
    pub fn apply_external_force(
        &mut self,
        frame: impl Into<String>,
        force: Vector3<T>,
        torque: Vector3<T>,
        t_start: T,
        t_end: T,
    ) -> Result<(), SimError> {
        let frame = frame.into();
        self.model.frame(&frame).map_err(KinematicsError::Model)?;
        self.wrenches.push(ExternalWrench { frame, force, torque, t_start, t_end });
        Ok(())
    }

    /// Generalized force of all wrenches active at time `t`.
    fn wrench_forces(&self, cache: &KinematicsCache<T>, t: T) -> Result<DVector<T>, SimError> {
        let mut out = DVector::zeros(self.model.nv());
        for w in &self.wrenches {
            if t < w.t_start || t >= w.t_end {
                continue;
            }
            let frame = self.model.frame(&w.frame).map_err(KinematicsError::Model)?;
            let j = cache.full_jacobian(frame);
            let mut wrench = DVector::zeros(6);
            for k in 0..3 {
                wrench[k] = w.force[k];
                wrench[3 + k] = w.torque[k];
            }
            out += j.transpose() * wrench;
        }
        Ok(out)
    }

    /// Constrained forward dynamics at the current state.
    ///
    /// Solves the saddle-point system
    ///   [ M  -Jc' ] [qdd]   [ B tau + J' w_ext - h ]
    ///   [ Jc   0  ] [lam] = [ -Jcdot u - stabilization ]
    /// by a least-squares pseudo-inverse, which tolerates rank-deficient
    /// contact Jacobians and returns the minimum-norm force in that case.
    pub fn constrained_forward_dynamics(
        &self,
        tau_j: &DVector<T>,
        config: &IntegratorConfig<T>,
    ) -> Result<(DVector<T>, DVector<T>), SimError> {
        self.dynamics_at(&self.state, tau_j, config)
    }

    fn dynamics_at(
        &self,
        state: &GeneralizedState<T>,
        tau_j: &DVector<T>,
        config: &IntegratorConfig<T>,
    ) -> Result<(DVector<T>, DVector<T>), SimError> {
        let n = self.model.dof();
        let nv = self.model.nv();
        if tau_j.len() != n {
            return Err(SimError::Dimension { expected: n, got: tau_j.len() });
        }
        let cache = KinematicsCache::new(&self.model, state);
        let m = mass_matrix(&cache);
        let h = bias_forces(&cache, &self.gravity);
        let rhs_top = embed_joint_torques(tau_j) + self.wrench_forces(&cache, self.time)? - h;

        let nc = self.contacts.len();
        if nc == 0 {
            let qdd = m
                .cholesky()
                .ok_or(SimError::SingularKkt(f64::INFINITY))?
                .solve(&rhs_top);
            return Ok((qdd, DVector::zeros(0)));
        }

        let mut j_c = DMatrix::zeros(3 * nc, nv);
        let mut rhs_bottom = DVector::zeros(3 * nc);
        for (i, ac) in self.contacts.iter().enumerate() {
            let frame = self.model.frame(&ac.point.frame).map_err(KinematicsError::Model)?;
            let block = cache.frame_jacobian(frame, DimMask::POSITION)?;
            let drift = cache.jacobian_drift(frame, DimMask::POSITION)?;
            let placement = cache.placement(frame);
            let pos_err = placement.position - ac.anchor;
            let vel_err = placement.linear_velocity;
            for r in 0..3 {
                rhs_bottom[3 * i + r] = -drift[r]
                    - real::<T>(2.0) * config.baumgarte_alpha * vel_err[r]
                    - config.baumgarte_beta * pos_err[r];
            }
            j_c.rows_mut(3 * i, 3).copy_from(&block);
        }

        let dim = nv + 3 * nc;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (nv, nv)).copy_from(&m);
        kkt.view_mut((0, nv), (nv, 3 * nc)).copy_from(&(-j_c.transpose()));
        kkt.view_mut((nv, 0), (3 * nc, nv)).copy_from(&j_c);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, nv).copy_from(&rhs_top);
        rhs.rows_mut(nv, 3 * nc).copy_from(&rhs_bottom);

        let sol = svd_pseudoinverse(&kkt, crate::scalar::scaled_tol(1e-10, 2e2)) * &rhs;
        let residual = (&kkt * &sol - &rhs).norm();
        let scale = T::one() + rhs.norm();
        if residual > crate::scalar::scaled_tol::<T>(1e-6, 2e4) * scale {
            return Err(SimError::SingularKkt(crate::scalar::to_f64(residual / scale)));
        }
        let qdd = sol.rows(0, nv).into_owned();
        let lambda = sol.rows(nv, 3 * nc).into_owned();

        // The constraint rows must hold exactly, not just in least squares.
        let acc_residual = (&j_c * &qdd - rhs.rows(nv, 3 * nc)).norm();
        if acc_residual > crate::scalar::scaled_tol::<T>(1e-6, 2e4) * scale {
            return Err(SimError::SingularKkt(crate::scalar::to_f64(acc_residual / scale)));
        }
        Ok((qdd, lambda))
    }

    /// Advance the state by one step and return the contact forces used.
    pub fn step(
        &mut self,
        tau_j: &DVector<T>,
        config: &IntegratorConfig<T>,
    ) -> Result<DVector<T>, SimError> {
        let lambda = match config.integrator {
            Integrator::SemiImplicitEuler => {
                let (qdd, lambda) = self.dynamics_at(&self.state, tau_j, config)?;
                let u = self.state.velocity_vector() + qdd * config.dt;
                self.state.set_velocity_vector(&u);
                self.state.integrate_positions(&u, config.dt);
                lambda
            }
            Integrator::RungeKutta4 => self.rk4_step(tau_j, config)?,
        };
        self.time += config.dt;
        if !self.state_is_finite() {
            return Err(SimError::Diverged(crate::scalar::to_f64(self.time)));
        }
        Ok(lambda)
    }

    /// Classical fourth-order step; base pose increments are applied
    /// multiplicatively through [`GeneralizedState::displaced`].
    fn rk4_step(
        &mut self,
        tau_j: &DVector<T>,
        config: &IntegratorConfig<T>,
    ) -> Result<DVector<T>, SimError> {
        let dt = config.dt;
        let half = dt / real(2.0);
        let s0 = self.state.clone();
        let u1 = s0.velocity_vector();

        let (a1, lambda) = self.dynamics_at(&s0, tau_j, config)?;
        let mut s2 = s0.displaced(&u1, half);
        let u2 = &u1 + &a1 * half;
        s2.set_velocity_vector(&u2);

        let (a2, _) = self.dynamics_at(&s2, tau_j, config)?;
        let mut s3 = s0.displaced(&u2, half);
        let u3 = &u1 + &a2 * half;
        s3.set_velocity_vector(&u3);

        let (a3, _) = self.dynamics_at(&s3, tau_j, config)?;
        let mut s4 = s0.displaced(&u3, dt);
        let u4 = &u1 + &a3 * dt;
        s4.set_velocity_vector(&u4);

        let (a4, _) = self.dynamics_at(&s4, tau_j, config)?;

        let two = real::<T>(2.0);
        let sixth = dt / real::<T>(6.0);
        let u_avg = (&u1 + (&u2 + &u3) * two + &u4) / real::<T>(6.0);
        let a_sum = a1 + (a2 + a3) * two + a4;
        let u_new = &u1 + a_sum * sixth;
        self.state = s0.displaced(&u_avg, dt);
        self.state.set_velocity_vector(&u_new);
        Ok(lambda)
    }

    fn state_is_finite(&self) -> bool {
        let s = &self.state;
        s.base_position.iter().all(|v| v.is_finite())
            && s.base_orientation.coords.iter().all(|v| v.is_finite())
            && s.base_linear_velocity.iter().all(|v| v.is_finite())
            && s.base_angular_velocity.iter().all(|v| v.is_finite())
            && s.joint_positions.iter().all(|v| v.is_finite())
            && s.joint_velocities.iter().all(|v| v.is_finite())
    }
}
