//! Operational-space control in the constraint-free space: task inertia and
//! bias, Cartesian impedance commands, the dynamically consistent null-space
//! projector, motion torques and the external-force estimator.
//!
//! Orientation errors are the rotation vector (log map) of the relative
//! rotation between desired and current frame, expressed in inertia-frame
//! coordinates so they pair with the geometric Jacobian's angular rows.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

use crate::kinematics::{DimMask, KinematicsCache, KinematicsError};
use crate::model::FrameRef;
use crate::projection::{svd_pseudoinverse, ProjectionError, ProjectionResult};
use crate::scalar::{real, Real};
use crate::state::FramePlacement;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("task Jacobian lies in the constrained space; operational inertia undefined")]
    SingularTask,
    #[error("gain vector length {got} does not match mask size {expected}")]
    GainDimension { expected: usize, got: usize },
}

/// An operational-space target for one frame.
#[derive(Clone, Debug)]
pub struct TaskSpec<T: Real> {
    pub frame: String,
    pub dims: DimMask,
    pub desired_position: Vector3<T>,
    pub desired_orientation: UnitQuaternion<T>,
    /// Desired linear velocity, inertia frame, m/s.
    pub desired_linear_velocity: Vector3<T>,
    /// Desired angular velocity, inertia frame, rad/s.
    pub desired_angular_velocity: Vector3<T>,
    pub desired_linear_acceleration: Vector3<T>,
    pub desired_angular_acceleration: Vector3<T>,
    /// Diagonal stiffness, one entry per selected dimension (N/m, N m/rad).
    pub stiffness: DVector<T>,
    /// Diagonal damping, one entry per selected dimension (N s/m, N m s/rad).
    pub damping: DVector<T>,
}

impl<T: Real> TaskSpec<T> {
    /// Hold a pose with uniform gains on every selected dimension.
    pub fn hold(
        frame: impl Into<String>,
        dims: DimMask,
        placement: &FramePlacement<T>,
        stiffness: T,
        damping: T,
    ) -> Self {
        let nd = dims.len();
        TaskSpec {
            frame: frame.into(),
            dims,
            desired_position: placement.position,
            desired_orientation: placement.orientation,
            desired_linear_velocity: Vector3::zeros(),
            desired_angular_velocity: Vector3::zeros(),
            desired_linear_acceleration: Vector3::zeros(),
            desired_angular_acceleration: Vector3::zeros(),
            stiffness: DVector::from_element(nd, stiffness),
            damping: DVector::from_element(nd, damping),
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let nd = self.dims.len();
        for v in [&self.stiffness, &self.damping] {
            if v.len() != nd {
                return Err(TaskError::GainDimension { expected: nd, got: v.len() });
            }
            if v.iter().any(|&g| g < T::zero()) {
                return Err(TaskError::GainDimension { expected: nd, got: v.len() });
            }
        }
        Ok(())
    }

    /// Desired twist and acceleration restricted to the selected dimensions.
    pub fn desired_velocity_masked(&self) -> DVector<T> {
        mask_six(
            self.dims,
            &self.desired_linear_velocity,
            &self.desired_angular_velocity,
        )
    }

    pub fn desired_acceleration_masked(&self) -> DVector<T> {
        mask_six(
            self.dims,
            &self.desired_linear_acceleration,
            &self.desired_angular_acceleration,
        )
    }
}

fn mask_six<T: Real>(dims: DimMask, lin: &Vector3<T>, ang: &Vector3<T>) -> DVector<T> {
    let mut out = DVector::zeros(dims.len());
    for (i, d) in dims.rows().enumerate() {
        out[i] = if d < 3 { lin[d] } else { ang[d - 3] };
    }
    out
}

/// Task-space tracking error and its rate, masked to the task dimensions.
#[derive(Clone, Debug)]
pub struct PoseError<T: Real> {
    pub error: DVector<T>,
    pub error_rate: DVector<T>,
}

/// Rotation vector of the relative rotation current vs desired, in
/// inertia-frame coordinates. A tie at pi radians picks the axis whose
/// first nonzero component is non-negative.
pub fn orientation_error_vector<T: Real>(
    current: &UnitQuaternion<T>,
    desired: &UnitQuaternion<T>,
) -> Vector3<T> {
    let rel = current * desired.inverse();
    let mut v = rel.scaled_axis();
    let angle = v.norm();
    if (angle - T::pi()).abs() < real(1e-9) {
        for k in 0..3 {
            if v[k].abs() > real(1e-12) {
                if v[k] < T::zero() {
                    v = -v;
                }
                break;
            }
        }
    }
    v
}

/// Deviation of a frame from its task target (Cartesian error and rate).
pub fn pose_error<T: Real>(current: &FramePlacement<T>, task: &TaskSpec<T>) -> PoseError<T> {
    let pos_err = current.position - task.desired_position;
    let ang_err = orientation_error_vector(&current.orientation, &task.desired_orientation);
    let lin_rate = current.linear_velocity - task.desired_linear_velocity;
    let ang_rate = current.angular_velocity - task.desired_angular_velocity;
    PoseError {
        error: mask_six(task.dims, &pos_err, &ang_err),
        error_rate: mask_six(task.dims, &lin_rate, &ang_rate),
    }
}

/// Unmasked 6-component pose error (for logging and analysis).
pub fn full_pose_error<T: Real>(
    current: &FramePlacement<T>,
    desired_position: &Vector3<T>,
    desired_orientation: &UnitQuaternion<T>,
) -> [T; 6] {
    let p = current.position - desired_position;
    let o = orientation_error_vector(&current.orientation, desired_orientation);
    [p.x, p.y, p.z, o.x, o.y, o.z]
}

/// Per-cycle projected dynamics quantities shared by all tasks.
pub struct ProjectedDynamics<T: Real> {
    pub p: DMatrix<T>,
    pub m: DMatrix<T>,
    pub m_c: DMatrix<T>,
    pub m_c_inv: DMatrix<T>,
    pub h: DVector<T>,
    /// Pdot * qdot at the current cycle.
    pub pdot_u: DVector<T>,
}

impl<T: Real> ProjectedDynamics<T> {
    pub fn new(
        proj: &ProjectionResult<T>,
        m: DMatrix<T>,
        h: DVector<T>,
        pdot_u: DVector<T>,
    ) -> Result<Self, ProjectionError> {
        let m_c = crate::projection::constrained_inertia(&proj.p, &m)?;
        let m_c_inv = m_c
            .clone()
            .try_inverse()
            .ok_or(ProjectionError::SingularInertia(f64::INFINITY))?;
        Ok(ProjectedDynamics { p: proj.p.clone(), m, m_c, m_c_inv, h, pdot_u })
    }
}

/// Operational-space inertia, bias and Jacobian of one task.
#[derive(Clone, Debug)]
pub struct OperationalQuantities<T: Real> {
    pub lambda: DMatrix<T>,
    pub h_c: DVector<T>,
    pub jacobian: DMatrix<T>,
}

/// Relative condition threshold beyond which the task inertia inversion is
/// Tikhonov-damped.
const LAMBDA_COND_LIMIT: f64 = 1e8;
/// Threshold below which the task is considered fully constrained.
const LAMBDA_SINGULAR_TOL: f64 = 1e-12;

/// Invert the task-space mobility `J Mc^-1 P J^T`, damping near singularity.
fn invert_mobility<T: Real>(s: &DMatrix<T>) -> Result<DMatrix<T>, TaskError> {
    let nd = s.nrows();
    let sym = (s + s.transpose()) * real::<T>(0.5);
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    let max_ev = eig.eigenvalues.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
    if max_ev < real(LAMBDA_SINGULAR_TOL) {
        return Err(TaskError::SingularTask);
    }
    let min_ev = eig.eigenvalues.iter().fold(max_ev, |a, &b| a.min(b.abs()));
    if min_ev > max_ev * real(1.0 / LAMBDA_COND_LIMIT) {
        let lambda = sym.clone().try_inverse().ok_or(TaskError::SingularTask)?;
        return Ok((lambda.clone() + lambda.transpose()) * real::<T>(0.5));
    }
    // Tikhonov damping scaled by the mobility trace.
    let mut trace = T::zero();
    for i in 0..nd {
        trace += sym[(i, i)];
    }
    let sigma = real::<T>(1e-6) * trace / real(nd as f64);
    let damped = sym + DMatrix::identity(nd, nd) * sigma;
    damped.try_inverse().ok_or(TaskError::SingularTask)
}

/// Operational inertia of an arbitrary (possibly stacked) task Jacobian.
pub fn operational_inertia<T: Real>(
    j_s: &DMatrix<T>,
    pd: &ProjectedDynamics<T>,
) -> Result<DMatrix<T>, TaskError> {
    let mobility = j_s * &pd.m_c_inv * &pd.p * j_s.transpose();
    invert_mobility(&mobility)
}

/// Task inertia and nonlinear bias in the constraint-free space.
pub fn operational_quantities<T: Real>(
    cache: &KinematicsCache<T>,
    frame: FrameRef<T>,
    dims: DimMask,
    pd: &ProjectedDynamics<T>,
) -> Result<OperationalQuantities<T>, TaskError> {
    let jac = cache.frame_jacobian(frame, dims)?;
    let jdot_u = cache.jacobian_drift(frame, dims)?;

    let j_mcinv = &jac * &pd.m_c_inv;
    let mobility = &j_mcinv * &pd.p * jac.transpose();
    let lambda = invert_mobility(&mobility)?;

    let ph_minus = &pd.p * &pd.h - &pd.pdot_u;
    let h_c = &lambda * (&j_mcinv * ph_minus - jdot_u);

    Ok(OperationalQuantities { lambda, h_c, jacobian: jac })
}

/// Cartesian impedance command:
/// `F = h_c + Lambda xdd_d - D xerr_rate - K xerr`.
pub fn impedance_wrench<T: Real>(
    task: &TaskSpec<T>,
    quantities: &OperationalQuantities<T>,
    err: &PoseError<T>,
) -> DVector<T> {
    let mut f = quantities.h_c.clone() + &quantities.lambda * task.desired_acceleration_masked();
    for i in 0..f.len() {
        f[i] -= task.damping[i] * err.error_rate[i] + task.stiffness[i] * err.error[i];
    }
    f
}

/// Dynamically consistent null-space projector of the swing task:
/// `N = I - Js^T Jbar^T` with `Jbar = Mc^-1 P Js^T Lambda_s`.
pub fn nullspace_projector<T: Real>(
    j_s: &DMatrix<T>,
    pd: &ProjectedDynamics<T>,
    lambda_s: &DMatrix<T>,
) -> DMatrix<T> {
    let nv = pd.p.nrows();
    if j_s.nrows() == 0 {
        return DMatrix::identity(nv, nv);
    }
    let jbar = &pd.m_c_inv * &pd.p * j_s.transpose() * lambda_s;
    DMatrix::identity(nv, nv) - j_s.transpose() * jbar.transpose()
}

/// Motion torque of the Cartesian impedance law:
/// `tau_m = (PB)+ P (Js^T Fs + Ns Jb^T Fb)`. Floating-base rows vanish.
pub fn motion_torques<T: Real>(
    p: &DMatrix<T>,
    b: &DMatrix<T>,
    j_s: &DMatrix<T>,
    f_s: &DVector<T>,
    n_s: &DMatrix<T>,
    j_b: &DMatrix<T>,
    f_b: &DVector<T>,
    svd_rel_tol: T,
) -> DVector<T> {
    let pb = p * b;
    let pb_pinv = svd_pseudoinverse(&pb, svd_rel_tol);
    let mut force = j_b.transpose() * f_b;
    force = n_s * force;
    if j_s.nrows() > 0 {
        force += j_s.transpose() * f_s;
    }
    pb_pinv * (p * force)
}

/// Sensorless external-force estimator: `F = Lambda xerr_dd + D xerr_d + K xerr`
/// with the error acceleration from backward differences of the error rate,
/// low-pass filtered.
#[derive(Clone, Debug)]
pub struct ExternalForceEstimator<T: Real> {
    prev_error_rate: Option<DVector<T>>,
    filtered_accel: Option<DVector<T>>,
    /// First-order low-pass cutoff, Hz.
    pub cutoff_hz: T,
}

impl<T: Real> ExternalForceEstimator<T> {
    pub fn new(cutoff_hz: T) -> Self {
        ExternalForceEstimator { prev_error_rate: None, filtered_accel: None, cutoff_hz }
    }

    pub fn reset(&mut self) {
        self.prev_error_rate = None;
        self.filtered_accel = None;
    }

    /// Error acceleration currently used by the estimate (post-filter).
    pub fn error_accel(&self) -> Option<&DVector<T>> {
        self.filtered_accel.as_ref()
    }

    pub fn update(
        &mut self,
        task: &TaskSpec<T>,
        quantities: &OperationalQuantities<T>,
        err: &PoseError<T>,
        dt: T,
    ) -> DVector<T> {
        let nd = err.error.len();
        let raw_accel = match &self.prev_error_rate {
            Some(prev) if prev.len() == nd => (&err.error_rate - prev) / dt,
            _ => DVector::zeros(nd),
        };
        self.prev_error_rate = Some(err.error_rate.clone());

        let accel = match &self.filtered_accel {
            Some(f) if f.len() == nd => {
                let two_pi = real::<T>(2.0) * T::pi();
                let alpha = dt / (dt + T::one() / (two_pi * self.cutoff_hz));
                f + (&raw_accel - f) * alpha
            }
            _ => raw_accel,
        };
        self.filtered_accel = Some(accel.clone());

        let mut f_hat = &quantities.lambda * accel;
        for i in 0..nd {
            f_hat[i] += task.damping[i] * err.error_rate[i] + task.stiffness[i] * err.error[i];
        }
        f_hat
    }
}
