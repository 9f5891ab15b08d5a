//! Whole-body controller: one call per control cycle runs the projection,
//! the Cartesian impedance commands for the base and the limb tasks, the
//! constrained-space QP and the torque composition, and in manipulation
//! mode the external force estimate.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{bias_forces, mass_matrix, selection_matrix, standard_gravity};
use crate::kinematics::{DimMask, KinematicsCache, KinematicsError};
use crate::model::RobotModel;
use crate::projection::{
    projector, projector_derivative, stack_constraint_jacobian, ContactSet, ProjectionError,
    DEFAULT_SVD_REL_TOL,
};
use crate::qp::{
    build_constrained_space_problem, compose_torque, QpError, QpSolution, QpSolver, QpStatus,
    TorqueLimits,
};
use crate::scalar::{real, to_f64, Real};
use crate::state::GeneralizedState;
use crate::task_space::{
    impedance_wrench, nullspace_projector, operational_inertia, operational_quantities,
    pose_error, ExternalForceEstimator, ProjectedDynamics, TaskError, TaskSpec,
};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("frame {0} appears both as a contact and as a motion task")]
    FrameConflict(String),
    #[error("mode transition requested while a swing foot is between waypoints")]
    ModeChangeMidSwing,
    #[error("friction coefficient must be non-negative, got {0}")]
    NegativeFriction(f64),
}

/// Operating mode; determines the task template the scenario layer builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlMode {
    /// Swing feet tracked as 3-DOF position tasks.
    Locomotion,
    /// One leg tracked as a full 6-DOF shank pose task, with force
    /// estimation at that frame.
    Manipulation,
    /// Torso prongs added to the contact set; feet as in locomotion.
    BodyContact,
}

impl ControlMode {
    /// Dimension mask of a limb task in this mode.
    pub fn limb_task_dims(self) -> DimMask {
        match self {
            ControlMode::Manipulation => DimMask::ALL,
            _ => DimMask::POSITION,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControllerConfig<T: Real> {
    /// Control period, s.
    pub control_period: T,
    /// Pyramid coefficient applied when a contact does not override it.
    pub default_friction_mu: T,
    pub torque_limits: TorqueLimits<T>,
    pub svd_rel_tol: T,
    pub qp_tolerance: T,
    pub qp_max_iterations: usize,
    /// Low-pass cutoff of the force estimator, Hz.
    pub estimator_cutoff_hz: T,
    /// Disabling the QP stage applies the raw motion torque, clamped; kept
    /// for ablation studies.
    pub qp_stage_enabled: bool,
}

impl<T: Real> ControllerConfig<T> {
    pub fn new(n_joints: usize, torque_bound: T) -> Self {
        ControllerConfig {
            control_period: real(1.0 / 400.0),
            default_friction_mu: real(0.6),
            torque_limits: TorqueLimits::symmetric(n_joints, torque_bound),
            svd_rel_tol: crate::scalar::scaled_tol(DEFAULT_SVD_REL_TOL, 2e3),
            qp_tolerance: crate::scalar::scaled_tol(1e-8, 2e2),
            qp_max_iterations: 200,
            estimator_cutoff_hz: real(50.0),
            qp_stage_enabled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    /// Rank of the stacked contact Jacobian this cycle.
    pub constraint_rank: usize,
    /// Wall time of the cycle, s.
    pub elapsed: f64,
    /// True when the infeasibility fallback produced the torques.
    pub fallback_used: bool,
}

#[derive(Clone, Debug)]
pub struct ControlOutput<T: Real> {
    /// Actuated joint torques, N*m.
    pub joint_torques: DVector<T>,
    /// Contact forces predicted by the QP, one inertia-frame 3-vector per
    /// contact in set order.
    pub contact_forces: DVector<T>,
    /// External force estimate on the manipulation task dimensions; empty
    /// outside manipulation mode.
    pub estimated_force: DVector<T>,
    pub diagnostics: Diagnostics,
}

/// Single-owner controller state machine advanced once per cycle.
pub struct WholeBodyController<T: Real> {
    pub config: ControllerConfig<T>,
    mode: ControlMode,
    solver: QpSolver<T>,
    estimator: ExternalForceEstimator<T>,
    friction_override: Option<T>,
    prev_projector: Option<DMatrix<T>>,
    prev_contact_frames: Vec<String>,
    prev_adjustment: Option<DVector<T>>,
}

impl<T: Real> WholeBodyController<T> {
    pub fn new(config: ControllerConfig<T>) -> Self {
        let solver = QpSolver::new(config.qp_tolerance, config.qp_max_iterations);
        let estimator = ExternalForceEstimator::new(config.estimator_cutoff_hz);
        WholeBodyController {
            config,
            mode: ControlMode::Locomotion,
            solver,
            estimator,
            friction_override: None,
            prev_projector: None,
            prev_contact_frames: Vec::new(),
            prev_adjustment: None,
        }
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    /// Switch the operating mode between cycles. The caller asserts that
    /// every swing foot sits at a scripted waypoint; a transition requested
    /// mid-swing is rejected.
    pub fn set_mode(
        &mut self,
        mode: ControlMode,
        swing_feet_at_waypoints: bool,
    ) -> Result<(), ControllerError> {
        if !swing_feet_at_waypoints {
            return Err(ControllerError::ModeChangeMidSwing);
        }
        if self.mode == ControlMode::Manipulation && mode != ControlMode::Manipulation {
            self.estimator.reset();
        }
        if mode != self.mode {
            // Contact templates differ between modes; the projector history
            // and the warm start no longer apply.
            self.prev_projector = None;
            self.solver.clear_warm_start();
        }
        self.mode = mode;
        Ok(())
    }

    /// Change the friction coefficient used by the pyramid rows from the
    /// next cycle on.
    pub fn update_friction(&mut self, mu: T) -> Result<(), ControllerError> {
        if mu < T::zero() {
            return Err(ControllerError::NegativeFriction(to_f64(mu)));
        }
        self.friction_override = Some(mu);
        Ok(())
    }

    /// Latest external force estimate without advancing the filter.
    pub fn estimator(&self) -> &ExternalForceEstimator<T> {
        &self.estimator
    }

    /// Run one control cycle.
    pub fn control_step(
        &mut self,
        model: &RobotModel<T>,
        state: &GeneralizedState<T>,
        contacts: &ContactSet<T>,
        base_task: &TaskSpec<T>,
        limb_tasks: &[TaskSpec<T>],
    ) -> Result<ControlOutput<T>, ControllerError> {
        let started = Instant::now();
        let n = model.dof();
        let nv = model.nv();

        base_task.validate()?;
        for t in limb_tasks {
            t.validate()?;
            if contacts.contains(&t.frame) {
                return Err(ControllerError::FrameConflict(t.frame.clone()));
            }
        }

        let mut contacts = contacts.clone();
        if let Some(mu) = self.friction_override {
            contacts.set_friction(mu)?;
        }

        let cache = KinematicsCache::new(model, state);
        let u = state.velocity_vector();

        // Constraint-space projection, with a backward-difference projector
        // derivative. The history is discarded whenever the contact frames
        // change, since the difference would straddle a discontinuity.
        let j_c = stack_constraint_jacobian(&cache, &contacts)?;
        let proj = projector(&j_c, self.config.svd_rel_tol);
        let frames: Vec<String> = contacts.iter().map(|c| c.frame.clone()).collect();
        if frames != self.prev_contact_frames {
            self.prev_projector = None;
            self.prev_contact_frames = frames;
        }
        let pdot = projector_derivative(
            self.prev_projector.as_ref(),
            &proj.p,
            self.config.control_period,
        )?;
        self.prev_projector = Some(proj.p.clone());
        let pdot_u = &pdot * &u;

        let m = mass_matrix(&cache);
        let h = bias_forces(&cache, &standard_gravity());
        let pd = ProjectedDynamics::new(&proj, m, h, pdot_u)?;

        // Base impedance command.
        let base_frame = model.frame(&base_task.frame).map_err(KinematicsError::Model)?;
        let oq_b = operational_quantities(&cache, base_frame, base_task.dims, &pd)?;
        let err_b = pose_error(&cache.placement(base_frame), base_task);
        let f_b = impedance_wrench(base_task, &oq_b, &err_b);

        // Limb impedance commands, stacked.
        let rows: usize = limb_tasks.iter().map(|t| t.dims.len()).sum();
        let mut j_s = DMatrix::zeros(rows, nv);
        let mut f_s = DVector::zeros(rows);
        let mut estimated_force = DVector::zeros(0);
        let mut row = 0;
        for (i, task) in limb_tasks.iter().enumerate() {
            let frame = model.frame(&task.frame).map_err(KinematicsError::Model)?;
            let oq = operational_quantities(&cache, frame, task.dims, &pd)?;
            let err = pose_error(&cache.placement(frame), task);
            let f = impedance_wrench(task, &oq, &err);
            let nd = task.dims.len();
            j_s.rows_mut(row, nd).copy_from(&oq.jacobian);
            f_s.rows_mut(row, nd).copy_from(&f);
            row += nd;
            if self.mode == ControlMode::Manipulation && i == 0 {
                estimated_force =
                    self.estimator.update(task, &oq, &err, self.config.control_period);
            }
        }

        let n_s = if rows > 0 {
            let lambda_s = operational_inertia(&j_s, &pd)?;
            nullspace_projector(&j_s, &pd, &lambda_s)
        } else {
            DMatrix::identity(nv, nv)
        };

        let b = selection_matrix::<T>(n);
        let tau_m = crate::task_space::motion_torques(
            &pd.p,
            &b,
            &j_s,
            &f_s,
            &n_s,
            &oq_b.jacobian,
            &f_b,
            self.config.svd_rel_tol,
        );

        // Constrained-space stage.
        let (joint_torques, contact_forces, qp_status, qp_iterations, fallback_used) =
            if contacts.is_empty() {
                let tau = self.clamp(tau_m.rows(6, n).into_owned());
                (tau, DVector::zeros(0), QpStatus::Optimal, 0, false)
            } else {
                let cqp = build_constrained_space_problem(
                    &pd.p,
                    &pd.m,
                    &pd.m_c_inv,
                    &pd.h,
                    &pd.pdot_u,
                    &j_c,
                    &tau_m,
                    &self.config.torque_limits,
                    &contacts,
                )?;
                if !self.config.qp_stage_enabled {
                    // Ablation path: raw motion torque clamped, forces from
                    // the equality system alone.
                    let zeros_d = DVector::zeros(n);
                    let zeros_x = DVector::zeros(cqp.problem.aux_dim);
                    let lambda = cqp.recover_forces(&zeros_d, &zeros_x);
                    let tau = self.clamp(tau_m.rows(6, n).into_owned());
                    (tau, lambda, QpStatus::Optimal, 0, false)
                } else {
                    match cqp.solve(&mut self.solver) {
                        Ok(sol) if sol.status == QpStatus::Optimal => {
                            let tau = compose_torque(&tau_m, &sol)?;
                            self.prev_adjustment = Some(sol.joint_torque_adjustment.clone());
                            (tau, sol.contact_forces, sol.status, sol.iterations, false)
                        }
                        Ok(sol) => self.fallback(&tau_m, n, Some(&sol)),
                        Err(QpError::Infeasible) => self.fallback(&tau_m, n, None),
                        Err(e) => return Err(e.into()),
                    }
                }
            };

        Ok(ControlOutput {
            joint_torques,
            contact_forces,
            estimated_force,
            diagnostics: Diagnostics {
                qp_status,
                qp_iterations,
                constraint_rank: proj.rank,
                elapsed: started.elapsed().as_secs_f64(),
                fallback_used,
            },
        })
    }

    /// Infeasibility fallback: reuse the previous cycle's adjustment,
    /// clamp, and flag the cycle.
    fn fallback(
        &mut self,
        tau_m: &DVector<T>,
        n: usize,
        sol: Option<&QpSolution<T>>,
    ) -> (DVector<T>, DVector<T>, QpStatus, usize, bool) {
        let mut tau = tau_m.rows(6, n).into_owned();
        if let Some(prev) = &self.prev_adjustment {
            tau += prev;
        }
        let tau = self.clamp(tau);
        let (status, iterations, forces) = match sol {
            Some(s) => (s.status, s.iterations, s.contact_forces.clone()),
            None => (QpStatus::Infeasible, 0, DVector::zeros(0)),
        };
        (tau, forces, status, iterations, true)
    }

    fn clamp(&self, mut tau: DVector<T>) -> DVector<T> {
        let lim = &self.config.torque_limits;
        for i in 0..tau.len() {
            tau[i] = tau[i].max(lim.tau_min[i]).min(lim.tau_max[i]);
        }
        tau
    }
}
