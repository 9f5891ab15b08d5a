//! Scripted scenario definitions, the closed-loop runner and the property
//! checks replaying the desk-scale evaluations.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    ControlMode, ControllerConfig, ControllerError, WholeBodyController,
};
use crate::kinematics::{DimMask, KinematicsCache};
use crate::model::RobotModel;
use crate::projection::{ContactPoint, ContactSet};
use crate::qp::{friction_pyramid_rows, QpStatus};
use crate::simulator::{IntegratorConfig, SimError, SimWorld};
use crate::task_space::{full_pose_error, TaskSpec};
use crate::trajectories::{
    circle_trajectory, quintic_point, OrientationSequence, RotationSegment,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("timeline events must be sorted by time ({0})")]
    UnsortedTimeline(String),
    #[error("frame {frame} is a contact and a motion task at t = {t}")]
    ContactTaskOverlap { frame: String, t: f64 },
    #[error("scenario references unknown frame {0}")]
    UnknownFrame(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

// ---------------------------------------------------------------------------
// On-disk schema (always f64)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSchema {
    pub frame: String,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Surface roll-pitch-yaw, rad; tilts the friction pyramid.
    #[serde(default)]
    pub surface_rpy: [f64; 3],
}

fn default_mu() -> f64 {
    0.6
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSchema {
    /// Replace the contact set (anchors captured at this instant).
    Contacts { t: f64, frames: Vec<ContactSchema> },
    /// Switch the controller mode.
    Mode { t: f64, mode: ModeSchema },
    /// Change the friction coefficient used by the controller.
    Friction { t: f64, mu: f64 },
    /// Schedule an external wrench in the simulator.
    Wrench {
        frame: String,
        force: [f64; 3],
        torque: [f64; 3],
        t_start: f64,
        t_end: f64,
    },
}

impl EventSchema {
    fn time(&self) -> f64 {
        match self {
            EventSchema::Contacts { t, .. }
            | EventSchema::Mode { t, .. }
            | EventSchema::Friction { t, .. } => *t,
            EventSchema::Wrench { t_start, .. } => *t_start,
        }
    }
}

#[derive(Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
pub enum ModeSchema {
    Locomotion,
    Manipulation,
    BodyContact,
}

impl From<ModeSchema> for ControlMode {
    fn from(m: ModeSchema) -> ControlMode {
        match m {
            ModeSchema::Locomotion => ControlMode::Locomotion,
            ModeSchema::Manipulation => ControlMode::Manipulation,
            ModeSchema::BodyContact => ControlMode::BodyContact,
        }
    }
}

#[derive(Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
pub enum DimsSchema {
    Position,
    Pose,
    PoseNoYaw,
}

impl From<DimsSchema> for DimMask {
    fn from(d: DimsSchema) -> DimMask {
        match d {
            DimsSchema::Position => DimMask::POSITION,
            DimsSchema::Pose => DimMask::ALL,
            DimsSchema::PoseNoYaw => DimMask::POSE_NO_YAW,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentSchema {
    /// Quintic ramp of the base position target by `offset`.
    BaseShift { t_start: f64, duration: f64, offset: [f64; 3] },
    /// Counterclockwise x-y circle of the base target. The circle center is
    /// placed so the target is continuous at entry (current target =
    /// center + radius on +x).
    BaseCircle { t_start: f64, radius: f64, period: f64, cycles: f64 },
    /// Rotation actions about a pivot frame, rigidly carrying the base.
    BaseRotationSequence {
        t_start: f64,
        pivot_frame: String,
        segments: Vec<RotationSegmentSchema>,
    },
    /// Hold a limb frame at the pose it has at `t_start`. Orientation axes
    /// have much smaller task inertia than position axes, so they take
    /// separate gains.
    LimbHold {
        t_start: f64,
        frame: String,
        dims: DimsSchema,
        stiffness: f64,
        damping: f64,
        #[serde(default)]
        stiffness_angular: Option<f64>,
        #[serde(default)]
        damping_angular: Option<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationSegmentSchema {
    pub axis: [f64; 3],
    pub amplitude: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropertySchema {
    /// Held-limb max position error stays below `factor` times the base
    /// max position error.
    Hierarchy { foot_frame: String, factor: f64 },
    /// Relaxed yaw: the task frame's yaw error exceeds each controlled
    /// orientation axis error.
    RelaxedYawDominates { frame: String },
    /// Max position error of the listed frames stays below `max` m.
    TaskErrorBound { frames: Vec<String>, max: f64 },
    /// Fraction of cycles with an optimal QP solve is at least `min`.
    QpOptimalFraction { min: f64 },
    /// Every logged contact force satisfies its friction pyramid within
    /// `tol`.
    FrictionPyramid { tol: f64 },
    /// At least one logged contact force violates its pyramid by more than
    /// `tol` (ablation check).
    FrictionViolationExists { tol: f64 },
    /// Constraint rank equals `value` on every cycle after `t`.
    RankEquals { t: f64, value: usize },
    /// Estimated force linear part matches `magnitude` within `rel_tol` at
    /// time `t_check`.
    EstimatorAccuracy { magnitude: f64, rel_tol: f64, t_check: f64 },
    /// Estimate change between two instants stays below `bound` N.
    EstimatorIsolation { t_before: f64, t_after: f64, bound: f64 },
    /// Each stance foot's normal force equals weight/4 within `rel_tol`
    /// at the final cycle.
    WeightShare { rel_tol: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSchema {
    pub name: String,
    pub description: String,
    pub duration: f64,
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    #[serde(default = "default_true")]
    pub qp_stage_enabled: bool,
    /// Base task stiffness and damping.
    pub base_gains: [f64; 2],
    /// Shift applied to the standing pose base height, m (0 keeps it).
    #[serde(default)]
    pub initial_base_shift: [f64; 3],
    /// Hip-flexion and knee angle of the symmetric stance, rad; None uses
    /// the default (0.6, -1.2).
    #[serde(default)]
    pub stance_pose: Option<[f64; 2]>,
    pub timeline: Vec<EventSchema>,
    pub segments: Vec<SegmentSchema>,
    pub properties: Vec<PropertySchema>,
}

fn default_control_period() -> f64 {
    1.0 / 400.0
}

fn default_true() -> bool {
    true
}

impl ScenarioSchema {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let schema: ScenarioSchema =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    /// Static consistency checks: sorted timeline, no frame that is a
    /// contact and a motion task at the same time.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut last = f64::NEG_INFINITY;
        for ev in &self.timeline {
            let t = ev.time();
            if t < last {
                return Err(ScenarioError::UnsortedTimeline(self.name.clone()));
            }
            last = t;
        }
        // Track the contact set over time and compare against task windows.
        for seg in &self.segments {
            if let SegmentSchema::LimbHold { t_start, frame, .. } = seg {
                let mut active: Vec<String> = Vec::new();
                for ev in &self.timeline {
                    if let EventSchema::Contacts { t, frames } = ev {
                        if *t <= *t_start {
                            active = frames.iter().map(|c| c.frame.clone()).collect();
                        }
                    }
                }
                if active.iter().any(|f| f == frame) {
                    return Err(ScenarioError::ContactTaskOverlap {
                        frame: frame.clone(),
                        t: *t_start,
                    });
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run log, report and property results
// ---------------------------------------------------------------------------

/// Per-cycle record of one contact force.
#[derive(Clone, Debug)]
pub struct ForceRecord {
    pub frame: String,
    pub force: [f64; 3],
    pub mu: f64,
    pub surface_rpy: [f64; 3],
}

/// Full time-series log of one run; the CSV emitters consume this.
#[derive(Default)]
pub struct RunLog {
    pub time: Vec<f64>,
    /// Generalized position coordinates per cycle (base pose then joints).
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub torques: Vec<[f64; 12]>,
    /// Base task error, 6 axes against the current reference.
    pub base_error: Vec<[f64; 6]>,
    /// Per-frame limb task errors, 6 axes against the hold target.
    pub task_errors: BTreeMap<String, Vec<(f64, [f64; 6])>>,
    pub forces: Vec<(f64, Vec<ForceRecord>)>,
    pub qp_status: Vec<QpStatus>,
    pub rank: Vec<usize>,
    pub fallback: Vec<bool>,
    pub estimate: Vec<(f64, Vec<f64>)>,
    pub cycle_seconds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub steps: usize,
    pub qp_optimal: usize,
    pub qp_fallback: usize,
    pub max_pyramid_violation: f64,
    pub properties: Vec<PropertyResult>,
    pub mean_cycle_seconds: f64,
    pub max_cycle_seconds: f64,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

fn rpy_quaternion(rpy: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2])
}

/// Symmetric standing pose with all four feet on the ground plane; the
/// default initial state of every scenario.
pub fn standing_state<T: crate::scalar::Real>(
    model: &RobotModel<T>,
) -> crate::state::GeneralizedState<T> {
    standing_state_with(model, crate::scalar::real(0.6), crate::scalar::real(-1.2))
}

/// Symmetric standing pose with chosen hip-flexion and knee angles. Deeper
/// knee bends carry larger internal tangential forces at rest, so the
/// low-friction scenario uses a straighter stance.
pub fn standing_state_with<T: crate::scalar::Real>(
    model: &RobotModel<T>,
    hfe: T,
    kfe: T,
) -> crate::state::GeneralizedState<T> {
    let mut q = nalgebra::DVector::zeros(model.dof());
    // Fore legs bend backward, hind legs forward, so the pose and the
    // center of mass are symmetric about the torso center.
    for leg in 0..4 {
        let sign: T = if leg < 2 { T::one() } else { -T::one() };
        q[3 * leg + 1] = sign * hfe;
        q[3 * leg + 2] = sign * kfe;
    }
    let mut state = crate::state::GeneralizedState::from_joint_positions(q);
    // Put the feet on the ground plane.
    let cache = KinematicsCache::new(model, &state);
    let foot = cache.placement(model.frame("LF_FOOT").unwrap());
    state.base_position = Vector3::new(T::zero(), T::zero(), -foot.position.z);
    state
}

fn contact_set(frames: &[ContactSchema]) -> ContactSet<f64> {
    ContactSet::new(
        frames
            .iter()
            .map(|c| ContactPoint {
                frame: c.frame.clone(),
                surface_rotation: rpy_quaternion(c.surface_rpy),
                friction_mu: c.mu,
            })
            .collect(),
    )
    .expect("scenario contact frames validated")
}

/// Base reference assembled from the active segments.
struct BaseReference {
    position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
    linear_velocity: Vector3<f64>,
    angular_velocity: Vector3<f64>,
    linear_acceleration: Vector3<f64>,
}

struct ActiveRotation {
    t_start: f64,
    sequence: OrientationSequence<f64>,
}

/// Evaluate the base target at time `t`. Shifts and circles compose
/// additively on the initial pose; a rotation sequence overrides the pose
/// rigidly about its pivot.
fn base_reference(
    t: f64,
    base0_position: &Vector3<f64>,
    base0_orientation: &UnitQuaternion<f64>,
    segments: &[SegmentSchema],
    rotation: &Option<ActiveRotation>,
) -> BaseReference {
    if let Some(active) = rotation {
        if t >= active.t_start {
            let s = active.sequence.sample(t - active.t_start);
            return BaseReference {
                position: s.position,
                orientation: s.orientation,
                linear_velocity: s.linear_velocity,
                angular_velocity: s.angular_velocity,
                linear_acceleration: Vector3::zeros(),
            };
        }
    }
    let mut position = *base0_position;
    let mut velocity = Vector3::zeros();
    let mut acceleration = Vector3::zeros();
    for seg in segments {
        match seg {
            SegmentSchema::BaseShift { t_start, duration, offset } => {
                if t >= *t_start {
                    let o = Vector3::new(offset[0], offset[1], offset[2]);
                    let s = quintic_point(
                        &Vector3::zeros(),
                        &o,
                        *duration,
                        (t - t_start).min(*duration),
                    );
                    position += s.position;
                    velocity += s.velocity;
                    acceleration += s.acceleration;
                }
            }
            SegmentSchema::BaseCircle { t_start, radius, period, cycles } => {
                if t >= *t_start {
                    let local = (t - t_start).min(period * cycles);
                    let sample = circle_trajectory(
                        Vector3::new(-radius, 0.0, 0.0),
                        *radius,
                        *period,
                        0.0,
                        local,
                    );
                    position += sample.position;
                    if local < period * cycles {
                        velocity += sample.velocity;
                        acceleration += sample.acceleration;
                    }
                }
            }
            _ => {}
        }
    }
    BaseReference {
        position,
        orientation: *base0_orientation,
        linear_velocity: velocity,
        angular_velocity: Vector3::zeros(),
        linear_acceleration: acceleration,
    }
}

/// Command-line style overrides applied on top of a scenario file.
#[derive(Clone, Copy, Default)]
pub struct RunOverrides {
    pub control_period: Option<f64>,
    pub friction_mu: Option<f64>,
    pub qp_stage_enabled: Option<bool>,
}

/// Run a scenario in closed loop and evaluate its properties.
pub fn run(
    model: &RobotModel<f64>,
    scenario: &ScenarioSchema,
    overrides: &RunOverrides,
) -> Result<(RunReport, RunLog), ScenarioError> {
    scenario.validate()?;
    let control_period = overrides.control_period.unwrap_or(scenario.control_period);
    let qp_enabled = overrides.qp_stage_enabled.unwrap_or(scenario.qp_stage_enabled);

    // A friction override replaces every friction value the scenario would
    // set, including timeline events that would otherwise restore the
    // scenario's own coefficient mid-run.
    let mut scenario = scenario.clone();
    if let Some(mu_override) = overrides.friction_mu {
        for ev in &mut scenario.timeline {
            match ev {
                EventSchema::Friction { mu, .. } => *mu = mu_override,
                EventSchema::Contacts { frames, .. } => {
                    for c in frames.iter_mut() {
                        c.mu = mu_override;
                    }
                }
                _ => {}
            }
        }
    }
    let scenario = &scenario;

    for ev in &scenario.timeline {
        let frame = match ev {
            EventSchema::Wrench { frame, .. } => Some(frame),
            _ => None,
        };
        if let Some(f) = frame {
            model
                .frame(f)
                .map_err(|_| ScenarioError::UnknownFrame(f.clone()))?;
        }
    }

    let mut state = match scenario.stance_pose {
        Some([hfe, kfe]) => standing_state_with(model, hfe, kfe),
        None => standing_state(model),
    };
    state.base_position += Vector3::new(
        scenario.initial_base_shift[0],
        scenario.initial_base_shift[1],
        scenario.initial_base_shift[2],
    );
    let mut world = SimWorld::new(model.clone(), state);

    let mut config = ControllerConfig::new(model.dof(), 80.0);
    config.control_period = control_period;
    config.qp_stage_enabled = qp_enabled;
    let mut ctrl = WholeBodyController::new(config);
    if let Some(mu) = overrides.friction_mu {
        ctrl.update_friction(mu).map_err(ScenarioError::Controller)?;
    }

    // Two simulator substeps per control cycle.
    let sim_cfg = IntegratorConfig { dt: control_period / 2.0, ..IntegratorConfig::default() };

    let cache = KinematicsCache::new(model, &world.state);
    let base0 = cache.placement(model.frame("base").unwrap());
    let base0_position = base0.position;
    let base0_orientation = base0.orientation;
    drop(cache);

    // Schedule external wrenches up front; the simulator windows them.
    for ev in &scenario.timeline {
        if let EventSchema::Wrench { frame, force, torque, t_start, t_end } = ev {
            world.apply_external_force(
                frame.clone(),
                Vector3::new(force[0], force[1], force[2]),
                Vector3::new(torque[0], torque[1], torque[2]),
                *t_start,
                *t_end,
            )?;
        }
    }

    let steps = (scenario.duration / control_period).round() as usize;
    let mut log = RunLog::default();
    let mut current_contacts: Option<(ContactSet<f64>, Vec<ContactSchema>)> = None;
    let mut limb_tasks: Vec<TaskSpec<f64>> = Vec::new();
    let mut rotation: Option<ActiveRotation> = None;
    let mut event_cursor = 0usize;
    let mut pending_segments: Vec<&SegmentSchema> = scenario.segments.iter().collect();

    for step in 0..steps {
        let t = step as f64 * control_period;

        // Apply due timeline events.
        while event_cursor < scenario.timeline.len()
            && scenario.timeline[event_cursor].time() <= t + 1e-12
        {
            match &scenario.timeline[event_cursor] {
                EventSchema::Contacts { frames, .. } => {
                    let set = contact_set(frames);
                    world.set_contacts(&set)?;
                    // Frames that became contacts stop being motion tasks.
                    limb_tasks.retain(|task| !set.contains(&task.frame));
                    current_contacts = Some((set, frames.clone()));
                }
                EventSchema::Mode { mode, .. } => {
                    ctrl.set_mode((*mode).into(), true)?;
                }
                EventSchema::Friction { mu, .. } => {
                    ctrl.update_friction(*mu)?;
                }
                EventSchema::Wrench { .. } => {}
            }
            event_cursor += 1;
        }

        // Activate due segments that capture state at their start time.
        pending_segments.retain(|seg| match seg {
            SegmentSchema::LimbHold {
                t_start,
                frame,
                dims,
                stiffness,
                damping,
                stiffness_angular,
                damping_angular,
            } => {
                if t + 1e-12 >= *t_start {
                    let cache = KinematicsCache::new(model, &world.state);
                    let placement = cache.placement(model.frame(frame).unwrap());
                    let mask: DimMask = (*dims).into();
                    let mut task =
                        TaskSpec::hold(frame.clone(), mask, &placement, *stiffness, *damping);
                    for (i, d) in mask.rows().enumerate() {
                        if d >= 3 {
                            task.stiffness[i] = stiffness_angular.unwrap_or(*stiffness);
                            task.damping[i] = damping_angular.unwrap_or(*damping);
                        }
                    }
                    limb_tasks.push(task);
                    false
                } else {
                    true
                }
            }
            SegmentSchema::BaseRotationSequence { t_start, pivot_frame, segments } => {
                if t + 1e-12 >= *t_start {
                    let cache = KinematicsCache::new(model, &world.state);
                    let pivot = cache.placement(model.frame(pivot_frame).unwrap()).position;
                    let base = cache.placement(model.frame("base").unwrap());
                    rotation = Some(ActiveRotation {
                        t_start: *t_start,
                        sequence: OrientationSequence {
                            pivot,
                            base_position: base.position,
                            base_orientation: base.orientation,
                            segments: segments
                                .iter()
                                .map(|s| RotationSegment {
                                    axis: Vector3::new(s.axis[0], s.axis[1], s.axis[2]),
                                    amplitude: s.amplitude,
                                    duration: s.duration,
                                })
                                .collect(),
                        },
                    });
                    false
                } else {
                    true
                }
            }
            _ => false,
        });

        let (contacts, contact_meta) = current_contacts
            .as_ref()
            .map(|(set, meta)| (set.clone(), meta.clone()))
            .unwrap_or((ContactSet::empty(), Vec::new()));

        let reference = base_reference(
            t,
            &base0_position,
            &base0_orientation,
            &scenario.segments,
            &rotation,
        );
        let mut base_task = TaskSpec::hold(
            "base",
            DimMask::ALL,
            &crate::state::FramePlacement {
                position: reference.position,
                orientation: reference.orientation,
                linear_velocity: reference.linear_velocity,
                angular_velocity: reference.angular_velocity,
            },
            scenario.base_gains[0],
            scenario.base_gains[1],
        );
        base_task.desired_linear_velocity = reference.linear_velocity;
        base_task.desired_angular_velocity = reference.angular_velocity;
        base_task.desired_linear_acceleration = reference.linear_acceleration;

        let out = ctrl.control_step(model, &world.state, &contacts, &base_task, &limb_tasks)?;

        // Log before stepping so forces and errors share the cycle time.
        let cache = KinematicsCache::new(model, &world.state);
        let base_now = cache.placement(model.frame("base").unwrap());
        log.time.push(t);
        log.base_error.push(full_pose_error(
            &base_now,
            &reference.position,
            &reference.orientation,
        ));
        for task in &limb_tasks {
            let placement = cache.placement(model.frame(&task.frame).unwrap());
            let err = full_pose_error(
                &placement,
                &task.desired_position,
                &task.desired_orientation,
            );
            log.task_errors.entry(task.frame.clone()).or_default().push((t, err));
        }
        let mut records = Vec::with_capacity(contact_meta.len());
        for (i, meta) in contact_meta.iter().enumerate() {
            let f = &out.contact_forces;
            if 3 * i + 2 < f.len() {
                records.push(ForceRecord {
                    frame: meta.frame.clone(),
                    force: [f[3 * i], f[3 * i + 1], f[3 * i + 2]],
                    mu: meta.mu,
                    surface_rpy: meta.surface_rpy,
                });
            }
        }
        log.forces.push((t, records));
        let mut torques = [0.0; 12];
        for k in 0..12 {
            torques[k] = out.joint_torques[k];
        }
        log.torques.push(torques);
        log.qp_status.push(out.diagnostics.qp_status);
        log.rank.push(out.diagnostics.constraint_rank);
        log.fallback.push(out.diagnostics.fallback_used);
        if !out.estimated_force.is_empty() {
            log.estimate.push((t, out.estimated_force.iter().copied().collect()));
        }
        log.cycle_seconds.push(out.diagnostics.elapsed);
        let mut pos = Vec::with_capacity(7 + model.dof());
        pos.extend_from_slice(world.state.base_position.as_slice());
        pos.extend_from_slice(world.state.base_orientation.coords.as_slice());
        pos.extend(world.state.joint_positions.iter().copied());
        log.positions.push(pos);
        log.velocities.push(world.state.velocity_vector().iter().copied().collect());
        drop(cache);

        for _ in 0..2 {
            world.step(&out.joint_torques, &sim_cfg)?;
        }
    }

    let report = evaluate(scenario, &log);
    Ok((report, log))
}

/// Worst signed pyramid violation of one record (positive = violated).
fn pyramid_violation(record: &ForceRecord) -> f64 {
    let contact = ContactPoint {
        frame: record.frame.clone(),
        surface_rotation: rpy_quaternion(record.surface_rpy),
        friction_mu: record.mu,
    };
    let rows = friction_pyramid_rows(&contact);
    let f = nalgebra::DVector::from_row_slice(&record.force);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..rows.nrows() {
        worst = worst.max(rows.row(i).transpose().dot(&f));
    }
    worst
}

fn max_task_position_error(log: &RunLog, frame: &str) -> f64 {
    log.task_errors
        .get(frame)
        .map(|entries| {
            entries
                .iter()
                .map(|(_, e)| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt())
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0)
}

fn evaluate(scenario: &ScenarioSchema, log: &RunLog) -> RunReport {
    let steps = log.time.len();
    let qp_optimal = log
        .qp_status
        .iter()
        .filter(|s| **s == QpStatus::Optimal)
        .count();
    let qp_fallback = log.fallback.iter().filter(|f| **f).count();
    let max_violation = log
        .forces
        .iter()
        .flat_map(|(_, recs)| recs.iter().map(pyramid_violation))
        .fold(f64::NEG_INFINITY, f64::max);

    let mut properties = Vec::new();
    for prop in &scenario.properties {
        properties.push(check_property(prop, log, qp_optimal, steps));
    }

    let mean_cycle = if steps > 0 {
        log.cycle_seconds.iter().sum::<f64>() / steps as f64
    } else {
        0.0
    };
    RunReport {
        scenario: scenario.name.clone(),
        steps,
        qp_optimal,
        qp_fallback,
        max_pyramid_violation: max_violation,
        properties,
        mean_cycle_seconds: mean_cycle,
        max_cycle_seconds: log.cycle_seconds.iter().copied().fold(0.0, f64::max),
    }
}

fn check_property(
    prop: &PropertySchema,
    log: &RunLog,
    qp_optimal: usize,
    steps: usize,
) -> PropertyResult {
    match prop {
        PropertySchema::Hierarchy { foot_frame, factor } => {
            let foot = max_task_position_error(log, foot_frame);
            let base = log
                .base_error
                .iter()
                .map(|e| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt())
                .fold(0.0, f64::max);
            PropertyResult {
                name: format!("hierarchy:{foot_frame}"),
                pass: foot < factor * base,
                measured: if base > 0.0 { foot / base } else { f64::INFINITY },
                detail: format!("foot {foot:.2e} m vs base {base:.2e} m"),
            }
        }
        PropertySchema::RelaxedYawDominates { frame } => {
            let entries = log.task_errors.get(frame);
            let (mut roll, mut pitch, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
            if let Some(list) = entries {
                for (_, e) in list {
                    roll = roll.max(e[3].abs());
                    pitch = pitch.max(e[4].abs());
                    yaw = yaw.max(e[5].abs());
                }
            }
            PropertyResult {
                name: format!("relaxed_yaw:{frame}"),
                pass: yaw > roll && yaw > pitch,
                measured: yaw,
                detail: format!("yaw {yaw:.2e}, roll {roll:.2e}, pitch {pitch:.2e} rad"),
            }
        }
        PropertySchema::TaskErrorBound { frames, max } => {
            let worst = frames
                .iter()
                .map(|f| max_task_position_error(log, f))
                .fold(0.0, f64::max);
            PropertyResult {
                name: "task_error_bound".into(),
                pass: worst < *max,
                measured: worst,
                detail: format!("max error {worst:.2e} m, bound {max:.2e} m"),
            }
        }
        PropertySchema::QpOptimalFraction { min } => {
            let frac = if steps > 0 {
                qp_optimal as f64 / steps as f64
            } else {
                0.0
            };
            PropertyResult {
                name: "qp_optimal_fraction".into(),
                pass: frac >= *min,
                measured: frac,
                detail: format!("{qp_optimal}/{steps} optimal"),
            }
        }
        PropertySchema::FrictionPyramid { tol } => {
            let worst = log
                .forces
                .iter()
                .flat_map(|(_, recs)| recs.iter().map(pyramid_violation))
                .fold(f64::NEG_INFINITY, f64::max);
            PropertyResult {
                name: "friction_pyramid".into(),
                pass: worst <= *tol,
                measured: worst,
                detail: format!("worst pyramid margin {worst:.2e} N"),
            }
        }
        PropertySchema::FrictionViolationExists { tol } => {
            let worst = log
                .forces
                .iter()
                .flat_map(|(_, recs)| recs.iter().map(pyramid_violation))
                .fold(f64::NEG_INFINITY, f64::max);
            PropertyResult {
                name: "friction_violation_exists".into(),
                pass: worst > *tol,
                measured: worst,
                detail: format!("worst pyramid margin {worst:.2e} N"),
            }
        }
        PropertySchema::RankEquals { t, value } => {
            let mut pass = true;
            let mut seen = 0usize;
            for (i, ti) in log.time.iter().enumerate() {
                if ti >= t {
                    seen = log.rank[i];
                    if log.rank[i] != *value {
                        pass = false;
                    }
                }
            }
            PropertyResult {
                name: "rank_equals".into(),
                pass,
                measured: seen as f64,
                detail: format!("expected rank {value}"),
            }
        }
        PropertySchema::EstimatorAccuracy { magnitude, rel_tol, t_check } => {
            let mut measured = f64::NAN;
            for (t, est) in &log.estimate {
                if t <= t_check && est.len() >= 3 {
                    measured = (est[0] * est[0] + est[1] * est[1] + est[2] * est[2]).sqrt();
                }
            }
            let pass = measured.is_finite()
                && (measured - magnitude).abs() <= rel_tol * magnitude.abs();
            PropertyResult {
                name: "estimator_accuracy".into(),
                pass,
                measured,
                detail: format!("estimate {measured:.3} N vs {magnitude:.3} N"),
            }
        }
        PropertySchema::EstimatorIsolation { t_before, t_after, bound } => {
            let sample_at = |tq: f64| -> Option<Vec<f64>> {
                let mut last = None;
                for (t, est) in &log.estimate {
                    if *t <= tq {
                        last = Some(est.clone());
                    }
                }
                last
            };
            let measured = match (sample_at(*t_before), sample_at(*t_after)) {
                (Some(a), Some(b)) if a.len() == b.len() => a
                    .iter()
                    .zip(&b)
                    .take(3)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
                _ => f64::NAN,
            };
            PropertyResult {
                name: "estimator_isolation".into(),
                pass: measured.is_finite() && measured < *bound,
                measured,
                detail: format!("estimate shift {measured:.2e} N, bound {bound:.2e} N"),
            }
        }
        PropertySchema::WeightShare { rel_tol } => {
            let last = log.forces.last();
            let mut pass = false;
            let mut measured = f64::NAN;
            if let Some((_, recs)) = last {
                if recs.len() == 4 {
                    let total: f64 = recs.iter().map(|r| r.force[2]).sum();
                    let quarter = total / 4.0;
                    measured = recs
                        .iter()
                        .map(|r| (r.force[2] - quarter).abs() / quarter)
                        .fold(0.0, f64::max);
                    pass = measured <= *rel_tol;
                }
            }
            PropertyResult {
                name: "weight_share".into(),
                pass,
                measured,
                detail: format!("worst relative deviation {measured:.3}"),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario library
// ---------------------------------------------------------------------------

fn all_feet_schema(mu: f64) -> Vec<ContactSchema> {
    ["LF_FOOT", "RF_FOOT", "LH_FOOT", "RH_FOOT"]
        .iter()
        .map(|f| ContactSchema { frame: (*f).into(), mu, surface_rpy: [0.0; 3] })
        .collect()
}

fn three_feet_schema(mu: f64) -> Vec<ContactSchema> {
    ["RF_FOOT", "LH_FOOT", "RH_FOOT"]
        .iter()
        .map(|f| ContactSchema { frame: (*f).into(), mu, surface_rpy: [0.0; 3] })
        .collect()
}

/// Fixed-foot base circle with a 5-DOF (yaw-relaxed) fore-foot task.
pub fn scenario_a() -> ScenarioSchema {
    ScenarioSchema {
        name: "A_fixed_foot_circle".into(),
        description: "Base tracks two x-y circles while the lifted fore foot \
                      holds a 5-DOF pose with yaw relaxed."
            .into(),
        duration: 11.0,
        control_period: default_control_period(),
        qp_stage_enabled: true,
        base_gains: [400.0, 40.0],
        initial_base_shift: [0.0; 3],
        stance_pose: None,
        timeline: vec![
            EventSchema::Contacts { t: 0.0, frames: all_feet_schema(0.6) },
            EventSchema::Contacts { t: 1.6, frames: three_feet_schema(0.6) },
        ],
        segments: vec![
            // Weight shift over the three-foot support region, then step
            // onto the circle entry point before the circle starts.
            SegmentSchema::BaseShift {
                t_start: 0.0,
                duration: 1.5,
                offset: [-0.06, -0.05, 0.0],
            },
            SegmentSchema::LimbHold {
                t_start: 1.6,
                frame: "LF_FOOT".into(),
                dims: DimsSchema::PoseNoYaw,
                stiffness: 1500.0,
                damping: 30.0,
                stiffness_angular: Some(50.0),
                damping_angular: Some(2.0),
            },
            SegmentSchema::BaseCircle {
                t_start: 3.0,
                radius: 0.025,
                period: 4.0,
                cycles: 2.0,
            },
        ],
        properties: vec![
            PropertySchema::Hierarchy { foot_frame: "LF_FOOT".into(), factor: 0.1 },
            PropertySchema::RelaxedYawDominates { frame: "LF_FOOT".into() },
            PropertySchema::QpOptimalFraction { min: 0.99 },
        ],
    }
}

/// Rotation sequence about one prong with the fore feet holding position.
pub fn scenario_b() -> ScenarioSchema {
    ScenarioSchema {
        name: "B_prong_rotation".into(),
        description: "Roll, pitch and yaw actions about the left prong with \
                      two hind feet in contact and fore feet held."
            .into(),
        duration: 7.0,
        control_period: default_control_period(),
        qp_stage_enabled: true,
        base_gains: [400.0, 40.0],
        initial_base_shift: [0.0; 3],
        stance_pose: None,
        timeline: vec![
            EventSchema::Contacts {
                t: 0.0,
                frames: vec![
                    ContactSchema { frame: "PRONG_L".into(), mu: 0.6, surface_rpy: [0.0; 3] },
                    ContactSchema { frame: "LH_FOOT".into(), mu: 0.6, surface_rpy: [0.0; 3] },
                    ContactSchema { frame: "RH_FOOT".into(), mu: 0.6, surface_rpy: [0.0; 3] },
                ],
            },
            EventSchema::Mode { t: 0.0, mode: ModeSchema::BodyContact },
        ],
        segments: vec![
            SegmentSchema::LimbHold {
                t_start: 0.0,
                frame: "LF_FOOT".into(),
                dims: DimsSchema::Position,
                stiffness: 1500.0,
                damping: 30.0,
                stiffness_angular: None,
                damping_angular: None,
            },
            SegmentSchema::LimbHold {
                t_start: 0.0,
                frame: "RF_FOOT".into(),
                dims: DimsSchema::Position,
                stiffness: 1500.0,
                damping: 30.0,
                stiffness_angular: None,
                damping_angular: None,
            },
            SegmentSchema::BaseRotationSequence {
                t_start: 1.0,
                pivot_frame: "PRONG_L".into(),
                segments: vec![
                    RotationSegmentSchema { axis: [1.0, 0.0, 0.0], amplitude: 0.08, duration: 1.6 },
                    RotationSegmentSchema { axis: [0.0, 1.0, 0.0], amplitude: 0.08, duration: 1.6 },
                    RotationSegmentSchema { axis: [0.0, 0.0, 1.0], amplitude: 0.10, duration: 1.6 },
                ],
            },
        ],
        properties: vec![
            PropertySchema::TaskErrorBound {
                frames: vec!["LF_FOOT".into(), "RF_FOOT".into()],
                max: 0.01,
            },
            PropertySchema::QpOptimalFraction { min: 0.99 },
            PropertySchema::RankEquals { t: 0.5, value: 9 },
        ],
    }
}

/// Two-prong variant: the stacked constraint Jacobian loses rank.
pub fn scenario_c() -> ScenarioSchema {
    let mut s = scenario_b();
    s.name = "C_two_prong_rank_deficit".into();
    s.description = "Same rotation mission with both prongs in contact; the \
                     twelve constraint rows have rank eleven."
        .into();
    if let EventSchema::Contacts { frames, .. } = &mut s.timeline[0] {
        frames.insert(
            1,
            ContactSchema { frame: "PRONG_R".into(), mu: 0.6, surface_rpy: [0.0; 3] },
        );
    }
    if let Some(SegmentSchema::BaseRotationSequence { segments, .. }) = s.segments.last_mut() {
        // Both prongs lie on a line parallel to y, so only pitch about that
        // line is compatible with the two anchors.
        segments.retain(|seg| seg.axis[1] != 0.0);
    }
    s.properties = vec![
        PropertySchema::TaskErrorBound {
            frames: vec!["LF_FOOT".into(), "RF_FOOT".into()],
            max: 0.01,
        },
        PropertySchema::QpOptimalFraction { min: 0.99 },
        PropertySchema::RankEquals { t: 0.5, value: 11 },
    ];
    s
}

/// Manipulation: 6-DOF shank task with a pressed force and the estimator.
pub fn scenario_d() -> ScenarioSchema {
    ScenarioSchema {
        name: "D_manipulation_press".into(),
        description: "Six-DOF shank task holding pose while a 10 N press \
                      reaction acts on the foot; the sensorless estimator \
                      reads it back."
            .into(),
        duration: 5.5,
        control_period: default_control_period(),
        qp_stage_enabled: true,
        base_gains: [400.0, 40.0],
        initial_base_shift: [0.0; 3],
        stance_pose: None,
        timeline: vec![
            EventSchema::Contacts { t: 0.0, frames: all_feet_schema(0.6) },
            EventSchema::Contacts { t: 1.6, frames: three_feet_schema(0.6) },
            EventSchema::Mode { t: 1.6, mode: ModeSchema::Manipulation },
            EventSchema::Wrench {
                frame: "LF_FOOT".into(),
                force: [0.0, 0.0, -10.0],
                torque: [0.0; 3],
                t_start: 2.0,
                t_end: 5.5,
            },
            // Torso disturbance chosen inside the subspace the base can
            // absorb through null-space motion; components outside it would
            // transmit straight into the shank task by force balance, since
            // three stance feet leave the base only three free directions
            // under a six-axis shank task.
            EventSchema::Wrench {
                frame: "base".into(),
                force: [-0.0101, -0.0045, 4.9837],
                torque: [-0.3536, 0.1904, 0.0423],
                t_start: 3.5,
                t_end: 4.5,
            },
        ],
        segments: vec![
            SegmentSchema::BaseShift {
                t_start: 0.0,
                duration: 1.5,
                offset: [-0.06, -0.05, 0.0],
            },
            SegmentSchema::LimbHold {
                t_start: 1.6,
                frame: "LF_SHANK".into(),
                dims: DimsSchema::Pose,
                stiffness: 900.0,
                damping: 150.0,
                stiffness_angular: Some(30.0),
                damping_angular: Some(1.0),
            },
        ],
        properties: vec![
            PropertySchema::EstimatorAccuracy {
                magnitude: 10.0,
                rel_tol: 0.1,
                t_check: 2.6,
            },
            PropertySchema::EstimatorIsolation {
                t_before: 3.4,
                t_after: 4.4,
                bound: 0.005,
            },
            PropertySchema::QpOptimalFraction { min: 0.99 },
        ],
    }
}

/// Low-friction stance with a lateral push.
pub fn scenario_e() -> ScenarioSchema {
    ScenarioSchema {
        name: "E_low_friction_push".into(),
        description: "Friction drops to 0.2 and a lateral push hits the \
                      base; contact forces must stay inside the pyramid."
            .into(),
        duration: 4.0,
        control_period: default_control_period(),
        qp_stage_enabled: true,
        base_gains: [400.0, 40.0],
        initial_base_shift: [0.0; 3],
        // The default crouched stance squeezes the feet inward hard enough
        // that the rest-state tangential forces already leave the mu = 0.2
        // cone, so the QP has to ride the pyramid facets for the whole run.
        stance_pose: None,
        timeline: vec![
            EventSchema::Contacts { t: 0.0, frames: all_feet_schema(0.2) },
            EventSchema::Friction { t: 0.0, mu: 0.2 },
            EventSchema::Wrench {
                frame: "base".into(),
                force: [0.0, 10.0, 0.0],
                torque: [0.0; 3],
                t_start: 1.5,
                t_end: 2.5,
            },
        ],
        segments: vec![],
        properties: vec![
            PropertySchema::FrictionPyramid { tol: 1e-6 },
            PropertySchema::QpOptimalFraction { min: 0.99 },
        ],
    }
}

/// Ablation of scenario E: raw motion torque without the QP stage.
pub fn scenario_e_ablation() -> ScenarioSchema {
    let mut s = scenario_e();
    s.name = "E_ablation_no_qp".into();
    s.description = "Scenario E with the QP stage disabled; at least one \
                     contact force leaves the pyramid."
        .into();
    s.qp_stage_enabled = false;
    s.properties = vec![PropertySchema::FrictionViolationExists { tol: 1e-6 }];
    s
}

/// All library scenarios in order.
/// Composite mission: a base turn, a low-friction crossing with a lateral
/// push, then a three-legged press with the estimator reading the reaction.
pub fn scenario_mission() -> ScenarioSchema {
    ScenarioSchema {
        name: "M_composite_mission".into(),
        description: "Base circle on good ground, low-friction stretch \
                      under a lateral push, then a manipulation press; the \
                      phases chain without re-homing."
            .into(),
        duration: 12.0,
        control_period: default_control_period(),
        qp_stage_enabled: true,
        base_gains: [400.0, 40.0],
        initial_base_shift: [0.0; 3],
        stance_pose: None,
        // Contact events and friction events come in pairs so the logged
        // coefficient always matches the one the controller constrains with.
        timeline: vec![
            EventSchema::Contacts { t: 0.0, frames: all_feet_schema(0.6) },
            EventSchema::Contacts { t: 4.0, frames: all_feet_schema(0.2) },
            EventSchema::Friction { t: 4.0, mu: 0.2 },
            EventSchema::Wrench {
                frame: "base".into(),
                force: [0.0, 10.0, 0.0],
                torque: [0.0; 3],
                t_start: 4.5,
                t_end: 5.5,
            },
            EventSchema::Contacts { t: 6.0, frames: all_feet_schema(0.6) },
            EventSchema::Friction { t: 6.0, mu: 0.6 },
            EventSchema::Contacts { t: 7.8, frames: three_feet_schema(0.6) },
            EventSchema::Mode { t: 7.8, mode: ModeSchema::Manipulation },
            EventSchema::Wrench {
                frame: "LF_FOOT".into(),
                force: [0.0, 0.0, -10.0],
                torque: [0.0; 3],
                t_start: 8.2,
                t_end: 12.0,
            },
        ],
        segments: vec![
            SegmentSchema::BaseCircle {
                t_start: 0.5,
                radius: 0.03,
                period: 3.0,
                cycles: 1.0,
            },
            SegmentSchema::BaseShift {
                t_start: 6.2,
                duration: 1.5,
                offset: [-0.06, -0.05, 0.0],
            },
            SegmentSchema::LimbHold {
                t_start: 7.8,
                frame: "LF_SHANK".into(),
                dims: DimsSchema::Pose,
                stiffness: 900.0,
                damping: 150.0,
                stiffness_angular: Some(30.0),
                damping_angular: Some(1.0),
            },
        ],
        properties: vec![
            PropertySchema::FrictionPyramid { tol: 1e-6 },
            PropertySchema::QpOptimalFraction { min: 0.99 },
            PropertySchema::EstimatorAccuracy {
                magnitude: 10.0,
                rel_tol: 0.1,
                t_check: 8.8,
            },
        ],
    }
}

pub fn scenario_library() -> Vec<ScenarioSchema> {
    vec![
        scenario_a(),
        scenario_b(),
        scenario_c(),
        scenario_d(),
        scenario_e(),
        scenario_e_ablation(),
        scenario_mission(),
    ]
}
