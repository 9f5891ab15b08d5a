//! Reference-trajectory generators: circles, minimum-jerk interpolation,
//! pivot rotation sequences and a static-walk footstep sequencer.

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scalar::{real, Real};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("slope {0} rad outside the supported [0, 0.35] range")]
    BadSlope(f64),
    #[error("stride {stride} m exceeds the kinematic reach {max}")]
    StrideTooLarge { stride: f64, max: f64 },
}

/// Position-level sample of a reference trajectory.
#[derive(Clone, Copy, Debug)]
pub struct PointSample<T: Real> {
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
    pub acceleration: Vector3<T>,
}

/// Counterclockwise circle in the x-y plane at fixed height, starting on
/// the +x side of the center at t = 0.
pub fn circle_trajectory<T: Real>(
    center: Vector3<T>,
    radius: T,
    period: T,
    height: T,
    t: T,
) -> PointSample<T> {
    assert!(period > T::zero(), "period must be positive");
    let omega = real::<T>(2.0) * T::pi() / period;
    let theta = omega * t;
    let (s, c) = (theta.sin(), theta.cos());
    PointSample {
        position: Vector3::new(center.x + radius * c, center.y + radius * s, height),
        velocity: Vector3::new(-radius * omega * s, radius * omega * c, T::zero()),
        acceleration: Vector3::new(
            -radius * omega * omega * c,
            -radius * omega * omega * s,
            T::zero(),
        ),
    }
}

/// Minimum-jerk quintic from `x0` to `x1` over `duration`, with zero
/// boundary velocity and acceleration. Times outside the interval clamp to
/// the endpoints.
pub fn quintic_interpolation<T: Real>(x0: T, x1: T, duration: T, t: T) -> (T, T, T) {
    assert!(duration > T::zero(), "duration must be positive");
    if t <= T::zero() {
        return (x0, T::zero(), T::zero());
    }
    if t >= duration {
        return (x1, T::zero(), T::zero());
    }
    let s = t / duration;
    let (s2, s3) = (s * s, s * s * s);
    let (c10, c15, c6) = (real::<T>(10.0), real::<T>(15.0), real::<T>(6.0));
    let blend = c10 * s3 - c15 * s2 * s2 + c6 * s2 * s3;
    let dblend = (real::<T>(30.0) * s2 - real::<T>(60.0) * s3 + real::<T>(30.0) * s2 * s2)
        / duration;
    let ddblend = (real::<T>(60.0) * s - real::<T>(180.0) * s2 + real::<T>(120.0) * s3)
        / (duration * duration);
    let span = x1 - x0;
    (x0 + span * blend, span * dblend, span * ddblend)
}

/// Vector-valued quintic between two points.
pub fn quintic_point<T: Real>(
    x0: &Vector3<T>,
    x1: &Vector3<T>,
    duration: T,
    t: T,
) -> PointSample<T> {
    let mut position = Vector3::zeros();
    let mut velocity = Vector3::zeros();
    let mut acceleration = Vector3::zeros();
    for k in 0..3 {
        let (p, v, a) = quintic_interpolation(x0[k], x1[k], duration, t);
        position[k] = p;
        velocity[k] = v;
        acceleration[k] = a;
    }
    PointSample { position, velocity, acceleration }
}

/// One rotate-and-return action about a world axis.
#[derive(Clone, Debug)]
pub struct RotationSegment<T: Real> {
    /// Unit rotation axis in the inertia frame.
    pub axis: Vector3<T>,
    /// Peak angle, rad.
    pub amplitude: T,
    /// Total segment time (out and back), s.
    pub duration: T,
}

/// Base pose targets rotating about a fixed pivot point, used for the
/// body-contact rocking evaluations. The base keeps a rigid offset from the
/// pivot, so its position orbit follows the commanded rotation.
#[derive(Clone, Debug)]
pub struct OrientationSequence<T: Real> {
    pub pivot: Vector3<T>,
    pub base_position: Vector3<T>,
    pub base_orientation: UnitQuaternion<T>,
    pub segments: Vec<RotationSegment<T>>,
}

/// Pose target emitted by [`OrientationSequence::sample`].
#[derive(Clone, Debug)]
pub struct PoseSample<T: Real> {
    pub position: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
    pub linear_velocity: Vector3<T>,
    pub angular_velocity: Vector3<T>,
}

impl<T: Real> OrientationSequence<T> {
    pub fn total_duration(&self) -> T {
        self.segments.iter().fold(T::zero(), |acc, s| acc + s.duration)
    }

    /// Angle and rate of one out-and-back action at local time `t`: quintic
    /// up over the first half, quintic back over the second.
    fn angle_profile(seg: &RotationSegment<T>, t: T) -> (T, T) {
        let half = seg.duration / real(2.0);
        if t < half {
            let (a, rate, _) = quintic_interpolation(T::zero(), seg.amplitude, half, t);
            (a, rate)
        } else {
            let (a, rate, _) = quintic_interpolation(seg.amplitude, T::zero(), half, t - half);
            (a, rate)
        }
    }

    /// Pose target at time `t` from the sequence start. Before the start
    /// and after the end the target holds the initial pose.
    pub fn sample(&self, t: T) -> PoseSample<T> {
        let mut local = t;
        let mut active = None;
        for seg in &self.segments {
            if local < seg.duration {
                active = Some(seg);
                break;
            }
            local -= seg.duration;
        }
        let (axis, angle, rate) = match active {
            Some(seg) if t >= T::zero() => {
                let (a, r) = Self::angle_profile(seg, local);
                (seg.axis, a, r)
            }
            _ => (Vector3::z(), T::zero(), T::zero()),
        };
        let unit_axis = nalgebra::Unit::new_normalize(axis);
        let delta = UnitQuaternion::from_axis_angle(&unit_axis, angle);
        let arm = delta * (self.base_position - self.pivot);
        let omega = unit_axis.into_inner() * rate;
        PoseSample {
            position: self.pivot + arm,
            orientation: delta * self.base_orientation,
            linear_velocity: omega.cross(&arm),
            angular_velocity: omega,
        }
    }
}

/// One scheduled swing within a crawl cycle.
#[derive(Clone, Debug)]
pub struct SwingPhase<T: Real> {
    pub frame: String,
    /// Swing start relative to the cycle start, s.
    pub t_start: T,
    pub duration: T,
    pub from: Vector3<T>,
    pub to: Vector3<T>,
    pub clearance: T,
    /// Base target while this foot is in the air (weight held over the
    /// remaining support triangle).
    pub base_target: Vector3<T>,
}

/// Crawl schedule: one foot in the air at a time, four swings per cycle.
#[derive(Clone, Debug)]
pub struct WalkSchedule<T: Real> {
    pub phases: Vec<SwingPhase<T>>,
    pub cycle_time: T,
    pub stride: T,
    /// Rotation applied to contact surface frames on the incline.
    pub surface_rotation: UnitQuaternion<T>,
}

/// Swing-foot position at normalized progress through a phase: quintic in
/// the walking plane with a smooth clearance bump.
pub fn swing_foot_position<T: Real>(phase: &SwingPhase<T>, t: T) -> PointSample<T> {
    let mut sample = quintic_point(&phase.from, &phase.to, phase.duration, t);
    let s = (t / phase.duration).max(T::zero()).min(T::one());
    let pi = T::pi();
    let bump = (pi * s).sin();
    sample.position.z += phase.clearance * bump * bump;
    let two = real::<T>(2.0);
    sample.velocity.z += phase.clearance * two * bump * (pi * s).cos() * pi / phase.duration;
    sample
}

/// Distance from a point to the closest edge of the triangle `a,b,c`
/// projected on the ground plane; positive inside.
pub fn support_margin<T: Real>(
    point: &Vector3<T>,
    a: &Vector3<T>,
    b: &Vector3<T>,
    c: &Vector3<T>,
) -> T {
    let p = nalgebra::Vector2::new(point.x, point.y);
    let verts = [
        nalgebra::Vector2::new(a.x, a.y),
        nalgebra::Vector2::new(b.x, b.y),
        nalgebra::Vector2::new(c.x, c.y),
    ];
    // Signed area fixes the winding so inside is positive.
    let area = (verts[1] - verts[0]).perp(&(verts[2] - verts[0]));
    let sign = if area >= T::zero() { T::one() } else { -T::one() };
    let mut margin: Option<T> = None;
    for i in 0..3 {
        let (v0, v1) = (verts[i], verts[(i + 1) % 3]);
        let edge = v1 - v0;
        let len = edge.norm();
        let d = sign * edge.perp(&(p - v0)) / len;
        margin = Some(match margin {
            Some(m) => m.min(d),
            None => d,
        });
    }
    margin.unwrap()
}

const MAX_SLOPE: f64 = 0.35;
/// Conservative reach bound of the default leg geometry.
const MAX_STRIDE: f64 = 0.20;

/// Build a level or inclined crawl schedule over one cycle. `stance` maps
/// each foot frame to its nominal foothold; swings advance each foothold by
/// `stride` along +x. Feet swing one at a time in the order LH, LF, RH, RF
/// so the projected weight always has a support triangle ahead of the
/// moving foot.
pub fn static_walk_sequencer<T: Real>(
    stance: &[(String, Vector3<T>)],
    stride: T,
    clearance: T,
    cycle_time: T,
    slope: T,
) -> Result<WalkSchedule<T>, TrajectoryError> {
    if cycle_time <= T::zero() {
        return Err(TrajectoryError::BadDuration(crate::scalar::to_f64(cycle_time)));
    }
    let slope_f = crate::scalar::to_f64(slope);
    if !(0.0..=MAX_SLOPE).contains(&slope_f) {
        return Err(TrajectoryError::BadSlope(slope_f));
    }
    if crate::scalar::to_f64(stride) > MAX_STRIDE {
        return Err(TrajectoryError::StrideTooLarge {
            stride: crate::scalar::to_f64(stride),
            max: MAX_STRIDE,
        });
    }
    assert_eq!(stance.len(), 4, "crawl schedule expects four feet");

    let order = ["LH_FOOT", "LF_FOOT", "RH_FOOT", "RF_FOOT"];
    for name in order {
        assert!(
            stance.iter().any(|(f, _)| f == name),
            "stance must contain the four foot frames"
        );
    }

    // Walking direction up the incline; footholds gain height with x.
    let advance = Vector3::new(stride * slope.cos(), T::zero(), stride * slope.sin());
    let quarter = cycle_time / real(4.0);
    // First half of each quarter shifts the weight, second half swings.
    let swing_time = quarter / real(2.0);

    let mut current: Vec<(String, Vector3<T>)> = stance.to_vec();
    let mut phases = Vec::with_capacity(4);
    for (k, name) in order.iter().enumerate() {
        let from = current
            .iter()
            .find(|(f, _)| f == name)
            .map(|(_, p)| *p)
            .unwrap();
        let to = from + advance;
        // Support triangle of the other three feet at swing time.
        let others: Vec<Vector3<T>> = current
            .iter()
            .filter(|(f, _)| f != name)
            .map(|(_, p)| *p)
            .collect();
        let third = real::<T>(1.0 / 3.0);
        let centroid = (others[0] + others[1] + others[2]) * third;
        phases.push(SwingPhase {
            frame: (*name).to_string(),
            t_start: quarter * real(k as f64) + swing_time,
            duration: swing_time,
            from,
            to,
            clearance,
            base_target: centroid,
        });
        for (f, p) in current.iter_mut() {
            if f == name {
                *p = to;
            }
        }
    }

    Ok(WalkSchedule {
        phases,
        cycle_time,
        stride,
        surface_rotation: UnitQuaternion::from_axis_angle(&Vector3::y_axis(), slope),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn circle_starts_on_plus_x_and_closes() {
        let c = Vector3::new(0.1, -0.2, 0.0);
        let s0 = circle_trajectory(c, 0.05, 4.0, 0.3, 0.0);
        assert_relative_eq!(s0.position, Vector3::new(0.15, -0.2, 0.3), epsilon = 1e-12);
        assert_relative_eq!(s0.velocity.norm(), 2.0 * std::f64::consts::PI * 0.05 / 4.0);
        let half = circle_trajectory(c, 0.05, 4.0, 0.3, 2.0);
        assert_relative_eq!(half.position.x, 0.05, epsilon = 1e-12);
        let full = circle_trajectory(c, 0.05, 4.0, 0.3, 4.0);
        assert_relative_eq!(full.position, s0.position, epsilon = 1e-9);
    }

    #[test]
    fn circle_acceleration_is_centripetal() {
        let c = Vector3::zeros();
        let omega = 2.0 * std::f64::consts::PI / 3.0;
        for i in 0..10 {
            let t = 0.3 * i as f64;
            let s = circle_trajectory(c, 0.08, 3.0, 0.0, t);
            assert_relative_eq!(s.acceleration.norm(), omega * omega * 0.08, epsilon = 1e-10);
            // Velocity matches central differences.
            let h = 1e-6;
            let sp = circle_trajectory(c, 0.08, 3.0, 0.0, t + h);
            let sm = circle_trajectory(c, 0.08, 3.0, 0.0, t - h);
            let fd = (sp.position - sm.position) / (2.0 * h);
            assert_relative_eq!(s.velocity, fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn quintic_boundary_and_midpoint() {
        let (p0, v0, a0) = quintic_interpolation(1.0, 3.0, 2.0, 0.0);
        assert_eq!((p0, v0, a0), (1.0, 0.0, 0.0));
        let (p1, v1, a1) = quintic_interpolation(1.0, 3.0, 2.0, 2.0);
        assert_eq!((p1, v1, a1), (3.0, 0.0, 0.0));
        let (pm, _, _) = quintic_interpolation(1.0, 3.0, 2.0, 1.0);
        assert_relative_eq!(pm, 2.0, epsilon = 1e-12);
        // Clamping outside the interval.
        assert_eq!(quintic_interpolation(1.0, 3.0, 2.0, -0.5).0, 1.0);
        assert_eq!(quintic_interpolation(1.0, 3.0, 2.0, 2.5).0, 3.0);
    }

    #[test]
    fn quintic_rate_matches_finite_differences() {
        let h = 1e-6;
        for i in 1..20 {
            let t = 0.1 * i as f64;
            let (_, v, a) = quintic_interpolation(-0.4, 0.9, 2.0, t);
            let (pp, vp, _) = quintic_interpolation(-0.4, 0.9, 2.0, t + h);
            let (pmn, vm, _) = quintic_interpolation(-0.4, 0.9, 2.0, t - h);
            assert_relative_eq!(v, (pp - pmn) / (2.0 * h), epsilon = 1e-6);
            assert_relative_eq!(a, (vp - vm) / (2.0 * h), epsilon = 1e-5);
        }
    }

    fn demo_sequence() -> OrientationSequence<f64> {
        OrientationSequence {
            pivot: Vector3::new(0.34, 0.0, 0.0),
            base_position: Vector3::new(0.0, 0.0, 0.4),
            base_orientation: UnitQuaternion::identity(),
            segments: vec![
                RotationSegment { axis: Vector3::x(), amplitude: 0.15, duration: 2.0 },
                RotationSegment { axis: Vector3::y(), amplitude: 0.2, duration: 2.0 },
                RotationSegment { axis: Vector3::z(), amplitude: 0.25, duration: 2.0 },
            ],
        }
    }

    #[test]
    fn zero_amplitude_sequence_holds_the_pose() {
        let mut seq = demo_sequence();
        for s in &mut seq.segments {
            s.amplitude = 0.0;
        }
        for i in 0..20 {
            let sample = seq.sample(0.3 * i as f64);
            assert_relative_eq!(sample.position, seq.base_position, epsilon = 1e-12);
            assert_relative_eq!(sample.angular_velocity.norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sequence_keeps_a_rigid_pivot_arm() {
        let seq = demo_sequence();
        let arm0 = (seq.base_position - seq.pivot).norm();
        for i in 0..60 {
            let sample = seq.sample(0.1 * i as f64);
            assert_relative_eq!((sample.position - seq.pivot).norm(), arm0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sequence_targets_are_continuous() {
        let seq = demo_sequence();
        let mut prev = seq.sample(0.0);
        for i in 1..=600 {
            let t = 0.01 * i as f64;
            let cur = seq.sample(t);
            assert!((cur.position - prev.position).norm() < 0.01);
            assert!(prev.orientation.angle_to(&cur.orientation) < 0.01);
            // The rate stays bounded through segment boundaries.
            assert!(cur.angular_velocity.norm() < 0.5);
            prev = cur;
        }
        // The sequence returns to the initial pose.
        let end = seq.sample(seq.total_duration() + 0.1);
        assert_relative_eq!(end.position, seq.base_position, epsilon = 1e-9);
    }

    fn demo_stance() -> Vec<(String, Vector3<f64>)> {
        vec![
            ("LF_FOOT".into(), Vector3::new(0.25, 0.25, 0.0)),
            ("RF_FOOT".into(), Vector3::new(0.25, -0.25, 0.0)),
            ("LH_FOOT".into(), Vector3::new(-0.35, 0.25, 0.0)),
            ("RH_FOOT".into(), Vector3::new(-0.35, -0.25, 0.0)),
        ]
    }

    #[test]
    fn crawl_schedule_keeps_three_feet_down() {
        let schedule =
            static_walk_sequencer(&demo_stance(), 0.1, 0.05, 8.0, 0.0).unwrap();
        assert_eq!(schedule.phases.len(), 4);
        // Swing windows must not overlap.
        for pair in schedule.phases.windows(2) {
            assert!(pair[0].t_start + pair[0].duration <= pair[1].t_start + 1e-12);
        }
    }

    #[test]
    fn crawl_base_targets_have_support_margin() {
        let stance = demo_stance();
        let schedule = static_walk_sequencer(&stance, 0.1, 0.05, 8.0, 0.0).unwrap();
        let mut current: Vec<(String, Vector3<f64>)> = stance.clone();
        for phase in &schedule.phases {
            let others: Vec<Vector3<f64>> = current
                .iter()
                .filter(|(f, _)| *f != phase.frame)
                .map(|(_, p)| *p)
                .collect();
            let margin = support_margin(&phase.base_target, &others[0], &others[1], &others[2]);
            assert!(margin > 0.05, "margin {margin} for {}", phase.frame);
            for (f, p) in current.iter_mut() {
                if *f == phase.frame {
                    *p = phase.to;
                }
            }
        }
    }

    #[test]
    fn swing_apex_reaches_the_clearance() {
        let schedule =
            static_walk_sequencer(&demo_stance(), 0.1, 0.05, 8.0, 0.0).unwrap();
        let phase = &schedule.phases[0];
        let apex = swing_foot_position(phase, phase.duration / 2.0);
        assert!(apex.position.z >= 0.05 - 1e-12);
        // Boundary samples land exactly on the footholds.
        let start = swing_foot_position(phase, 0.0);
        let end = swing_foot_position(phase, phase.duration);
        assert_relative_eq!(start.position, phase.from, epsilon = 1e-12);
        assert_relative_eq!(end.position, phase.to, epsilon = 1e-12);
    }

    #[test]
    fn slope_tilts_the_surface_rotation() {
        let slope = 0.349;
        let schedule =
            static_walk_sequencer(&demo_stance(), 0.1, 0.05, 8.0, slope).unwrap();
        let normal = schedule.surface_rotation * Vector3::z();
        assert_relative_eq!(normal.z, slope.cos(), epsilon = 1e-12);
        assert_relative_eq!(normal.x, slope.sin(), epsilon = 1e-12);
    }

    #[test]
    fn sequencer_rejects_bad_inputs() {
        let stance = demo_stance();
        assert!(matches!(
            static_walk_sequencer(&stance, 0.1, 0.05, 8.0, 0.4),
            Err(TrajectoryError::BadSlope(_))
        ));
        assert!(matches!(
            static_walk_sequencer(&stance, 0.5, 0.05, 8.0, 0.0),
            Err(TrajectoryError::StrideTooLarge { .. })
        ));
    }
}
