//! Robot model: kinematic tree, inertial parameters and named contact frames.
//!
//! The model is a tree of rigid links connected by revolute joints under a
//! 6-DOF floating base. Contact frames are named points fixed to a link
//! (feet, prongs, shank); their orientation is the parent link's.

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::scalar::{real, Real};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("duplicate name `{0}` in model")]
    DuplicateName(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("link `{0}` has non-positive mass")]
    NonPositiveMass(String),
    #[error("link `{0}` rotational inertia is not symmetric positive definite")]
    InertiaNotSpd(String),
    #[error("joint `{0}` axis has zero length")]
    ZeroAxis(String),
    #[error("joint `{0}` has position limits with lower > upper")]
    BadLimits(String),
    #[error("model is not a tree rooted at the base (link `{0}`)")]
    NotATree(String),
    #[error("failed to parse model file: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Rigid link with inertial parameters expressed in the link frame.
#[derive(Clone, Debug)]
pub struct Link<T: Real> {
    pub name: String,
    /// Mass in kg.
    pub mass: T,
    /// Center of mass in the link frame, m.
    pub com: Vector3<T>,
    /// Rotational inertia about the center of mass, link frame, kg m^2.
    pub inertia: Matrix3<T>,
}

/// Revolute joint connecting a parent link to a child link.
///
/// The joint frame coincides with the child link frame; at zero angle the
/// child frame is the parent frame translated by `origin`.
#[derive(Clone, Debug)]
pub struct Joint<T: Real> {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    /// Joint location in the parent link frame, m.
    pub origin: Vector3<T>,
    /// Rotation axis in the child link frame.
    pub axis: Unit<Vector3<T>>,
    /// Position limits, rad.
    pub position_limits: (T, T),
    /// Symmetric torque limit, N m.
    pub torque_limit: T,
}

/// Named point fixed to a link. Orientation follows the parent link.
#[derive(Clone, Debug)]
pub struct ContactFrame<T: Real> {
    pub name: String,
    pub parent: usize,
    /// Offset in the parent link frame, m.
    pub offset: Vector3<T>,
}

/// Floating-base kinematic tree.
///
/// Link 0 is the floating base. Joint `j` drives link `j + 1` and maps to
/// generalized coordinate `6 + j`; joints are stored so that every parent
/// link precedes its children.
#[derive(Clone, Debug)]
pub struct RobotModel<T: Real> {
    pub name: String,
    pub links: Vec<Link<T>>,
    pub joints: Vec<Joint<T>>,
    pub contact_frames: Vec<ContactFrame<T>>,
}

/// Resolved frame: a link plus a fixed offset in that link's frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRef<T: Real> {
    pub link: usize,
    pub offset: Vector3<T>,
}

impl<T: Real> RobotModel<T> {
    /// Number of actuated joints.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Generalized-velocity dimension, 6 + n.
    pub fn nv(&self) -> usize {
        6 + self.joints.len()
    }

    pub fn total_mass(&self) -> T {
        self.links.iter().fold(T::zero(), |acc, l| acc + l.mass)
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Resolve a frame name: either a contact frame or a link name
    /// (frame at the link origin). `"base"` is an alias for link 0.
    pub fn frame(&self, name: &str) -> Result<FrameRef<T>, ModelError> {
        if name == "base" {
            return Ok(FrameRef { link: 0, offset: Vector3::zeros() });
        }
        if let Some(cf) = self.contact_frames.iter().find(|c| c.name == name) {
            return Ok(FrameRef { link: cf.parent, offset: cf.offset });
        }
        if let Some(idx) = self.link_index(name) {
            return Ok(FrameRef { link: idx, offset: Vector3::zeros() });
        }
        Err(ModelError::UnknownFrame(name.to_string()))
    }

    /// Joint driving `link` (none for the base).
    pub fn parent_joint(&self, link: usize) -> Option<usize> {
        if link == 0 {
            None
        } else {
            Some(link - 1)
        }
    }

    pub fn torque_limits(&self) -> (Vec<T>, Vec<T>) {
        let lo = self.joints.iter().map(|j| -j.torque_limit).collect();
        let hi = self.joints.iter().map(|j| j.torque_limit).collect();
        (lo, hi)
    }

    /// Structural and physical validity checks.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut names = std::collections::HashSet::new();
        for l in &self.links {
            if !names.insert(l.name.clone()) {
                return Err(ModelError::DuplicateName(l.name.clone()));
            }
        }
        for c in &self.contact_frames {
            if !names.insert(c.name.clone()) {
                return Err(ModelError::DuplicateName(c.name.clone()));
            }
        }
        for l in &self.links {
            if l.mass <= T::zero() {
                return Err(ModelError::NonPositiveMass(l.name.clone()));
            }
            let sym_err = (l.inertia - l.inertia.transpose()).norm();
            if sym_err > real(1e-9) {
                return Err(ModelError::InertiaNotSpd(l.name.clone()));
            }
            let eig = nalgebra::SymmetricEigen::new(l.inertia);
            if eig.eigenvalues.iter().any(|&e| e <= T::zero()) {
                return Err(ModelError::InertiaNotSpd(l.name.clone()));
            }
        }
        // Tree shape: joint j drives link j+1 with a parent of lower index.
        if self.joints.len() + 1 != self.links.len() {
            return Err(ModelError::NotATree(self.links[0].name.clone()));
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if joint.child != j + 1 || joint.parent >= joint.child {
                return Err(ModelError::NotATree(self.links[joint.child.min(self.links.len() - 1)].name.clone()));
            }
            if joint.position_limits.0 > joint.position_limits.1 {
                return Err(ModelError::BadLimits(joint.name.clone()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON schema (always f64 on disk)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSchema {
    name: String,
    mass: f64,
    com: [f64; 3],
    inertia: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointSchema {
    name: String,
    parent: String,
    child: String,
    origin: [f64; 3],
    axis: [f64; 3],
    position_limits: [f64; 2],
    torque_limit: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactFrameSchema {
    name: String,
    parent: String,
    offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSchema {
    name: String,
    base: String,
    links: Vec<LinkSchema>,
    joints: Vec<JointSchema>,
    contact_frames: Vec<ContactFrameSchema>,
}

fn vec3<T: Real>(a: [f64; 3]) -> Vector3<T> {
    Vector3::new(real(a[0]), real(a[1]), real(a[2]))
}

impl<T: Real> RobotModel<T> {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let schema: ModelSchema =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        Self::from_schema(schema)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String
    where
        T: Into<f64>,
    {
        let schema = self.to_schema();
        serde_json::to_string_pretty(&schema).expect("model serialization cannot fail")
    }

    fn from_schema(schema: ModelSchema) -> Result<Self, ModelError> {
        // Reorder links so the base is first and each child follows its parent.
        let mut order: Vec<usize> = Vec::with_capacity(schema.links.len());
        let base_idx = schema
            .links
            .iter()
            .position(|l| l.name == schema.base)
            .ok_or_else(|| ModelError::UnknownLink(schema.base.clone()))?;
        order.push(base_idx);

        let mut joint_order: Vec<usize> = Vec::new();
        let mut remaining: Vec<usize> = (0..schema.joints.len()).collect();
        while !remaining.is_empty() {
            let mut advanced = false;
            remaining.retain(|&ji| {
                let j = &schema.joints[ji];
                let parent_placed = order.iter().any(|&li| schema.links[li].name == j.parent);
                if parent_placed {
                    let child_idx = schema.links.iter().position(|l| l.name == j.child);
                    match child_idx {
                        Some(ci) if !order.contains(&ci) => {
                            order.push(ci);
                            joint_order.push(ji);
                            advanced = true;
                            false
                        }
                        _ => true,
                    }
                } else {
                    true
                }
            });
            if !advanced {
                return Err(ModelError::NotATree(schema.base.clone()));
            }
        }
        if order.len() != schema.links.len() {
            return Err(ModelError::NotATree(schema.base.clone()));
        }

        let placed_index = |name: &str| -> Result<usize, ModelError> {
            order
                .iter()
                .position(|&li| schema.links[li].name == name)
                .ok_or_else(|| ModelError::UnknownLink(name.to_string()))
        };

        let links = order
            .iter()
            .map(|&li| {
                let l = &schema.links[li];
                Link {
                    name: l.name.clone(),
                    mass: real(l.mass),
                    com: vec3(l.com),
                    inertia: Matrix3::from_fn(|r, c| real(l.inertia[r][c])),
                }
            })
            .collect();

        let mut joints = Vec::with_capacity(schema.joints.len());
        for &ji in &joint_order {
            let j = &schema.joints[ji];
            let axis = vec3::<T>(j.axis);
            if axis.norm() < real(1e-12) {
                return Err(ModelError::ZeroAxis(j.name.clone()));
            }
            joints.push(Joint {
                name: j.name.clone(),
                parent: placed_index(&j.parent)?,
                child: placed_index(&j.child)?,
                origin: vec3(j.origin),
                axis: Unit::new_normalize(axis),
                position_limits: (real(j.position_limits[0]), real(j.position_limits[1])),
                torque_limit: real(j.torque_limit),
            });
        }

        let contact_frames = schema
            .contact_frames
            .iter()
            .map(|c| {
                Ok(ContactFrame {
                    name: c.name.clone(),
                    parent: placed_index(&c.parent)?,
                    offset: vec3(c.offset),
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;

        let model = RobotModel { name: schema.name, links, joints, contact_frames };
        model.validate()?;
        Ok(model)
    }

    fn to_schema(&self) -> ModelSchema
    where
        T: Into<f64>,
    {
        let f = |x: T| -> f64 { x.into() };
        ModelSchema {
            name: self.name.clone(),
            base: self.links[0].name.clone(),
            links: self
                .links
                .iter()
                .map(|l| LinkSchema {
                    name: l.name.clone(),
                    mass: f(l.mass),
                    com: [f(l.com.x), f(l.com.y), f(l.com.z)],
                    inertia: [
                        [f(l.inertia[(0, 0)]), f(l.inertia[(0, 1)]), f(l.inertia[(0, 2)])],
                        [f(l.inertia[(1, 0)]), f(l.inertia[(1, 1)]), f(l.inertia[(1, 2)])],
                        [f(l.inertia[(2, 0)]), f(l.inertia[(2, 1)]), f(l.inertia[(2, 2)])],
                    ],
                })
                .collect(),
            joints: self
                .joints
                .iter()
                .map(|j| JointSchema {
                    name: j.name.clone(),
                    parent: self.links[j.parent].name.clone(),
                    child: self.links[j.child].name.clone(),
                    origin: [f(j.origin.x), f(j.origin.y), f(j.origin.z)],
                    axis: [f(j.axis.x), f(j.axis.y), f(j.axis.z)],
                    position_limits: [f(j.position_limits.0), f(j.position_limits.1)],
                    torque_limit: f(j.torque_limit),
                })
                .collect(),
            contact_frames: self
                .contact_frames
                .iter()
                .map(|c| ContactFrameSchema {
                    name: c.name.clone(),
                    parent: self.links[c.parent].name.clone(),
                    offset: [f(c.offset.x), f(c.offset.y), f(c.offset.z)],
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Default desk-scale quadruped
// ---------------------------------------------------------------------------

pub const LEGS: [&str; 4] = ["LF", "RF", "LH", "RH"];

/// Desk-scale quadruped: ~20 kg torso, four 3-joint legs, two prongs on the
/// torso front and a shank frame on the left-fore leg. 12 actuated joints.
pub fn default_quadruped<T: Real>() -> RobotModel<T> {
    let rod = |m: f64, l: f64| -> Matrix3<T> {
        let i = real::<T>(m * l * l / 12.0);
        Matrix3::from_diagonal(&Vector3::new(i, i, real(m * 1e-4)))
    };

    let mut links = vec![Link {
        name: "torso".to_string(),
        mass: real(20.0),
        com: Vector3::zeros(),
        inertia: Matrix3::from_diagonal(&Vector3::new(real(0.22), real(0.67), real(0.75))),
    }];
    let mut joints = Vec::new();
    let mut contact_frames = Vec::new();

    let hip_x = 0.30;
    let hip_y = 0.17;
    let hip_out = 0.08;
    let thigh_len = 0.25;
    let shank_len = 0.25;

    for (li, leg) in LEGS.iter().enumerate() {
        let sx: f64 = if li < 2 { 1.0 } else { -1.0 };
        let sy: f64 = if li % 2 == 0 { 1.0 } else { -1.0 };

        let hip = links.len();
        links.push(Link {
            name: format!("{leg}_hip"),
            mass: real(1.0),
            com: Vector3::new(T::zero(), real(sy * hip_out / 2.0), T::zero()),
            inertia: Matrix3::from_diagonal(&Vector3::new(real(2e-3), real(2e-3), real(2e-3))),
        });
        joints.push(Joint {
            name: format!("{leg}_HAA"),
            parent: 0,
            child: hip,
            origin: Vector3::new(real(sx * hip_x), real(sy * hip_y), T::zero()),
            axis: Unit::new_normalize(Vector3::x()),
            position_limits: (real(-0.8), real(0.8)),
            torque_limit: real(80.0),
        });

        let thigh = links.len();
        links.push(Link {
            name: format!("{leg}_thigh"),
            mass: real(1.2),
            com: Vector3::new(T::zero(), T::zero(), real(-thigh_len / 2.0)),
            inertia: rod(1.2, thigh_len),
        });
        joints.push(Joint {
            name: format!("{leg}_HFE"),
            parent: hip,
            child: thigh,
            origin: Vector3::new(T::zero(), real(sy * hip_out), T::zero()),
            axis: Unit::new_normalize(Vector3::y()),
            position_limits: (real(-2.6), real(2.6)),
            torque_limit: real(80.0),
        });

        let shank = links.len();
        links.push(Link {
            name: format!("{leg}_shank"),
            mass: real(0.8),
            com: Vector3::new(T::zero(), T::zero(), real(-shank_len * 0.4)),
            inertia: rod(0.8, shank_len),
        });
        joints.push(Joint {
            name: format!("{leg}_KFE"),
            parent: thigh,
            child: shank,
            origin: Vector3::new(T::zero(), T::zero(), real(-thigh_len)),
            axis: Unit::new_normalize(Vector3::y()),
            position_limits: (real(-2.8), real(2.8)),
            torque_limit: real(80.0),
        });

        contact_frames.push(ContactFrame {
            name: format!("{leg}_FOOT"),
            parent: shank,
            offset: Vector3::new(T::zero(), T::zero(), real(-shank_len)),
        });
    }

    contact_frames.push(ContactFrame {
        name: "PRONG_L".to_string(),
        parent: 0,
        offset: Vector3::new(real(0.34), real(0.10), real(-0.09)),
    });
    contact_frames.push(ContactFrame {
        name: "PRONG_R".to_string(),
        parent: 0,
        offset: Vector3::new(real(0.34), real(-0.10), real(-0.09)),
    });
    // Manipulation frame partway down the left-fore shank.
    contact_frames.push(ContactFrame {
        name: "LF_SHANK".to_string(),
        parent: 3, // LF_shank
        offset: Vector3::new(T::zero(), T::zero(), real(-0.12)),
    });

    let model =
        RobotModel { name: "desk_quadruped".to_string(), links, joints, contact_frames };
    debug_assert!(model.validate().is_ok());
    model
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid() {
        let m: RobotModel<f64> = default_quadruped();
        m.validate().unwrap();
        assert_eq!(m.dof(), 12);
        assert_eq!(m.nv(), 18);
        assert_eq!(m.contact_frames.len(), 7); // 4 feet + 2 prongs + shank
        assert!((m.total_mass() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let m: RobotModel<f64> = default_quadruped();
        let text = m.to_json();
        let back = RobotModel::<f64>::from_json(&text).unwrap();
        assert_eq!(back.links.len(), m.links.len());
        assert_eq!(back.joints.len(), m.joints.len());
        assert!((back.links[3].mass - m.links[3].mass).abs() < 1e-15);
        let f = back.frame("LF_FOOT").unwrap();
        assert_eq!(f.link, 3);
    }

    #[test]
    fn unknown_frame_is_an_error() {
        let m: RobotModel<f64> = default_quadruped();
        assert!(matches!(m.frame("NOPE"), Err(ModelError::UnknownFrame(_))));
    }

    #[test]
    fn rejects_non_spd_inertia() {
        let mut m: RobotModel<f64> = default_quadruped();
        m.links[2].inertia[(0, 0)] = -1.0;
        assert!(matches!(m.validate(), Err(ModelError::InertiaNotSpd(_))));
    }

    #[test]
    fn rejects_cycle() {
        let m: RobotModel<f64> = default_quadruped();
        let mut text = m.to_json();
        // Reparent the torso-side joint onto its own child to break the tree.
        text = text.replace("\"parent\": \"LF_thigh\"", "\"parent\": \"LF_shank\"");
        assert!(RobotModel::<f64>::from_json(&text).is_err());
    }
}
