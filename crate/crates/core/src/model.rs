//! Seated 10-DOF upper-body kinematic chain.
//!
//! Frames: the chair base frame has x pointing forward (toward the desk and
//! the leader robot), y to the operator's left and z up. The modelled arm is
//! the right arm. At the zero configuration the torso is upright, the arm
//! hangs at the side and the palm faces the thigh; the hand segment then
//! points straight down.
//!
//! Joint order (all revolute, axes in the parent frame):
//!
//! | # | joint                      | axis | positive direction            |
//! |---|----------------------------|------|-------------------------------|
//! | 0 | torso_flexion              | +y   | lean forward                  |
//! | 1 | torso_lateral_bend         | +x   | bend to the right (arm side)  |
//! | 2 | torso_axial_rotation       | +z   | turn left                     |
//! | 3 | shoulder_flexion           | -y   | raise arm forward             |
//! | 4 | shoulder_abduction         | -x   | raise arm sideways            |
//! | 5 | shoulder_internal_rotation | +z   | swing forearm toward the body |
//! | 6 | elbow_flexion              | -y   | bring forearm forward         |
//! | 7 | forearm_pronation          | +z   | palm turns backward           |
//! | 8 | wrist_flexion              | +x   | hand toward the palm side     |
//! | 9 | wrist_deviation            | -y   | radial deviation              |
//!
//! Translations: torso top is `torso_len` above the hip, the shoulder is
//! `shoulder_offset` to the right of it, then `upper_arm_len`, `forearm_len`
//! and `hand_len` follow along the local -z axis.

use nalgebra::{SMatrix, SVector, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::rotation::canonical;

pub const NUM_JOINTS: usize = 10;

pub type JointVector = SVector<f64, NUM_JOINTS>;
pub type Jacobian = SMatrix<f64, 6, NUM_JOINTS>;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "torso_flexion",
    "torso_lateral_bend",
    "torso_axial_rotation",
    "shoulder_flexion",
    "shoulder_abduction",
    "shoulder_internal_rotation",
    "elbow_flexion",
    "forearm_pronation",
    "wrist_flexion",
    "wrist_deviation",
];

/// Index constants for the joints used by name elsewhere in the crate.
pub mod joint {
    pub const TORSO_FLEXION: usize = 0;
    pub const TORSO_LATERAL_BEND: usize = 1;
    pub const TORSO_AXIAL_ROTATION: usize = 2;
    pub const SHOULDER_FLEXION: usize = 3;
    pub const SHOULDER_ABDUCTION: usize = 4;
    pub const SHOULDER_INTERNAL_ROTATION: usize = 5;
    pub const ELBOW_FLEXION: usize = 6;
    pub const FOREARM_PRONATION: usize = 7;
    pub const WRIST_FLEXION: usize = 8;
    pub const WRIST_DEVIATION: usize = 9;
}

const MAX_SEGMENT_LEN: f64 = 2.0;

/// Segment lengths of the chain, in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegmentLengths {
    pub torso_len: f64,
    /// Torso top to shoulder center.
    pub shoulder_offset: f64,
    pub upper_arm_len: f64,
    pub forearm_len: f64,
    /// Wrist joint to the interaction point on the stylus.
    pub hand_len: f64,
}

impl SegmentLengths {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.torso_len,
            self.shoulder_offset,
            self.upper_arm_len,
            self.forearm_len,
            self.hand_len,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        const NAMES: [&str; 5] = [
            "torso_len",
            "shoulder_offset",
            "upper_arm_len",
            "forearm_len",
            "hand_len",
        ];
        for (name, v) in NAMES.iter().zip(self.as_array()) {
            if !(v.is_finite() && v > 0.0 && v < MAX_SEGMENT_LEN) {
                return Err(Error::InvalidInput(format!(
                    "segment length {name} = {v} outside (0, {MAX_SEGMENT_LEN}) m"
                )));
            }
        }
        Ok(())
    }
}

/// Serial chain layout: joint names, axes, translations and fixed limits.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLayout {
    pub names: [String; NUM_JOINTS],
    pub axes: [Unit<Vector3<f64>>; NUM_JOINTS],
    /// Translation applied (in the parent frame) before joint `i` rotates.
    pub parent_offsets: [Vector3<f64>; NUM_JOINTS],
    /// Translation from the last joint to the stylus interaction point.
    pub tool_offset: Vector3<f64>,
    pub limits_lo: JointVector,
    pub limits_hi: JointVector,
}

impl JointLayout {
    /// The seated right-arm chain described in the module docs.
    pub fn seated(lengths: &SegmentLengths, limits_lo: JointVector, limits_hi: JointVector) -> Result<Self> {
        lengths.validate()?;
        for i in 0..NUM_JOINTS {
            if !(limits_lo[i].is_finite() && limits_hi[i].is_finite() && limits_lo[i] < limits_hi[i]) {
                return Err(Error::InvalidInput(format!(
                    "joint {} has limits [{}, {}]",
                    JOINT_NAMES[i], limits_lo[i], limits_hi[i]
                )));
            }
        }
        let x = Vector3::x_axis();
        let y = Vector3::y_axis();
        let z = Vector3::z_axis();
        let neg = |a: Unit<Vector3<f64>>| Unit::new_unchecked(-a.into_inner());
        let axes = [y, x, z, neg(y), neg(x), z, neg(y), z, x, neg(y)];
        let mut parent_offsets = [Vector3::zeros(); NUM_JOINTS];
        parent_offsets[joint::SHOULDER_FLEXION] =
            Vector3::new(0.0, -lengths.shoulder_offset, lengths.torso_len);
        parent_offsets[joint::ELBOW_FLEXION] = Vector3::new(0.0, 0.0, -lengths.upper_arm_len);
        parent_offsets[joint::WRIST_FLEXION] = Vector3::new(0.0, 0.0, -lengths.forearm_len);
        Ok(Self {
            names: JOINT_NAMES.map(String::from),
            axes,
            parent_offsets,
            tool_offset: Vector3::new(0.0, 0.0, -lengths.hand_len),
            limits_lo,
            limits_hi,
        })
    }

    pub fn range_of_motion(&self) -> JointVector {
        self.limits_hi - self.limits_lo
    }
}

/// Joint angles and velocities at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostureState {
    pub q: JointVector,
    pub qdot: JointVector,
}

impl PostureState {
    pub fn at_rest(q: JointVector) -> Self {
        Self {
            q,
            qdot: JointVector::zeros(),
        }
    }
}

/// Stylus pose: position in meters and a canonical-sign unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpacePose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl TaskSpacePose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    /// `self ∘ other`: maps points of `other`'s child frame through `self`.
    pub fn compose(&self, other: &TaskSpacePose) -> TaskSpacePose {
        TaskSpacePose::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }
}

/// Spatial velocity of the stylus point in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpaceVelocity {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl TaskSpaceVelocity {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }
}

/// World-frame joint origins and axes for one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    pub origins: [Vector3<f64>; NUM_JOINTS],
    pub axes: [Vector3<f64>; NUM_JOINTS],
    pub tip: TaskSpacePose,
}

/// Kinematic model of one operator in one session.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanModel {
    pub lengths: SegmentLengths,
    pub layout: JointLayout,
    /// Chair base frame expressed in the robot frame.
    pub base_pose: TaskSpacePose,
    pub neutral_posture: JointVector,
}

fn check_finite(v: &JointVector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite {what}: {v:?}")))
    }
}

impl HumanModel {
    pub fn new(
        lengths: SegmentLengths,
        limits_lo: JointVector,
        limits_hi: JointVector,
        base_pose: TaskSpacePose,
        neutral_posture: JointVector,
    ) -> Result<Self> {
        let layout = JointLayout::seated(&lengths, limits_lo, limits_hi)?;
        check_finite(&neutral_posture, "neutral posture")?;
        if (0..NUM_JOINTS).any(|i| neutral_posture[i] < limits_lo[i] || neutral_posture[i] > limits_hi[i]) {
            return Err(Error::InvalidInput("neutral posture outside joint limits".into()));
        }
        if !(base_pose.position.iter().all(|x| x.is_finite())
            && (base_pose.orientation.norm() - 1.0).abs() < 1e-9)
        {
            return Err(Error::InvalidInput("invalid base pose".into()));
        }
        Ok(Self {
            lengths,
            layout,
            base_pose,
            neutral_posture,
        })
    }

    /// The bundled seated 50th-percentile model.
    pub fn default_seated() -> Self {
        crate::io::parse_model_toml(crate::io::DEFAULT_MODEL_TOML, "<bundled>")
            .expect("bundled model file is valid")
    }

    /// Same model with new segment lengths.
    pub fn with_lengths(&self, lengths: SegmentLengths) -> Result<Self> {
        Self::new(
            lengths,
            self.layout.limits_lo,
            self.layout.limits_hi,
            self.base_pose,
            self.neutral_posture,
        )
    }

    pub fn with_base_pose(&self, base_pose: TaskSpacePose) -> Result<Self> {
        Self::new(
            self.lengths,
            self.layout.limits_lo,
            self.layout.limits_hi,
            base_pose,
            self.neutral_posture,
        )
    }

    pub fn limits_lo(&self) -> &JointVector {
        &self.layout.limits_lo
    }

    pub fn limits_hi(&self) -> &JointVector {
        &self.layout.limits_hi
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        (0..NUM_JOINTS).all(|i| q[i] >= self.layout.limits_lo[i] && q[i] <= self.layout.limits_hi[i])
    }

    /// Projects `q` onto the joint-limit box.
    pub fn clamp_posture(&self, q: &JointVector) -> JointVector {
        q.zip_zip_map(&self.layout.limits_lo, &self.layout.limits_hi, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Joint origins, world axes and stylus pose for `q`, without validation.
    pub fn frames(&self, q: &JointVector) -> ChainFrames {
        let mut rot = self.base_pose.orientation;
        let mut pos = self.base_pose.position;
        let mut origins = [Vector3::zeros(); NUM_JOINTS];
        let mut axes = [Vector3::zeros(); NUM_JOINTS];
        for i in 0..NUM_JOINTS {
            pos += rot * self.layout.parent_offsets[i];
            origins[i] = pos;
            axes[i] = rot * self.layout.axes[i].into_inner();
            rot *= UnitQuaternion::from_axis_angle(&self.layout.axes[i], q[i]);
        }
        pos += rot * self.layout.tool_offset;
        ChainFrames {
            origins,
            axes,
            tip: TaskSpacePose::new(pos, rot),
        }
    }

    /// Stylus pose and spatial velocity `J(q) q̇` in the robot frame.
    pub fn forward_kinematics(&self, state: &PostureState) -> Result<(TaskSpacePose, TaskSpaceVelocity)> {
        check_finite(&state.q, "joint angles")?;
        check_finite(&state.qdot, "joint velocities")?;
        let frames = self.frames(&state.q);
        let jac = jacobian_from_frames(&frames);
        let twist = jac * state.qdot;
        Ok((
            frames.tip,
            TaskSpaceVelocity {
                linear: twist.fixed_rows::<3>(0).into_owned(),
                angular: twist.fixed_rows::<3>(3).into_owned(),
            },
        ))
    }

    /// Stylus pose only.
    pub fn stylus_pose(&self, q: &JointVector) -> Result<TaskSpacePose> {
        check_finite(q, "joint angles")?;
        Ok(self.frames(q).tip)
    }

    /// Geometric Jacobian at the stylus point: rows are (linear, angular),
    /// columns follow the joint order.
    pub fn jacobian(&self, q: &JointVector) -> Result<Jacobian> {
        check_finite(q, "joint angles")?;
        Ok(jacobian_from_frames(&self.frames(q)))
    }
}

pub fn jacobian_from_frames(frames: &ChainFrames) -> Jacobian {
    let mut jac = Jacobian::zeros();
    let tip = frames.tip.position;
    for i in 0..NUM_JOINTS {
        let a = frames.axes[i];
        let lin = a.cross(&(tip - frames.origins[i]));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&a);
    }
    jac
}

/// Partial derivatives of the spatial velocity `J(q) q̇` with respect to `q`.
///
/// Column `j` is `Σ_i (∂J_i/∂q_j) q̇_i`, using the closed-form derivatives of
/// revolute geometric Jacobian columns.
pub fn velocity_jacobian(frames: &ChainFrames, qdot: &JointVector) -> Jacobian {
    let tip = frames.tip.position;
    let mut out = Jacobian::zeros();
    for j in 0..NUM_JOINTS {
        let aj = frames.axes[j];
        let pj = frames.origins[j];
        let dtip = aj.cross(&(tip - pj));
        let mut lin = Vector3::zeros();
        let mut ang = Vector3::zeros();
        for i in 0..NUM_JOINTS {
            let ai = frames.axes[i];
            let pi = frames.origins[i];
            let (dai, dpi) = if j < i {
                (aj.cross(&ai), aj.cross(&(pi - pj)))
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            let dlin = dai.cross(&(tip - pi)) + ai.cross(&(dtip - dpi));
            lin += dlin * qdot[i];
            ang += dai * qdot[i];
        }
        out.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
        out.fixed_view_mut::<3, 1>(3, j).copy_from(&ang);
    }
    out
}


/// One timestamped stylus measurement from the leader robot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StylusObservation {
    /// Seconds.
    pub t: f64,
    pub pose: TaskSpacePose,
    pub velocity: TaskSpaceVelocity,
}

impl StylusObservation {
    /// Noiseless observation of `state` at time `t`.
    pub fn of_state(model: &HumanModel, state: &PostureState, t: f64) -> Result<Self> {
        let (pose, velocity) = model.forward_kinematics(state)?;
        Ok(Self { t, pose, velocity })
    }
}
