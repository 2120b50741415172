//! Robot definition and kinematics of the planar five-bar-legged biped.
//!
//! Coordinate conventions used across the crate:
//!
//! - The sagittal plane has `x` forward and `z` up; rotations are CCW.
//! - The 11 generalized coordinates are `[x, z, pitch]` of the floating base
//!   followed by `[rear hip, rear knee, fore hip, fore knee]` for the right
//!   leg and the same four for the left leg. Hips are actuated, knees are
//!   passive.
//! - Link angles are measured from "straight down" in the parent frame, with
//!   positive angles tipping the link forward (+x).
//! - Each leg closes its five-bar loop where the two distal links meet at the
//!   foot point; the foot is identified with the fore-limb distal endpoint.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Number of generalized coordinates.
pub const N_Q: usize = 11;
/// Number of scalar loop-closure constraints (two 2-D closures).
pub const N_LOOP: usize = 4;
/// Number of actuated joints.
pub const N_ACT: usize = 4;
/// Number of contact force components (two point feet, x and z each).
pub const N_CONTACT: usize = 4;

/// Generalized coordinate indices of the floating base.
pub const Q_BASE_X: usize = 0;
pub const Q_BASE_Z: usize = 1;
pub const Q_PITCH: usize = 2;

/// Actuated (hip) coordinate indices, rear then fore, right leg then left.
pub const ACTUATED_IDX: [usize; N_ACT] = [3, 5, 7, 9];
/// Passive (knee) coordinate indices in the same order.
pub const PASSIVE_IDX: [usize; N_ACT] = [4, 6, 8, 10];

pub type GenVec = SVector<f64, N_Q>;
pub type GenMat = SMatrix<f64, N_Q, N_Q>;
pub type LoopMat = SMatrix<f64, N_LOOP, N_Q>;
pub type LoopVec = SVector<f64, N_LOOP>;
pub type ContactMat = SMatrix<f64, N_CONTACT, N_Q>;
pub type ContactVec = SVector<f64, N_CONTACT>;
pub type Vec2 = Vector2<f64>;

/// 2-D rotation by `theta` (CCW in the x-z plane).
pub fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// 90-degree CCW rotation of a planar vector.
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// Planar cross product (z component of the 3-D cross product).
#[inline]
pub fn cross2(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Unit vector at angle `alpha` from straight down, tipping forward for
/// positive `alpha`.
#[inline]
pub fn dir_from_down(alpha: f64) -> Vec2 {
    let (s, c) = alpha.sin_cos();
    Vec2::new(s, -c)
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Legs of the biped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LegId {
    Right = 0,
    Left = 1,
}

impl LegId {
    pub const BOTH: [LegId; 2] = [LegId::Right, LegId::Left];

    /// First generalized-coordinate index of this leg's joint block.
    #[inline]
    pub fn q_offset(self) -> usize {
        3 + 4 * (self as usize)
    }

    #[inline]
    pub fn other(self) -> LegId {
        match self {
            LegId::Right => LegId::Left,
            LegId::Left => LegId::Right,
        }
    }
}

/// The two limbs of a five-bar leg.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimbId {
    Rear = 0,
    Fore = 1,
}

impl LimbId {
    pub const BOTH: [LimbId; 2] = [LimbId::Rear, LimbId::Fore];

    pub fn other(self) -> LimbId {
        match self {
            LimbId::Rear => LimbId::Fore,
            LimbId::Fore => LimbId::Rear,
        }
    }
}

/// Closure branch of the five-bar loop. `Outward` is the working branch:
/// the rear knee folds backward, the fore knee forward, and the foot lies
/// below the knee-to-knee line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ClosureBranch {
    #[default]
    Outward,
    Inward,
}

impl ClosureBranch {
    /// Sign of the knee joint angle for a limb on this branch.
    pub fn elbow_sign(self, limb: LimbId) -> f64 {
        match (self, limb) {
            (ClosureBranch::Outward, LimbId::Rear) => 1.0,
            (ClosureBranch::Outward, LimbId::Fore) => -1.0,
            (ClosureBranch::Inward, LimbId::Rear) => -1.0,
            (ClosureBranch::Inward, LimbId::Fore) => 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse model file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KinematicsError {
    #[error("five-bar loop cannot close for the given hip angles")]
    NoClosure,
    #[error("foot target is outside the leg's reachable space")]
    OutOfReach,
}

/// Supported model config schema version.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// One rigid link of a limb.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LinkParams {
    /// Length [m].
    pub length: f64,
    /// Mass [kg].
    pub mass: f64,
    /// Rotational inertia about the link COM [kg m^2].
    pub inertia: f64,
}

/// One limb (proximal thigh + distal shank) of a five-bar leg.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LimbParams {
    /// Hip anchor offset in the base frame [m].
    pub anchor: [f64; 2],
    pub proximal: LinkParams,
    pub distal: LinkParams,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LegParams {
    pub rear: LimbParams,
    pub fore: LimbParams,
}

impl LegParams {
    pub fn limb(&self, limb: LimbId) -> &LimbParams {
        match limb {
            LimbId::Rear => &self.rear,
            LimbId::Fore => &self.fore,
        }
    }

    /// Total mass of the leg's four links.
    pub fn mass(&self) -> f64 {
        self.rear.proximal.mass
            + self.rear.distal.mass
            + self.fore.proximal.mass
            + self.fore.distal.mass
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TorsoParams {
    pub mass: f64,
    pub inertia: f64,
    /// The base is restricted to the sagittal plane (x, z, pitch). Kept as an
    /// explicit flag so the config states the modeling assumption.
    pub planar_constraint: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ActuatorParams {
    /// Torque limit per actuated joint [N m].
    pub tau_max: f64,
    /// Rated speed [rad/s].
    pub rated_speed: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointLimits {
    /// Hip joint range [rad].
    pub hip_min: f64,
    pub hip_max: f64,
}

/// On-disk robot model description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub schema_version: u32,
    /// Gravitational acceleration magnitude [m/s^2].
    pub gravity: f64,
    pub torso: TorsoParams,
    pub right_leg: LegParams,
    pub left_leg: LegParams,
    pub actuator: ActuatorParams,
    pub joint_limits: JointLimits,
    #[serde(default)]
    pub working_branch: ClosureBranch,
}

/// Validated robot model.
#[derive(Clone, Debug)]
pub struct RobotModel {
    config: ModelConfig,
    hash: String,
}

impl RobotModel {
    pub fn from_config(config: ModelConfig) -> Result<Self, ModelError> {
        if config.schema_version != MODEL_SCHEMA_VERSION {
            return Err(ModelError::SchemaVersion {
                found: config.schema_version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        validate(&config)?;
        let hash = hash_config(&config);
        Ok(RobotModel { config, hash })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let config: ModelConfig = toml::from_str(&text)?;
        Self::from_config(config)
    }

    /// Built-in reference model used by the experiments and tests.
    pub fn reference() -> Self {
        let config: ModelConfig =
            toml::from_str(REFERENCE_MODEL_TOML).expect("reference model parses");
        Self::from_config(config).expect("reference model is valid")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Hash of the model parameters, embedded in derived artifacts so stale
    /// files are rejected.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn gravity(&self) -> f64 {
        self.config.gravity
    }

    pub fn leg(&self, leg: LegId) -> &LegParams {
        match leg {
            LegId::Right => &self.config.right_leg,
            LegId::Left => &self.config.left_leg,
        }
    }

    pub fn actuator(&self) -> &ActuatorParams {
        &self.config.actuator
    }

    pub fn working_branch(&self) -> ClosureBranch {
        self.config.working_branch
    }

    pub fn total_mass(&self) -> f64 {
        self.config.torso.mass + self.config.right_leg.mass() + self.config.left_leg.mass()
    }

    /// Combined leg mass divided by torso mass.
    pub fn leg_to_torso_mass_ratio(&self) -> f64 {
        (self.config.right_leg.mass() + self.config.left_leg.mass()) / self.config.torso.mass
    }
}

fn validate(c: &ModelConfig) -> Result<(), ModelError> {
    let check = |name: &str, v: f64| {
        if v <= 0.0 || !v.is_finite() {
            return Err(ModelError::Invalid(format!("{name} must be positive, got {v}")));
        }
        Ok(())
    };
    check("gravity", c.gravity)?;
    check("torso.mass", c.torso.mass)?;
    check("torso.inertia", c.torso.inertia)?;
    check("actuator.tau_max", c.actuator.tau_max)?;
    check("actuator.rated_speed", c.actuator.rated_speed)?;
    for (leg_name, leg) in [("right_leg", &c.right_leg), ("left_leg", &c.left_leg)] {
        for (limb_name, limb) in [("rear", &leg.rear), ("fore", &leg.fore)] {
            for (link_name, link) in [("proximal", &limb.proximal), ("distal", &limb.distal)] {
                check(&format!("{leg_name}.{limb_name}.{link_name}.length"), link.length)?;
                check(&format!("{leg_name}.{limb_name}.{link_name}.mass"), link.mass)?;
                check(&format!("{leg_name}.{limb_name}.{link_name}.inertia"), link.inertia)?;
            }
        }
    }
    if c.joint_limits.hip_min >= c.joint_limits.hip_max {
        return Err(ModelError::Invalid("joint_limits must satisfy hip_min < hip_max".into()));
    }
    if !c.torso.planar_constraint {
        return Err(ModelError::Invalid("only the planar-constrained base is supported".into()));
    }
    Ok(())
}

/// Canonical text form of the config, hashed into derived artifacts.
fn hash_config(c: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let text = toml::to_string(c).expect("model config serializes");
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(16);
    for b in digest.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Reference model: 23 kg total, leg:torso mass ratio ~0.40, leg geometry
/// sized so foot depths from under 0.30 m to beyond 0.55 m below the hips
/// are reachable.
pub const REFERENCE_MODEL_TOML: &str = include_str!("../assets/reference_model.toml");

/// Contact phase of one foot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactPhase {
    Swing,
    Stance,
}

/// Full state of the robot: generalized coordinates and velocities, the
/// per-foot contact phase and the simulation clock.
#[derive(Clone, Debug)]
pub struct GeneralizedState {
    pub q: GenVec,
    pub qd: GenVec,
    pub contact: [ContactPhase; 2],
    pub t: f64,
}

impl GeneralizedState {
    pub fn new(q: GenVec, qd: GenVec, contact: [ContactPhase; 2], t: f64) -> Self {
        Self { q, qd, contact, t }
    }

    pub fn phase(&self, leg: LegId) -> ContactPhase {
        self.contact[leg as usize]
    }
}

/// World-frame points and absolute link angles of one limb.
#[derive(Clone, Copy, Debug)]
pub struct LimbPoints {
    pub anchor: Vec2,
    pub knee: Vec2,
    pub end: Vec2,
    /// Absolute proximal-link angle from straight down.
    pub alpha_prox: f64,
    /// Absolute distal-link angle from straight down.
    pub alpha_dist: f64,
}

/// Joint angles of one limb taken from the generalized coordinates.
#[inline]
fn limb_joints(q: &GenVec, leg: LegId, limb: LimbId) -> (f64, f64) {
    let o = leg.q_offset() + 2 * (limb as usize);
    (q[o], q[o + 1])
}

/// World-frame geometry of one limb at configuration `q`.
pub fn limb_points(model: &RobotModel, q: &GenVec, leg: LegId, limb: LimbId) -> LimbPoints {
    let params = model.leg(leg).limb(limb);
    let base = Vec2::new(q[Q_BASE_X], q[Q_BASE_Z]);
    let pitch = q[Q_PITCH];
    let (hip, knee) = limb_joints(q, leg, limb);
    let anchor = base + rot(pitch) * Vec2::new(params.anchor[0], params.anchor[1]);
    let alpha_prox = pitch + hip;
    let knee_pt = anchor + params.proximal.length * dir_from_down(alpha_prox);
    let alpha_dist = alpha_prox + knee;
    let end = knee_pt + params.distal.length * dir_from_down(alpha_dist);
    LimbPoints { anchor, knee: knee_pt, end, alpha_prox, alpha_dist }
}

/// Same as [`limb_points`] but in the base frame (base pose ignored).
pub fn limb_points_base_frame(
    model: &RobotModel,
    leg: LegId,
    limb: LimbId,
    hip: f64,
    knee: f64,
) -> LimbPoints {
    let params = model.leg(leg).limb(limb);
    let anchor = Vec2::new(params.anchor[0], params.anchor[1]);
    let knee_pt = anchor + params.proximal.length * dir_from_down(hip);
    let end = knee_pt + params.distal.length * dir_from_down(hip + knee);
    LimbPoints { anchor, knee: knee_pt, end, alpha_prox: hip, alpha_dist: hip + knee }
}

/// Solve the passive knee angles closing the five-bar loop for the given hip
/// angles on the selected branch.
///
/// Angles are base-frame joint angles `[rear, fore]`. Returns knee angles
/// `[rear, fore]` such that both distal endpoints coincide at the foot point.
pub fn solve_passive_joints(
    model: &RobotModel,
    leg: LegId,
    hips: [f64; 2],
    branch: ClosureBranch,
) -> Result<[f64; 2], KinematicsError> {
    let params = model.leg(leg);
    let a_r = Vec2::new(params.rear.anchor[0], params.rear.anchor[1]);
    let a_f = Vec2::new(params.fore.anchor[0], params.fore.anchor[1]);
    let knee_r = a_r + params.rear.proximal.length * dir_from_down(hips[0]);
    let knee_f = a_f + params.fore.proximal.length * dir_from_down(hips[1]);
    let l2r = params.rear.distal.length;
    let l2f = params.fore.distal.length;

    let delta = knee_f - knee_r;
    let d = delta.norm();
    if d < 1e-12 {
        // Coincident knees: foot position on the circle is undefined.
        return Err(KinematicsError::NoClosure);
    }
    // Circle-circle intersection of the two distal links.
    let two_d = 2.0 * d;
    let along = (l2r * l2r - l2f * l2f + d * d) / two_d;
    let h2 = l2r * l2r - along * along;
    if h2 < -1e-12 {
        return Err(KinematicsError::NoClosure);
    }
    let h = h2.max(0.0).sqrt();
    let u = delta / d;
    let mid = knee_r + along * u;
    let side = match branch {
        // Working branch: foot below the knee-to-knee line.
        ClosureBranch::Outward => -1.0,
        ClosureBranch::Inward => 1.0,
    };
    let foot = mid + side * h * perp(u);

    let alpha_r = angle_from_down(foot - knee_r);
    let alpha_f = angle_from_down(foot - knee_f);
    Ok([wrap_angle(alpha_r - hips[0]), wrap_angle(alpha_f - hips[1])])
}

/// Angle of a planar vector measured from straight down, forward positive.
#[inline]
pub fn angle_from_down(v: Vec2) -> f64 {
    v.x.atan2(-v.y)
}

/// Full joint set of one leg after closing the loop.
#[derive(Clone, Copy, Debug)]
pub struct LegJoints {
    pub hip_rear: f64,
    pub knee_rear: f64,
    pub hip_fore: f64,
    pub knee_fore: f64,
}

/// Inverse kinematics of one leg: hip angles placing the foot at `foot` in
/// the base frame, on the model's working branch.
pub fn leg_inverse_kinematics(
    model: &RobotModel,
    leg: LegId,
    foot: Vec2,
) -> Result<[f64; 2], KinematicsError> {
    let joints = leg_ik_full(model, leg, foot)?;
    Ok([joints.hip_rear, joints.hip_fore])
}

/// Inverse kinematics returning all four joint angles of the leg.
pub fn leg_ik_full(model: &RobotModel, leg: LegId, foot: Vec2) -> Result<LegJoints, KinematicsError> {
    let branch = model.working_branch();
    let params = model.leg(leg);
    let limits = model.config().joint_limits;
    let mut hips = [0.0; 2];
    let mut knees = [0.0; 2];
    for limb in LimbId::BOTH {
        let p = params.limb(limb);
        let anchor = Vec2::new(p.anchor[0], p.anchor[1]);
        let (l1, l2) = (p.proximal.length, p.distal.length);
        let r_vec = foot - anchor;
        let r2 = r_vec.norm_squared();
        let r = r2.sqrt();
        if r > l1 + l2 + 1e-12 || r < (l1 - l2).abs() - 1e-12 {
            return Err(KinematicsError::OutOfReach);
        }
        let cos_knee = ((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
        let knee = branch.elbow_sign(limb) * cos_knee.acos();
        let offset = (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
        let hip = wrap_angle(angle_from_down(r_vec) - offset);
        if hip < limits.hip_min || hip > limits.hip_max {
            return Err(KinematicsError::OutOfReach);
        }
        hips[limb as usize] = hip;
        knees[limb as usize] = knee;
    }
    Ok(LegJoints {
        hip_rear: hips[0],
        knee_rear: knees[0],
        hip_fore: hips[1],
        knee_fore: knees[1],
    })
}

/// Forward-kinematics summary: base pose and world-frame foot points.
#[derive(Clone, Copy, Debug)]
pub struct ForwardKinematics {
    pub base_position: Vec2,
    pub base_pitch: f64,
    /// Foot point (fore-limb distal endpoint) per leg.
    pub feet: [Vec2; 2],
}

pub fn forward_kinematics(model: &RobotModel, q: &GenVec) -> ForwardKinematics {
    let feet = [
        limb_points(model, q, LegId::Right, LimbId::Fore).end,
        limb_points(model, q, LegId::Left, LimbId::Fore).end,
    ];
    ForwardKinematics {
        base_position: Vec2::new(q[Q_BASE_X], q[Q_BASE_Z]),
        base_pitch: q[Q_PITCH],
        feet,
    }
}

/// Foot position of one leg in the base frame.
pub fn foot_in_base_frame(model: &RobotModel, q: &GenVec, leg: LegId) -> Vec2 {
    let (hip, knee) = limb_joints(q, leg, LimbId::Fore);
    limb_points_base_frame(model, leg, LimbId::Fore, hip, knee).end
}

/// Jacobian (2 x 11) and velocity-product acceleration of one limb endpoint.
fn limb_end_jacobian(
    model: &RobotModel,
    q: &GenVec,
    qd: &GenVec,
    leg: LegId,
    limb: LimbId,
) -> (SMatrix<f64, 2, N_Q>, Vec2) {
    let pts = limb_points(model, q, leg, limb);
    let base = Vec2::new(q[Q_BASE_X], q[Q_BASE_Z]);
    let o = leg.q_offset() + 2 * (limb as usize);

    let mut jac = SMatrix::<f64, 2, N_Q>::zeros();
    jac[(0, Q_BASE_X)] = 1.0;
    jac[(1, Q_BASE_Z)] = 1.0;
    jac.set_column(Q_PITCH, &perp(pts.end - base));
    jac.set_column(o, &perp(pts.end - pts.anchor));
    jac.set_column(o + 1, &perp(pts.end - pts.knee));

    // Velocity-product term of the endpoint acceleration (the Jdot*qd part).
    let pitch_rate = qd[Q_PITCH];
    let prox_rate = pitch_rate + qd[o];
    let dist_rate = prox_rate + qd[o + 1];
    let anchor_rel = pts.anchor - base;
    let prox = pts.knee - pts.anchor;
    let dist = pts.end - pts.knee;
    let drift = -pitch_rate * pitch_rate * anchor_rel
        - prox_rate * prox_rate * prox
        - dist_rate * dist_rate * dist;
    (jac, drift)
}

/// Loop-closure residual, Jacobian and velocity-product term.
#[derive(Clone, Debug)]
pub struct LoopTerms {
    /// Stacked 2-D closure gaps, fore endpoint minus rear endpoint per leg.
    pub phi: LoopVec,
    pub jac: LoopMat,
    /// Velocity-product term of the constraint acceleration.
    pub jdot_qd: LoopVec,
}

pub fn loop_constraints(model: &RobotModel, q: &GenVec, qd: &GenVec) -> LoopTerms {
    let mut phi = LoopVec::zeros();
    let mut jac = LoopMat::zeros();
    let mut jdot_qd = LoopVec::zeros();
    for leg in LegId::BOTH {
        let row = 2 * (leg as usize);
        let (jac_f, drift_f) = limb_end_jacobian(model, q, qd, leg, LimbId::Fore);
        let (jac_r, drift_r) = limb_end_jacobian(model, q, qd, leg, LimbId::Rear);
        let end_f = limb_points(model, q, leg, LimbId::Fore).end;
        let end_r = limb_points(model, q, leg, LimbId::Rear).end;
        let gap = end_f - end_r;
        let jac_diff = jac_f - jac_r;
        let drift = drift_f - drift_r;
        for k in 0..2 {
            phi[row + k] = gap[k];
            jdot_qd[row + k] = drift[k];
            for j in 0..N_Q {
                jac[(row + k, j)] = jac_diff[(k, j)];
            }
        }
    }
    LoopTerms { phi, jac, jdot_qd }
}

/// Task-space Jacobians used by the controller.
#[derive(Clone, Debug)]
pub struct TaskJacobians {
    /// Base-height row (selects z).
    pub base_height: SMatrix<f64, 1, N_Q>,
    /// Base-pitch row.
    pub base_pitch: SMatrix<f64, 1, N_Q>,
    /// Per-leg foot point Jacobians.
    pub foot: [SMatrix<f64, 2, N_Q>; 2],
    /// Per-leg foot velocity-product accelerations.
    pub foot_drift: [Vec2; 2],
    /// Stacked contact Jacobian, rows `[f1x, f1z, f2x, f2z]`.
    pub contact: ContactMat,
    pub contact_drift: ContactVec,
}

pub fn task_jacobians(model: &RobotModel, q: &GenVec, qd: &GenVec) -> TaskJacobians {
    let mut base_height = SMatrix::<f64, 1, N_Q>::zeros();
    base_height[(0, Q_BASE_Z)] = 1.0;
    let mut base_pitch = SMatrix::<f64, 1, N_Q>::zeros();
    base_pitch[(0, Q_PITCH)] = 1.0;

    let (jac_r, drift_r) = limb_end_jacobian(model, q, qd, LegId::Right, LimbId::Fore);
    let (jac_l, drift_l) = limb_end_jacobian(model, q, qd, LegId::Left, LimbId::Fore);

    let mut contact = ContactMat::zeros();
    let mut contact_drift = ContactVec::zeros();
    for (i, (jac, drift)) in [(&jac_r, drift_r), (&jac_l, drift_l)].iter().enumerate() {
        for k in 0..2 {
            contact_drift[2 * i + k] = drift[k];
            for j in 0..N_Q {
                contact[(2 * i + k, j)] = jac[(k, j)];
            }
        }
    }

    TaskJacobians {
        base_height,
        base_pitch,
        foot: [jac_r, jac_l],
        foot_drift: [drift_r, drift_l],
        contact,
        contact_drift,
    }
}

/// Mass-weighted body data at a configuration; consumed by the dynamics.
#[derive(Clone, Debug)]
pub struct BodyKinematics {
    pub mass: f64,
    pub inertia: f64,
    /// COM position in the world frame.
    pub com: Vec2,
    /// COM linear Jacobian.
    pub jac: SMatrix<f64, 2, N_Q>,
    /// Velocity-product part of the COM acceleration.
    pub drift: Vec2,
    /// Constant angular-velocity selector row.
    pub omega_row: SMatrix<f64, 1, N_Q>,
}

/// Kinematics of all nine bodies (torso plus eight limb links).
pub fn body_kinematics(model: &RobotModel, q: &GenVec, qd: &GenVec) -> Vec<BodyKinematics> {
    let mut bodies = Vec::with_capacity(9);
    let base = Vec2::new(q[Q_BASE_X], q[Q_BASE_Z]);

    let mut torso_jac = SMatrix::<f64, 2, N_Q>::zeros();
    torso_jac[(0, Q_BASE_X)] = 1.0;
    torso_jac[(1, Q_BASE_Z)] = 1.0;
    let mut torso_omega = SMatrix::<f64, 1, N_Q>::zeros();
    torso_omega[(0, Q_PITCH)] = 1.0;
    bodies.push(BodyKinematics {
        mass: model.config().torso.mass,
        inertia: model.config().torso.inertia,
        com: base,
        jac: torso_jac,
        drift: Vec2::zeros(),
        omega_row: torso_omega,
    });

    for leg in LegId::BOTH {
        for limb in LimbId::BOTH {
            let params = model.leg(leg).limb(limb);
            let pts = limb_points(model, q, leg, limb);
            let o = leg.q_offset() + 2 * (limb as usize);
            let pitch_rate = qd[Q_PITCH];
            let prox_rate = pitch_rate + qd[o];
            let dist_rate = prox_rate + qd[o + 1];
            let anchor_rel = pts.anchor - base;

            // Proximal link: COM at the midpoint between anchor and knee.
            let prox_half = 0.5 * (pts.knee - pts.anchor);
            let prox_com = pts.anchor + prox_half;
            let mut jac = SMatrix::<f64, 2, N_Q>::zeros();
            jac[(0, Q_BASE_X)] = 1.0;
            jac[(1, Q_BASE_Z)] = 1.0;
            jac.set_column(Q_PITCH, &perp(prox_com - base));
            jac.set_column(o, &perp(prox_half));
            let drift = -pitch_rate * pitch_rate * anchor_rel - prox_rate * prox_rate * prox_half;
            let mut omega_row = SMatrix::<f64, 1, N_Q>::zeros();
            omega_row[(0, Q_PITCH)] = 1.0;
            omega_row[(0, o)] = 1.0;
            bodies.push(BodyKinematics {
                mass: params.proximal.mass,
                inertia: params.proximal.inertia,
                com: prox_com,
                jac,
                drift,
                omega_row,
            });

            // Distal link: COM at the midpoint between knee and endpoint.
            let prox = pts.knee - pts.anchor;
            let dist_half = 0.5 * (pts.end - pts.knee);
            let dist_com = pts.knee + dist_half;
            let mut jac = SMatrix::<f64, 2, N_Q>::zeros();
            jac[(0, Q_BASE_X)] = 1.0;
            jac[(1, Q_BASE_Z)] = 1.0;
            jac.set_column(Q_PITCH, &perp(dist_com - base));
            jac.set_column(o, &perp(dist_com - pts.anchor));
            jac.set_column(o + 1, &perp(dist_half));
            let drift = -pitch_rate * pitch_rate * anchor_rel
                - prox_rate * prox_rate * prox
                - dist_rate * dist_rate * dist_half;
            let mut omega_row = SMatrix::<f64, 1, N_Q>::zeros();
            omega_row[(0, Q_PITCH)] = 1.0;
            omega_row[(0, o)] = 1.0;
            omega_row[(0, o + 1)] = 1.0;
            bodies.push(BodyKinematics {
                mass: params.distal.mass,
                inertia: params.distal.inertia,
                com: dist_com,
                jac,
                drift,
                omega_row,
            });
        }
    }
    bodies
}

/// Whole-robot center of mass and its velocity.
pub fn com_state(model: &RobotModel, q: &GenVec, qd: &GenVec) -> (Vec2, Vec2) {
    let bodies = body_kinematics(model, q, qd);
    let mut m_total = 0.0;
    let mut com = Vec2::zeros();
    let mut vel = Vec2::zeros();
    for b in &bodies {
        m_total += b.mass;
        com += b.mass * b.com;
        vel += b.mass * (b.jac * qd);
    }
    (com / m_total, vel / m_total)
}

/// Build a loop-consistent state from a base pose and world-frame foot
/// targets. Velocities are made consistent with the closure constraints.
pub fn state_from_base_and_feet(
    model: &RobotModel,
    base_pos: Vec2,
    base_pitch: f64,
    base_vel: Vec2,
    pitch_rate: f64,
    feet_world: [Vec2; 2],
    feet_vel_world: [Vec2; 2],
    contact: [ContactPhase; 2],
    t: f64,
) -> Result<GeneralizedState, KinematicsError> {
    let mut q = GenVec::zeros();
    q[Q_BASE_X] = base_pos.x;
    q[Q_BASE_Z] = base_pos.y;
    q[Q_PITCH] = base_pitch;
    for leg in LegId::BOTH {
        let foot_base = rot(-base_pitch) * (feet_world[leg as usize] - base_pos);
        let joints = leg_ik_full(model, leg, foot_base)?;
        let o = leg.q_offset();
        q[o] = joints.hip_rear;
        q[o + 1] = joints.knee_rear;
        q[o + 2] = joints.hip_fore;
        q[o + 3] = joints.knee_fore;
    }

    // Velocity: solve per-leg fore-limb rates from the foot velocity, then
    // rear-limb rates from the closure constraint.
    let mut qd = GenVec::zeros();
    qd[Q_BASE_X] = base_vel.x;
    qd[Q_BASE_Z] = base_vel.y;
    qd[Q_PITCH] = pitch_rate;
    for leg in LegId::BOTH {
        let o = leg.q_offset();
        for limb in LimbId::BOTH {
            let pts = limb_points(model, &q, leg, limb);
            let base = Vec2::new(q[Q_BASE_X], q[Q_BASE_Z]);
            // End velocity contributed by the base motion alone.
            let v_base = base_vel + pitch_rate * perp(pts.end - base);
            let v_rel = feet_vel_world[leg as usize] - v_base;
            // v_rel = hip_rate*perp(end-anchor) + knee_rate*perp(end-knee)
            let c1 = perp(pts.end - pts.anchor);
            let c2 = perp(pts.end - pts.knee);
            let det = cross2(c1, c2);
            if det.abs() < 1e-9 {
                return Err(KinematicsError::NoClosure);
            }
            let hip_rate = cross2(v_rel, c2) / det;
            let knee_rate = cross2(c1, v_rel) / det;
            let jo = o + 2 * (limb as usize);
            qd[jo] = hip_rate;
            qd[jo + 1] = knee_rate;
        }
    }
    Ok(GeneralizedState::new(q, qd, contact, t))
}
