//! Motion/force transmissibility indices of a planar five-bar leg.
//!
//! Each limb of the five-bar transmits force to the foot exclusively along
//! its distal link (a two-force member between two passive joints). The
//! transmissibility of a configuration is measured by reciprocal products of
//! that transmission wrench with the permitted input twist (rotation about
//! the limb's hip) and the permitted output twist (foot motion with the
//! other limb's actuator locked, i.e. rotation about the other knee).
//!
//! The local transmission index (LTI) is the worst normalized reciprocal
//! product over limbs; it is 1 in ideal configurations and 0 at input or
//! output singularities. The acceleration-capacity index (RACI) is the
//! worst-case normalized hip torque needed to realize a foot acceleration of
//! a given magnitude in the most demanding direction.

use crate::model::{
    cross2, limb_points_base_frame, perp, LegId, LegJoints, LimbId, RobotModel, Vec2,
};
use nalgebra::{Matrix2, Matrix4, SVector, Vector4};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MftError {
    #[error("zero-length vector has no direction")]
    ZeroVector,
    #[error("limb transmission is undefined (degenerate distal link)")]
    SingularLimb,
    #[error("reciprocal product requires one twist and one wrench")]
    ScrewKindMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScrewKind {
    Twist,
    Wrench,
}

/// Planar screw: a twist `(omega, v)` with `v` the velocity of the
/// body-fixed point at the origin, or a wrench `(moment, f)` with the moment
/// taken about the origin.
#[derive(Clone, Copy, Debug)]
pub struct PlanarScrew {
    pub angular: f64,
    pub linear: Vec2,
    pub kind: ScrewKind,
}

impl PlanarScrew {
    /// Unit-rate rotation twist about the point `center`.
    pub fn rotation_about(center: Vec2) -> Self {
        PlanarScrew { angular: 1.0, linear: -perp(center), kind: ScrewKind::Twist }
    }

    /// Pure force `f` acting along a line through `point`.
    pub fn force_through(point: Vec2, f: Vec2) -> Self {
        PlanarScrew { angular: cross2(point, f), linear: f, kind: ScrewKind::Wrench }
    }
}

/// Reciprocal product of a twist and a wrench: the instantaneous power the
/// wrench develops against the twist.
pub fn reciprocal_product(a: &PlanarScrew, b: &PlanarScrew) -> Result<f64, MftError> {
    let (twist, wrench) = match (a.kind, b.kind) {
        (ScrewKind::Twist, ScrewKind::Wrench) => (a, b),
        (ScrewKind::Wrench, ScrewKind::Twist) => (b, a),
        _ => return Err(MftError::ScrewKindMismatch),
    };
    Ok(wrench.linear.dot(&twist.linear) + wrench.angular * twist.angular)
}

/// Power efficiency of a force/velocity pair: the ratio of the instantaneous
/// power to its maximum over relative orientation.
pub fn power_efficiency(f: Vec2, v: Vec2) -> Result<f64, MftError> {
    let (nf, nv) = (f.norm(), v.norm());
    if nf == 0.0 || nv == 0.0 {
        return Err(MftError::ZeroVector);
    }
    Ok((f.dot(&v) / (nf * nv)).abs())
}

/// Transmission screws and instantaneous powers of one limb.
#[derive(Clone, Debug)]
pub struct LimbTransmission {
    pub wrench: PlanarScrew,
    pub input_twist: PlanarScrew,
    pub output_twist: PlanarScrew,
    pub power_in: f64,
    pub power_in_max: f64,
    pub power_out: f64,
    pub power_out_max: f64,
}

/// Transmission analysis of one limb at a closure-consistent leg
/// configuration (base frame).
pub fn limb_transmission(
    model: &RobotModel,
    leg: LegId,
    joints: &LegJoints,
    limb: LimbId,
) -> Result<LimbTransmission, MftError> {
    let (pts, pts_other) = limb_pair(model, leg, joints, limb);

    let distal = pts.end - pts.knee;
    let distal_len = distal.norm();
    if distal_len < 1e-12 {
        return Err(MftError::SingularLimb);
    }
    let wrench = PlanarScrew::force_through(pts.knee, distal / distal_len);
    let input_twist = PlanarScrew::rotation_about(pts.anchor);
    let output_twist = PlanarScrew::rotation_about(pts_other.knee);

    let power_in = reciprocal_product(&wrench, &input_twist)?.abs();
    let power_out = reciprocal_product(&wrench, &output_twist)?.abs();
    // The input maximum is attained when the force line is perpendicular to
    // the hip-to-knee lever; the output maximum when the foot velocity
    // (perpendicular to the other distal link) aligns with the force.
    let power_in_max = (pts.knee - pts.anchor).norm();
    let power_out_max = (pts.end - pts_other.knee).norm();
    if power_in_max < 1e-12 || power_out_max < 1e-12 {
        return Err(MftError::SingularLimb);
    }
    Ok(LimbTransmission {
        wrench,
        input_twist,
        output_twist,
        power_in,
        power_in_max,
        power_out,
        power_out_max,
    })
}

fn limb_pair(
    model: &RobotModel,
    leg: LegId,
    joints: &LegJoints,
    limb: LimbId,
) -> (crate::model::LimbPoints, crate::model::LimbPoints) {
    let rear = limb_points_base_frame(model, leg, LimbId::Rear, joints.hip_rear, joints.knee_rear);
    let fore = limb_points_base_frame(model, leg, LimbId::Fore, joints.hip_fore, joints.knee_fore);
    match limb {
        LimbId::Rear => (rear, fore),
        LimbId::Fore => (fore, rear),
    }
}

/// Transmissibility indices at one configuration.
#[derive(Clone, Copy, Debug)]
pub struct MftIndices {
    /// Input transmission index in [0, 1].
    pub gamma_input: f64,
    /// Output transmission index in [0, 1].
    pub gamma_output: f64,
    /// Local transmission index, `min(gamma_input, gamma_output)`.
    pub gamma_lti: f64,
    /// Acceleration-capacity index [N/sqrt(kg)]; infinite at singularities.
    pub gamma_raci: f64,
    /// Set when the configuration is at (or numerically at) a closure
    /// singularity.
    pub singular: bool,
}

/// Local transmission index of a leg configuration.
pub fn lti(model: &RobotModel, leg: LegId, joints: &LegJoints) -> (f64, f64, f64, bool) {
    let mut gamma_input = f64::INFINITY;
    let mut gamma_output = f64::INFINITY;
    for limb in LimbId::BOTH {
        match limb_transmission(model, leg, joints, limb) {
            Ok(t) => {
                gamma_input = gamma_input.min((t.power_in / t.power_in_max).clamp(0.0, 1.0));
                gamma_output = gamma_output.min((t.power_out / t.power_out_max).clamp(0.0, 1.0));
            }
            Err(_) => return (0.0, 0.0, 0.0, true),
        }
    }
    let gamma_lti = gamma_input.min(gamma_output);
    (gamma_input, gamma_output, gamma_lti, gamma_lti == 0.0)
}

/// Hip torques realizing a foot acceleration `accel` (base frame) with the
/// base fixed, zero joint velocity and gravity off. The route used by the
/// brute-force direction search.
pub fn raci_torques_for_accel(
    model: &RobotModel,
    leg: LegId,
    joints: &LegJoints,
    accel: Vec2,
) -> Result<Vec2, MftError> {
    let (t, _) = leg_torque_operator(model, leg, joints)?;
    Ok(t * accel)
}

/// Worst-case normalized hip torque for a foot acceleration of magnitude
/// `accel_mag` in any direction.
///
/// The torque is linear in the acceleration direction, so the worst case for
/// each hip is the Euclidean norm of its row of the direction-to-torque map;
/// the normalization divides by the square root of the leg mass.
pub fn raci(model: &RobotModel, leg: LegId, joints: &LegJoints, accel_mag: f64) -> f64 {
    let leg_mass = model.leg(leg).mass();
    match leg_torque_operator(model, leg, joints) {
        Ok((t, _)) => {
            let worst_rear = t.row(0).norm();
            let worst_fore = t.row(1).norm();
            accel_mag * worst_rear.max(worst_fore) / leg_mass.sqrt()
        }
        Err(_) => f64::INFINITY,
    }
}

/// All transmissibility indices at one configuration.
pub fn indices(
    model: &RobotModel,
    leg: LegId,
    joints: &LegJoints,
    raci_accel_mag: f64,
) -> MftIndices {
    let (gamma_input, gamma_output, gamma_lti, singular) = lti(model, leg, joints);
    let gamma_raci = raci(model, leg, joints, raci_accel_mag);
    MftIndices { gamma_input, gamma_output, gamma_lti, gamma_raci, singular }
}

/// Direction-to-torque operator of the leg: `tau = T * pdd` for the foot
/// acceleration `pdd` with the base fixed, zero rates and no gravity. Also
/// returns the leg-only joint-space inertia for diagnostics.
fn leg_torque_operator(
    model: &RobotModel,
    leg: LegId,
    joints: &LegJoints,
) -> Result<(Matrix2<f64>, Matrix4<f64>), MftError> {
    let rear = limb_points_base_frame(model, leg, LimbId::Rear, joints.hip_rear, joints.knee_rear);
    let fore = limb_points_base_frame(model, leg, LimbId::Fore, joints.hip_fore, joints.knee_fore);
    let params = model.leg(leg);

    // Leg-only mass matrix over [hip_r, knee_r, hip_f, knee_f].
    let mut mass = Matrix4::<f64>::zeros();
    for (limb, pts, col) in [(LimbId::Rear, &rear, 0usize), (LimbId::Fore, &fore, 2usize)] {
        let p = params.limb(limb);
        // Proximal link.
        let prox_half = 0.5 * (pts.knee - pts.anchor);
        let mut jac = nalgebra::SMatrix::<f64, 2, 4>::zeros();
        jac.set_column(col, &perp(prox_half));
        mass += p.proximal.mass * jac.transpose() * jac;
        mass[(col, col)] += p.proximal.inertia;
        // Distal link.
        let dist_half = 0.5 * (pts.end - pts.knee);
        let dist_com = pts.knee + dist_half;
        let mut jac = nalgebra::SMatrix::<f64, 2, 4>::zeros();
        jac.set_column(col, &perp(dist_com - pts.anchor));
        jac.set_column(col + 1, &perp(dist_half));
        mass += p.distal.mass * jac.transpose() * jac;
        mass[(col, col)] += p.distal.inertia;
        mass[(col, col + 1)] += p.distal.inertia;
        mass[(col + 1, col)] += p.distal.inertia;
        mass[(col + 1, col + 1)] += p.distal.inertia;
    }

    // Closure Jacobian (fore endpoint minus rear endpoint) and the fore-foot
    // Jacobian, both over the four leg coordinates.
    let mut j_closure = nalgebra::SMatrix::<f64, 2, 4>::zeros();
    j_closure.set_column(0, &(-perp(rear.end - rear.anchor)));
    j_closure.set_column(1, &(-perp(rear.end - rear.knee)));
    j_closure.set_column(2, &perp(fore.end - fore.anchor));
    j_closure.set_column(3, &perp(fore.end - fore.knee));
    let mut j_foot = nalgebra::SMatrix::<f64, 2, 4>::zeros();
    j_foot.set_column(2, &perp(fore.end - fore.anchor));
    j_foot.set_column(3, &perp(fore.end - fore.knee));

    // Joint accelerations for a unit foot acceleration in each axis, subject
    // to the closure staying satisfied (rates are zero, so no drift terms).
    let mut stacked = Matrix4::<f64>::zeros();
    stacked.fixed_view_mut::<2, 4>(0, 0).copy_from(&j_closure);
    stacked.fixed_view_mut::<2, 4>(2, 0).copy_from(&j_foot);
    let stacked_lu = stacked.lu();
    if !lu_well_conditioned(&stacked_lu) {
        return Err(MftError::SingularLimb);
    }
    // Torque/constraint-force split: mass*qdd = Sa^T tau + Jcl^T lambda.
    let mut effort = Matrix4::<f64>::zeros();
    effort[(0, 0)] = 1.0; // hip_r
    effort[(2, 1)] = 1.0; // hip_f
    effort.fixed_view_mut::<4, 2>(0, 2).copy_from(&j_closure.transpose());
    let effort_lu = effort.lu();
    if !lu_well_conditioned(&effort_lu) {
        return Err(MftError::SingularLimb);
    }

    let mut torque_map = Matrix2::<f64>::zeros();
    for axis in 0..2 {
        let mut rhs = Vector4::zeros();
        rhs[2 + axis] = 1.0;
        let qdd = stacked_lu.solve(&rhs).ok_or(MftError::SingularLimb)?;
        let efforts = effort_lu.solve(&(mass * qdd)).ok_or(MftError::SingularLimb)?;
        torque_map[(0, axis)] = efforts[0];
        torque_map[(1, axis)] = efforts[1];
    }
    Ok((torque_map, mass))
}

fn lu_well_conditioned(lu: &nalgebra::LU<f64, nalgebra::Const<4>, nalgebra::Const<4>>) -> bool {
    let diag = lu.u().diagonal();
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0_f64;
    for d in diag.iter() {
        dmin = dmin.min(d.abs());
        dmax = dmax.max(d.abs());
    }
    dmin > 0.0 && dmax / dmin < 1e12
}

/// Close the loop for the given hips on the model's working branch and
/// return the full joint set.
pub fn joints_from_hips(
    model: &RobotModel,
    leg: LegId,
    hips: [f64; 2],
) -> Result<LegJoints, crate::model::KinematicsError> {
    let knees = crate::model::solve_passive_joints(model, leg, hips, model.working_branch())?;
    Ok(LegJoints { hip_rear: hips[0], knee_rear: knees[0], hip_fore: hips[1], knee_fore: knees[1] })
}

pub type ActPair = SVector<f64, 2>;
