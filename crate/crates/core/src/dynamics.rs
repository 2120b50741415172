//! Constrained rigid-body dynamics of the biped.
//!
//! The robot is modeled as a tree (floating base plus four open 2R limbs)
//! cut at the ankles; the five-bar loops enter only through the holonomic
//! constraint Jacobian. The equations of motion are
//!
//! ```text
//! [ M  -Jh^T ] [qdd]   [ Sa^T tau + Jc^T fc - H ]
//! [ Jh   0   ] [fh ] = [ -Jhdot qd              ]
//! ```
//!
//! Eliminating the constraint force with the dynamically consistent inverse
//! gives the null-space-projected form used by the controller, and the
//! actuated inverse dynamics recovers hip torques from an accepted
//! acceleration/contact-force pair.

use crate::model::{
    body_kinematics, loop_constraints, task_jacobians, ContactMat, ContactVec, GenMat,
    GenVec, LoopMat, LoopTerms, LoopVec, RobotModel, Vec2, ACTUATED_IDX, N_ACT, N_LOOP, N_Q,
};
use nalgebra::{Cholesky, SMatrix, SVector};
use thiserror::Error;

pub type ActVec = SVector<f64, N_ACT>;
pub type ActMat = SMatrix<f64, N_ACT, N_ACT>;
pub type BaseVec = SVector<f64, 3>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DynamicsError {
    #[error("loop-closure Jacobian is rank deficient (closure singularity)")]
    RankDeficient,
    #[error("actuation map is singular")]
    ActuationSingular,
}

/// Selection matrix of the actuated joints (4 x 11).
pub fn actuation_matrix() -> SMatrix<f64, N_ACT, N_Q> {
    let mut s = SMatrix::<f64, N_ACT, N_Q>::zeros();
    for (row, &col) in ACTUATED_IDX.iter().enumerate() {
        s[(row, col)] = 1.0;
    }
    s
}

/// Selection matrix of the floating-base coordinates (3 x 11).
pub fn floating_base_matrix() -> SMatrix<f64, 3, N_Q> {
    let mut s = SMatrix::<f64, 3, N_Q>::zeros();
    for row in 0..3 {
        s[(row, row)] = 1.0;
    }
    s
}

/// Generalized inertia matrix.
pub fn mass_matrix(model: &RobotModel, q: &GenVec) -> GenMat {
    let bodies = body_kinematics(model, q, &GenVec::zeros());
    let mut m = GenMat::zeros();
    for b in &bodies {
        m += b.mass * b.jac.transpose() * b.jac;
        m += b.inertia * b.omega_row.transpose() * b.omega_row;
    }
    // Symmetrize away rounding asymmetry from the accumulation order.
    0.5 * (m + m.transpose())
}

/// Coriolis, centrifugal and gravity bias vector.
pub fn bias_forces(model: &RobotModel, q: &GenVec, qd: &GenVec) -> GenVec {
    let bodies = body_kinematics(model, q, qd);
    let gravity = Vec2::new(0.0, -model.gravity());
    let mut h = GenVec::zeros();
    for b in &bodies {
        // Planar links have no gyroscopic torque; the angular Jacobian rows
        // are constant, so only the linear velocity-product term remains.
        h += b.mass * b.jac.transpose() * (b.drift - gravity);
    }
    h
}

/// Kinetic energy at `(q, qd)`.
pub fn kinetic_energy(model: &RobotModel, q: &GenVec, qd: &GenVec) -> f64 {
    0.5 * qd.dot(&(mass_matrix(model, q) * qd))
}

/// Gravitational potential energy, zero level at world z = 0.
pub fn potential_energy(model: &RobotModel, q: &GenVec) -> f64 {
    let bodies = body_kinematics(model, q, &GenVec::zeros());
    bodies.iter().map(|b| b.mass * model.gravity() * b.com.y).sum()
}

/// Everything the controller and simulator need about the dynamics at one
/// state: inertia, bias, loop and contact terms, and the loop-constraint
/// projection operators.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub mass: GenMat,
    pub bias: GenVec,
    pub loop_terms: LoopTerms,
    pub contact_jac: ContactMat,
    pub contact_drift: ContactVec,
    /// Apparent inertia of the loop constraints, `(Jh M^-1 Jh^T)^-1`.
    pub lambda: SMatrix<f64, N_LOOP, N_LOOP>,
    /// Dynamically consistent inverse `M^-1 Jh^T lambda`.
    pub jh_dyn_inverse: SMatrix<f64, N_Q, N_LOOP>,
    /// Null-space projector `I - jh_dyn_inverse * Jh`.
    pub null_projector: GenMat,
    mass_chol: Cholesky<f64, nalgebra::Const<N_Q>>,
}

impl DynamicsTerms {
    pub fn compute(model: &RobotModel, q: &GenVec, qd: &GenVec) -> Result<Self, DynamicsError> {
        let mass = mass_matrix(model, q);
        let bias = bias_forces(model, q, qd);
        let loop_terms = loop_constraints(model, q, qd);
        let tj = task_jacobians(model, q, qd);
        let mass_chol = Cholesky::new(mass).ok_or(DynamicsError::RankDeficient)?;
        let (lambda, jh_dyn_inverse, null_projector) =
            constraint_projection_from(&mass_chol, &loop_terms.jac)?;
        Ok(DynamicsTerms {
            mass,
            bias,
            loop_terms,
            contact_jac: tj.contact,
            contact_drift: tj.contact_drift,
            lambda,
            jh_dyn_inverse,
            null_projector,
            mass_chol,
        })
    }
}

fn constraint_projection_from(
    mass_chol: &Cholesky<f64, nalgebra::Const<N_Q>>,
    jh: &LoopMat,
) -> Result<
    (SMatrix<f64, N_LOOP, N_LOOP>, SMatrix<f64, N_Q, N_LOOP>, GenMat),
    DynamicsError,
> {
    // M^-1 Jh^T via the Cholesky factor.
    let minv_jht = mass_chol.solve(&jh.transpose());
    let lambda_inv = jh * minv_jht;
    let lambda_inv = 0.5 * (lambda_inv + lambda_inv.transpose());
    let chol = Cholesky::new(lambda_inv).ok_or(DynamicsError::RankDeficient)?;
    // Guard against near-singular closures that still factor.
    let diag = chol.l_dirty().diagonal();
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
    for d in diag.iter() {
        dmin = dmin.min(*d);
        dmax = dmax.max(*d);
    }
    if dmin <= 0.0 || (dmax / dmin).powi(2) > 1e12 {
        return Err(DynamicsError::RankDeficient);
    }
    let lambda = chol.inverse();
    let jh_dyn_inverse = minv_jht * lambda;
    let null_projector = GenMat::identity() - jh_dyn_inverse * jh;
    Ok((lambda, jh_dyn_inverse, null_projector))
}

/// Loop-constraint projection operators at a configuration.
pub fn constraint_projection(
    model: &RobotModel,
    q: &GenVec,
) -> Result<(SMatrix<f64, N_LOOP, N_LOOP>, SMatrix<f64, N_Q, N_LOOP>, GenMat), DynamicsError> {
    let mass = mass_matrix(model, q);
    let chol = Cholesky::new(mass).ok_or(DynamicsError::RankDeficient)?;
    let jh = loop_constraints(model, q, &GenVec::zeros()).jac;
    constraint_projection_from(&chol, &jh)
}

/// Residual of the floating-base dynamics rows for a candidate
/// acceleration/contact-force pair; zero when they are dynamically
/// consistent.
pub fn floating_base_residual(terms: &DynamicsTerms, qdd: &GenVec, f_c: &ContactVec) -> BaseVec {
    let sf = floating_base_matrix();
    let nt = terms.null_projector.transpose();
    sf * (terms.mass * qdd + nt * terms.bias) - sf * (nt * terms.contact_jac.transpose() * f_c)
}

/// Affine map from `(qdd, f_c)` to actuated torques: `tau = a*qdd + b*f_c + c`.
///
/// This is the actuated inverse dynamics written as an explicit linear
/// expression so the controller can impose torque limits on the decision
/// variables.
pub struct TorqueMap {
    pub qdd_gain: SMatrix<f64, N_ACT, N_Q>,
    pub fc_gain: SMatrix<f64, N_ACT, N_CONTACT_>,
    pub offset: ActVec,
}

use crate::model::N_CONTACT as N_CONTACT_;

pub fn torque_map(terms: &DynamicsTerms) -> Result<TorqueMap, DynamicsError> {
    let sa = actuation_matrix();
    let nt = terms.null_projector.transpose();
    let gram = sa * nt * sa.transpose();
    let lu = gram.lu();
    let inv = lu.try_inverse().ok_or(DynamicsError::ActuationSingular)?;
    // Condition check via the LU diagonal.
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0_f64;
    for d in lu.u().diagonal().iter() {
        dmin = dmin.min(d.abs());
        dmax = dmax.max(d.abs());
    }
    if dmin == 0.0 || dmax / dmin > 1e12 {
        return Err(DynamicsError::ActuationSingular);
    }
    let pre = inv * sa;
    let drift_force =
        terms.loop_terms.jac.transpose() * terms.lambda * terms.loop_terms.jdot_qd;
    Ok(TorqueMap {
        qdd_gain: pre * terms.mass,
        fc_gain: -(pre * nt * terms.contact_jac.transpose()),
        offset: pre * (nt * terms.bias + drift_force),
    })
}

/// Actuated joint torques realizing `(qdd, f_c)`.
pub fn inverse_dynamics_actuated(
    terms: &DynamicsTerms,
    qdd: &GenVec,
    f_c: &ContactVec,
) -> Result<ActVec, DynamicsError> {
    let map = torque_map(terms)?;
    Ok(map.qdd_gain * qdd + map.fc_gain * f_c + map.offset)
}

/// Constrained forward dynamics: accelerations and loop-constraint forces
/// under applied hip torques, contact forces, and an optional extra
/// generalized force (pushes).
pub fn forward_dynamics_constrained(
    terms: &DynamicsTerms,
    tau_a: &ActVec,
    f_c: &ContactVec,
    external: &GenVec,
) -> Result<(GenVec, LoopVec), DynamicsError> {
    forward_dynamics_with_loop_rhs(terms, tau_a, f_c, external, &(-terms.loop_terms.jdot_qd))
}

/// Same as [`forward_dynamics_constrained`] with an explicit right-hand side
/// for the constraint rows (used by the simulator to add Baumgarte
/// stabilization).
pub fn forward_dynamics_with_loop_rhs(
    terms: &DynamicsTerms,
    tau_a: &ActVec,
    f_c: &ContactVec,
    external: &GenVec,
    loop_rhs: &LoopVec,
) -> Result<(GenVec, LoopVec), DynamicsError> {
    let sa = actuation_matrix();
    let force =
        sa.transpose() * tau_a + terms.contact_jac.transpose() * f_c + external - terms.bias;
    // Schur-complement solve of the KKT system using the cached Cholesky.
    let minv_force = terms.mass_chol.solve(&force);
    // M qdd - Jh^T fh = force; Jh qdd = loop_rhs
    // => (Jh M^-1 Jh^T) fh = loop_rhs - Jh M^-1 force
    let rhs = loop_rhs - terms.loop_terms.jac * minv_force;
    let f_h = terms.lambda * rhs;
    let qdd = terms.mass_chol.solve(&(force + terms.loop_terms.jac.transpose() * f_h));
    Ok((qdd, f_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        dir_from_down, limb_points, perp, state_from_base_and_feet, ContactPhase, GeneralizedState,
        LegId, LimbId, Q_BASE_X, Q_BASE_Z, Q_PITCH,
    };
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> RobotModel {
        RobotModel::reference()
    }

    fn random_state(m: &RobotModel, rng: &mut impl Rng) -> GeneralizedState {
        loop {
            let base = Vec2::new(rng.gen_range(-0.2..0.2), rng.gen_range(0.32..0.44));
            let feet = [
                base + Vec2::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.42..-0.30)),
                base + Vec2::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.42..-0.30)),
            ];
            if let Ok(state) = state_from_base_and_feet(
                m,
                base,
                rng.gen_range(-0.2..0.2),
                Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                rng.gen_range(-1.0..1.0),
                feet,
                [
                    Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                    Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                ],
                [ContactPhase::Stance; 2],
                0.0,
            ) {
                return state;
            }
        }
    }

    #[test]
    fn mass_matrix_symmetric_and_positive_definite() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..1000 {
            let state = random_state(&m, &mut rng);
            let mm = mass_matrix(&m, &state.q);
            for i in 0..N_Q {
                for j in 0..N_Q {
                    assert!((mm[(i, j)] - mm[(j, i)]).abs() < 1e-12);
                }
            }
            let eig = mm.symmetric_eigenvalues();
            assert!(eig.min() > 0.0, "mass matrix not PD");
        }
    }

    #[test]
    fn mass_matrix_is_base_translation_invariant() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let state = random_state(&m, &mut rng);
        let m0 = mass_matrix(&m, &state.q);
        let mut q = state.q;
        q[Q_BASE_X] += 0.37;
        q[Q_BASE_Z] -= 0.21;
        let m1 = mass_matrix(&m, &q);
        assert!((m0 - m1).norm() < 1e-8);
    }

    /// Independent per-link energy: velocities propagated link-by-link
    /// through the chains rather than through the Jacobians.
    fn kinetic_energy_recursive(m: &RobotModel, state: &GeneralizedState) -> f64 {
        let q = &state.q;
        let qd = &state.qd;
        let base = Vec2::new(q[Q_BASE_X], q[Q_BASE_Z]);
        let v_base = Vec2::new(qd[Q_BASE_X], qd[Q_BASE_Z]);
        let w_base = qd[Q_PITCH];
        let torso = m.config().torso;
        let mut energy = 0.5 * torso.mass * v_base.norm_squared() + 0.5 * torso.inertia * w_base * w_base;
        for leg in LegId::BOTH {
            for limb in LimbId::BOTH {
                let p = m.leg(leg).limb(limb);
                let o = leg.q_offset() + 2 * (limb as usize);
                let pts = limb_points(m, q, leg, limb);
                let v_anchor = v_base + w_base * perp(pts.anchor - base);
                let w_prox = w_base + qd[o];
                let v_prox_com = v_anchor + w_prox * perp(0.5 * (pts.knee - pts.anchor));
                energy += 0.5 * p.proximal.mass * v_prox_com.norm_squared()
                    + 0.5 * p.proximal.inertia * w_prox * w_prox;
                let v_knee = v_anchor + w_prox * perp(pts.knee - pts.anchor);
                let w_dist = w_prox + qd[o + 1];
                let v_dist_com = v_knee + w_dist * perp(0.5 * (pts.end - pts.knee));
                energy += 0.5 * p.distal.mass * v_dist_com.norm_squared()
                    + 0.5 * p.distal.inertia * w_dist * w_dist;
            }
        }
        energy
    }

    #[test]
    fn kinetic_energy_matches_per_link_oracle() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let state = random_state(&m, &mut rng);
            let from_mass = kinetic_energy(&m, &state.q, &state.qd);
            let from_links = kinetic_energy_recursive(&m, &state);
            assert_relative_eq!(from_mass, from_links, max_relative = 1e-10);
        }
    }

    #[test]
    fn bias_at_rest_is_potential_gradient() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let state = random_state(&m, &mut rng);
        let h0 = bias_forces(&m, &state.q, &GenVec::zeros());
        let step = 1e-6;
        for j in 0..N_Q {
            let mut qp = state.q;
            let mut qm = state.q;
            qp[j] += step;
            qm[j] -= step;
            let fd = (potential_energy(&m, &qp) - potential_energy(&m, &qm)) / (2.0 * step);
            assert!(
                (h0[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "gravity term mismatch at {j}: {} vs {}",
                h0[j],
                fd
            );
        }
    }

    #[test]
    fn velocity_bias_is_quadratic_in_rates() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let state = random_state(&m, &mut rng);
        let h0 = bias_forces(&m, &state.q, &GenVec::zeros());
        let h1 = bias_forces(&m, &state.q, &state.qd) - h0;
        let h2 = bias_forces(&m, &state.q, &(2.0 * state.qd)) - h0;
        assert!((h2 - 4.0 * h1).norm() < 1e-9 * (1.0 + h1.norm()));
    }

    #[test]
    fn projector_identities() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..20 {
            let state = random_state(&m, &mut rng);
            let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
            let n = &terms.null_projector;
            assert!((n * n - n).norm() < 1e-10, "projector not idempotent");
            assert!((terms.loop_terms.jac * n).norm() < 1e-10, "Jh N != 0");
            let lam = terms.lambda;
            assert!((lam - lam.transpose()).norm() < 1e-10);
            assert!(lam.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn forward_dynamics_matches_dense_kkt_solve() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..20 {
            let state = random_state(&m, &mut rng);
            let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
            let tau = ActVec::from_fn(|_, _| rng.gen_range(-10.0..10.0));
            let f_c = ContactVec::from_fn(|_, _| rng.gen_range(-50.0..50.0));
            let (qdd, f_h) =
                forward_dynamics_constrained(&terms, &tau, &f_c, &GenVec::zeros()).unwrap();

            // Dense 15x15 KKT oracle.
            let mut kkt = DMatrix::<f64>::zeros(N_Q + N_LOOP, N_Q + N_LOOP);
            for i in 0..N_Q {
                for j in 0..N_Q {
                    kkt[(i, j)] = terms.mass[(i, j)];
                }
            }
            for i in 0..N_LOOP {
                for j in 0..N_Q {
                    kkt[(N_Q + i, j)] = terms.loop_terms.jac[(i, j)];
                    kkt[(j, N_Q + i)] = -terms.loop_terms.jac[(i, j)];
                }
            }
            let force = actuation_matrix().transpose() * tau
                + terms.contact_jac.transpose() * f_c
                - terms.bias;
            let mut rhs = DMatrix::<f64>::zeros(N_Q + N_LOOP, 1);
            for i in 0..N_Q {
                rhs[(i, 0)] = force[i];
            }
            for i in 0..N_LOOP {
                rhs[(N_Q + i, 0)] = -terms.loop_terms.jdot_qd[i];
            }
            let sol = kkt.lu().solve(&rhs).unwrap();
            for i in 0..N_Q {
                assert_relative_eq!(qdd[i], sol[(i, 0)], max_relative = 1e-10, epsilon = 1e-10);
            }
            for i in 0..N_LOOP {
                assert_relative_eq!(
                    f_h[i],
                    sol[(N_Q + i, 0)],
                    max_relative = 1e-10,
                    epsilon = 1e-10
                );
            }

            // Second block row of the constrained equations.
            let viol = terms.loop_terms.jac * qdd + terms.loop_terms.jdot_qd;
            assert!(viol.norm() < 1e-9, "constraint acceleration violated: {}", viol.norm());
        }
    }

    #[test]
    fn inverse_dynamics_round_trip() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..50 {
            let state = random_state(&m, &mut rng);
            let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
            let tau = ActVec::from_fn(|_, _| rng.gen_range(-20.0..20.0));
            let f_c = ContactVec::from_fn(|_, _| rng.gen_range(-80.0..80.0));
            let (qdd, _) =
                forward_dynamics_constrained(&terms, &tau, &f_c, &GenVec::zeros()).unwrap();
            let tau_back = inverse_dynamics_actuated(&terms, &qdd, &f_c).unwrap();
            assert!(
                (tau_back - tau).norm() < 1e-8 * (1.0 + tau.norm()),
                "round trip failed: {tau:?} vs {tau_back:?}"
            );
        }
    }

    #[test]
    fn projected_equation_identity() {
        // Substituting the forward-dynamics acceleration into the
        // null-space-projected equation of motion must balance the
        // projected contact force.
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let state = random_state(&m, &mut rng);
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let tau = ActVec::from_fn(|_, _| rng.gen_range(-10.0..10.0));
        let f_c = ContactVec::from_fn(|_, _| rng.gen_range(-50.0..50.0));
        let (qdd, _) = forward_dynamics_constrained(&terms, &tau, &f_c, &GenVec::zeros()).unwrap();
        let nt = terms.null_projector.transpose();
        let lhs = terms.mass * qdd
            + nt * terms.bias
            + terms.loop_terms.jac.transpose() * terms.lambda * terms.loop_terms.jdot_qd
            - nt * actuation_matrix().transpose() * tau;
        let rhs = nt * terms.contact_jac.transpose() * f_c;
        assert!((lhs - rhs).norm() < 1e-8, "projected identity residual {}", (lhs - rhs).norm());
    }

    /// Minimum-norm contact forces balancing gravity in double stance.
    pub fn static_balance_forces(terms: &DynamicsTerms) -> ContactVec {
        let sf = floating_base_matrix();
        let nt = terms.null_projector.transpose();
        let a = sf * nt * terms.contact_jac.transpose();
        let b = sf * (nt * terms.bias);
        // Least-norm solution of a * f = b.
        let gram = a * a.transpose();
        let lam = gram.lu().solve(&b).expect("static balance solvable");
        a.transpose() * lam
    }

    #[test]
    fn static_double_stance_balances() {
        let m = model();
        let state = state_from_base_and_feet(
            &m,
            Vec2::new(0.0, 0.40),
            0.0,
            Vec2::zeros(),
            0.0,
            [Vec2::new(-0.06, 0.0), Vec2::new(0.06, 0.0)],
            [Vec2::zeros(), Vec2::zeros()],
            [ContactPhase::Stance; 2],
            0.0,
        )
        .unwrap();
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let f_c = static_balance_forces(&terms);
        let residual = floating_base_residual(&terms, &GenVec::zeros(), &f_c);
        assert!(residual.norm() < 1e-8, "static residual {}", residual.norm());
        // Total vertical force carries the whole robot weight.
        let total_fz = f_c[1] + f_c[3];
        assert_relative_eq!(total_fz, 23.0 * m.gravity(), epsilon = 1e-6);
        // Static torques are within the actuator limits.
        let tau = inverse_dynamics_actuated(&terms, &GenVec::zeros(), &f_c).unwrap();
        for t in tau.iter() {
            assert!(t.abs() < m.actuator().tau_max, "static torque {t} exceeds limit");
        }
    }

    #[test]
    fn free_fall_acceleration() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut state = random_state(&m, &mut rng);
        state.qd = GenVec::zeros();
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let (qdd, _) = forward_dynamics_constrained(
            &terms,
            &ActVec::zeros(),
            &ContactVec::zeros(),
            &GenVec::zeros(),
        )
        .unwrap();
        // Free fall from rest: every link accelerates straight down, so the
        // generalized acceleration is pure base acceleration.
        let residual = floating_base_residual(&terms, &qdd, &ContactVec::zeros());
        assert!(residual.norm() < 1e-8);
        assert_relative_eq!(qdd[Q_BASE_Z], -m.gravity(), epsilon = 1e-9);
        assert!(qdd[Q_BASE_X].abs() < 1e-9);
        for j in 3..N_Q {
            assert!(qdd[j].abs() < 1e-8, "joint {j} accelerates in free fall: {}", qdd[j]);
        }
    }

    #[test]
    fn zero_gravity_rest_needs_no_torque() {
        let mut config = model().config().clone();
        config.gravity = 1e-12; // validation requires positive gravity
        let m = RobotModel::from_config(config).unwrap();
        let state = state_from_base_and_feet(
            &m,
            Vec2::new(0.0, 0.40),
            0.0,
            Vec2::zeros(),
            0.0,
            [Vec2::new(-0.06, 0.0), Vec2::new(0.06, 0.0)],
            [Vec2::zeros(), Vec2::zeros()],
            [ContactPhase::Stance; 2],
            0.0,
        )
        .unwrap();
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let tau =
            inverse_dynamics_actuated(&terms, &GenVec::zeros(), &ContactVec::zeros()).unwrap();
        assert!(tau.norm() < 1e-9, "torque at zero-gravity rest: {tau:?}");
    }

    #[test]
    fn internal_forces_do_not_change_accelerations() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let state = random_state(&m, &mut rng);
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let tau = ActVec::from_fn(|_, _| rng.gen_range(-10.0..10.0));
        let f_c = ContactVec::from_fn(|_, _| rng.gen_range(-50.0..50.0));
        let (qdd0, fh0) =
            forward_dynamics_constrained(&terms, &tau, &f_c, &GenVec::zeros()).unwrap();
        // Inject a pure constraint-space force.
        let w = LoopVec::from_fn(|_, _| rng.gen_range(-30.0..30.0));
        let internal = terms.loop_terms.jac.transpose() * w;
        let (qdd1, fh1) = forward_dynamics_constrained(&terms, &tau, &f_c, &internal).unwrap();
        assert!((qdd1 - qdd0).norm() < 1e-8);
        assert!((fh1 - (fh0 - w)).norm() < 1e-8);
        // And the floating-base residual formula is blind to it because the
        // projector annihilates constraint-space forces.
        let nt = terms.null_projector.transpose();
        assert!((nt * terms.loop_terms.jac.transpose()).norm() < 1e-10);
    }

    #[test]
    fn mass_translation_invariance_by_finite_difference() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let state = random_state(&m, &mut rng);
        let h = 1e-6;
        for j in [Q_BASE_X, Q_BASE_Z] {
            let mut qp = state.q;
            let mut qm = state.q;
            qp[j] += h;
            qm[j] -= h;
            let diff = (mass_matrix(&m, &qp) - mass_matrix(&m, &qm)).norm() / (2.0 * h);
            assert!(diff < 1e-8, "dM/dq{j} = {diff}");
        }
    }

    #[test]
    fn limb_geometry_helpers_are_consistent() {
        // dir_from_down and the limb chain agree on a hand-computed pose.
        let v = dir_from_down(0.0);
        assert_relative_eq!(v.x, 0.0);
        assert_relative_eq!(v.y, -1.0);
        let v = dir_from_down(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(v.x, 1.0);
        assert_relative_eq!(v.y, 0.0, epsilon = 1e-15);
    }
}
