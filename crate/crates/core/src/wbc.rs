//! Online whole-body controllers.
//!
//! Each control tick assembles a strictly convex QP over the decision vector
//! `[qdd (11); f_c (4); eps (12)]`: weighted task-acceleration tracking plus
//! contact-force regularization, subject to the floating-base dynamics
//! rows, friction pyramids, torque and acceleration limits, and either the
//! preferable-space polyhedron at the acceleration level (soft, relaxed by
//! `eps`) or the passive-joint range rows of the singularity-avoidance
//! baseline. The optimum is mapped to hip torques by the actuated inverse
//! dynamics.

use crate::dynamics::{
    actuation_matrix, floating_base_matrix, torque_map, ActVec, DynamicsError, DynamicsTerms,
};
use crate::model::{
    forward_kinematics, ContactPhase, ContactVec, GenVec, GeneralizedState, RobotModel, Vec2,
    ACTUATED_IDX, N_ACT, N_CONTACT, N_Q, PASSIVE_IDX,
};
use crate::qp::{self, QpProblem, QpSolution, QpStatus, WarmStart};
use crate::wsmap::{Polyhedron, PreferableSpace, SpaceTag};
use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decision-vector layout.
pub const N_EPS: usize = 12;

/// Tiny quadratic penalty on the generalized accelerations. The task rows
/// span only six of the eleven acceleration directions; this pins the rest
/// numerically without biasing the tracking (five orders below the task
/// weights).
pub const QDD_REGULARIZATION: f64 = 1e-5;
pub const N_DECISION: usize = N_Q + N_CONTACT + N_EPS;
pub const IDX_FC: usize = N_Q;
pub const IDX_EPS: usize = N_Q + N_CONTACT;

#[derive(Debug, Error)]
pub enum WbcError {
    #[error("task references a foot whose phase contradicts the contact set")]
    InconsistentPhase,
    #[error("dynamics failure: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("preferable-space polyhedron must be in the actuated joint space")]
    WrongPolyhedronSpace,
}

/// PD gains of one task.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskGains {
    /// [1/s^2]
    pub kp: f64,
    /// [1/s]
    pub kd: f64,
}

/// Reference trajectory sample of a scalar task.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskTarget {
    pub pos: f64,
    pub vel: f64,
    pub acc: f64,
}

/// Reference trajectory sample of a planar point task.
#[derive(Clone, Copy, Debug, Default)]
pub struct PointTarget {
    pub pos: Vec2,
    pub vel: Vec2,
    pub acc: Vec2,
}

/// Per-tick task references produced by the planner (world frame).
#[derive(Clone, Copy, Debug)]
pub struct TaskReferences {
    pub base_height: TaskTarget,
    pub base_pitch: TaskTarget,
    pub feet: [PointTarget; 2],
    /// Sagittal base target, used only while standing: a double-stance
    /// point-foot robot has an unstable sagittal mode that nothing else
    /// feeds back on. Walking leaves the sagittal motion passive.
    pub base_x: Option<TaskTarget>,
}

/// Desired task acceleration of the operational-space PD law.
pub fn desired_task_accel(target: &TaskTarget, est_pos: f64, est_vel: f64, gains: &TaskGains) -> f64 {
    target.acc + gains.kp * (target.pos - est_pos) + gains.kd * (target.vel - est_vel)
}

pub fn desired_point_accel(
    target: &PointTarget,
    est_pos: Vec2,
    est_vel: Vec2,
    gains: &TaskGains,
) -> Vec2 {
    target.acc + gains.kp * (target.pos - est_pos) + gains.kd * (target.vel - est_vel)
}

/// Task weights; the defaults are the weights the controller is tuned for.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WbcWeights {
    pub base_height: f64,
    pub base_pitch: f64,
    pub swing_foot: f64,
    pub support_foot: f64,
    pub contact_force: f64,
    pub contact_force_change: f64,
    pub relax: f64,
}

impl Default for WbcWeights {
    fn default() -> Self {
        WbcWeights {
            base_height: 1.0,
            base_pitch: 1.0,
            swing_foot: 1.0,
            support_foot: 1e2,
            contact_force: 1e-3,
            contact_force_change: 5e-2,
            relax: 1e3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WbcConfig {
    pub weights: WbcWeights,
    pub friction: f64,
    /// Prediction interval of the acceleration-level constraint [s].
    pub predict_dt: f64,
    pub base_gains: TaskGains,
    pub pitch_gains: TaskGains,
    pub swing_gains: TaskGains,
    pub support_gains: TaskGains,
    /// Gains of the standing sagittal task; kp must exceed g/z for the
    /// double-stance sagittal mode to be stable.
    pub stand_x_gains: TaskGains,
    /// Acceleration bounds [rad/s^2 or m/s^2].
    pub qdd_limit_base: f64,
    pub qdd_limit_joint: f64,
}

impl Default for WbcConfig {
    fn default() -> Self {
        WbcConfig {
            weights: WbcWeights::default(),
            friction: 0.6,
            predict_dt: 0.05,
            base_gains: TaskGains { kp: 100.0, kd: 20.0 },
            pitch_gains: TaskGains { kp: 100.0, kd: 20.0 },
            swing_gains: TaskGains { kp: 400.0, kd: 40.0 },
            support_gains: TaskGains { kp: 400.0, kd: 40.0 },
            stand_x_gains: TaskGains { kp: 60.0, kd: 16.0 },
            qdd_limit_base: 50.0,
            qdd_limit_joint: 500.0,
        }
    }
}

/// Acceleration-level linearization of a position-space polyhedron.
#[derive(Clone, Debug)]
pub struct MftConstraint {
    /// Rows over the generalized acceleration.
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub dt: f64,
}

/// Convert the joint-space polyhedron `A q_a <= b` into acceleration rows by
/// a second-order prediction over `dt`: the actuated selection has no
/// velocity-product term, so
/// `C = dt^2/2 * A * S_a` and `d_i = b_i - sum_k A_ik (q_a_k + q_a_dot_k dt)`.
pub fn build_mft_constraint(
    polyhedron: &Polyhedron,
    hips: &SVector<f64, N_ACT>,
    hip_rates: &SVector<f64, N_ACT>,
    dt: f64,
) -> Result<MftConstraint, WbcError> {
    if polyhedron.space != SpaceTag::ActuatedJoint {
        return Err(WbcError::WrongPolyhedronSpace);
    }
    assert!(dt > 0.0);
    let n_h = polyhedron.n_faces();
    let mut c = DMatrix::<f64>::zeros(n_h, N_Q);
    let mut d = DVector::<f64>::zeros(n_h);
    for i in 0..n_h {
        let mut di = polyhedron.b[i];
        for (k, &col) in ACTUATED_IDX.iter().enumerate() {
            let aik = polyhedron.a[(i, k)];
            c[(i, col)] = 0.5 * dt * dt * aik;
            di -= aik * (hips[k] + hip_rates[k] * dt);
        }
        d[i] = di;
    }
    Ok(MftConstraint { c, d, dt })
}

/// General Cartesian form of the same conversion for a polyhedron over task
/// coordinates `p` with Jacobian `J` and velocity-product term `jdot_qd`.
pub fn build_cartesian_constraint(
    polyhedron: &Polyhedron,
    p_hat: &DVector<f64>,
    jac: &DMatrix<f64>,
    qd_hat: &GenVec,
    jdot_qd: &DVector<f64>,
    dt: f64,
) -> MftConstraint {
    assert!(dt > 0.0);
    let n_h = polyhedron.n_faces();
    let m = polyhedron.dimension();
    let mut c = DMatrix::<f64>::zeros(n_h, N_Q);
    let mut d = DVector::<f64>::zeros(n_h);
    let p_dot = jac * DVector::from_iterator(N_Q, qd_hat.iter().copied());
    for i in 0..n_h {
        let mut di = polyhedron.b[i];
        for k in 0..m {
            let aik = polyhedron.a[(i, k)];
            for j in 0..N_Q {
                c[(i, j)] += 0.5 * dt * dt * aik * jac[(k, j)];
            }
            di -= aik * (p_hat[k] + p_dot[k] * dt + 0.5 * jdot_qd[k] * dt * dt);
        }
        d[i] = di;
    }
    MftConstraint { c, d, dt }
}

/// Passive-joint range rows of the singularity-avoidance baseline:
/// `ua_min <= S_ua (q + qd dt + qdd dt^2/2) <= ua_max` expressed over `qdd`.
pub struct SaConstraint {
    pub rows: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

pub fn sa_constraint(
    q: &GenVec,
    qd: &GenVec,
    dt: f64,
    ua_min: &[f64; N_ACT],
    ua_max: &[f64; N_ACT],
) -> SaConstraint {
    let mut rows = DMatrix::<f64>::zeros(N_ACT, N_Q);
    let mut lower = DVector::<f64>::zeros(N_ACT);
    let mut upper = DVector::<f64>::zeros(N_ACT);
    for (k, &idx) in PASSIVE_IDX.iter().enumerate() {
        rows[(k, idx)] = 0.5 * dt * dt;
        let predicted = q[idx] + qd[idx] * dt;
        lower[k] = ua_min[k] - predicted;
        upper[k] = ua_max[k] - predicted;
    }
    SaConstraint { rows, lower, upper }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    Mft,
    Sa,
}

/// Everything variable the QP assembly needs besides the robot state.
pub struct AssemblyInputs<'a> {
    pub terms: &'a DynamicsTerms,
    pub task_jac: &'a crate::model::TaskJacobians,
    pub refs: &'a TaskReferences,
    pub f_prev: &'a ContactVec,
    pub mft_rows: Option<&'a MftConstraint>,
    pub sa_rows: Option<&'a SaConstraint>,
}

/// Assemble the per-tick QP.
pub fn assemble_problem(
    model: &RobotModel,
    state: &GeneralizedState,
    config: &WbcConfig,
    inputs: &AssemblyInputs<'_>,
) -> Result<QpProblem, WbcError> {
    let terms = inputs.terms;
    let tj = inputs.task_jac;
    let n = N_DECISION;

    let mut hessian = DMatrix::<f64>::zeros(n, n);
    let mut gradient = DVector::<f64>::zeros(n);
    let mut add_task_row = |row: &[f64], target: f64, weight: f64| {
        for (j, &aj) in row.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            gradient[j] -= 2.0 * weight * target * aj;
            for (k, &ak) in row.iter().enumerate() {
                if ak != 0.0 {
                    hessian[(j, k)] += 2.0 * weight * aj * ak;
                }
            }
        }
    };

    // Task rows: J qdd = (xdd_des - Jdot qd).
    let fk = forward_kinematics(model, &state.q);
    let w = &config.weights;
    {
        let mut row = vec![0.0; n];
        row[crate::model::Q_BASE_Z] = 1.0;
        let des = desired_task_accel(
            &inputs.refs.base_height,
            state.q[crate::model::Q_BASE_Z],
            state.qd[crate::model::Q_BASE_Z],
            &config.base_gains,
        );
        add_task_row(&row, des, w.base_height);
    }
    {
        let mut row = vec![0.0; n];
        row[crate::model::Q_PITCH] = 1.0;
        let des = desired_task_accel(
            &inputs.refs.base_pitch,
            state.q[crate::model::Q_PITCH],
            state.qd[crate::model::Q_PITCH],
            &config.pitch_gains,
        );
        add_task_row(&row, des, w.base_pitch);
    }
    if let Some(base_x) = &inputs.refs.base_x {
        let mut row = vec![0.0; n];
        row[crate::model::Q_BASE_X] = 1.0;
        let des = desired_task_accel(
            base_x,
            state.q[crate::model::Q_BASE_X],
            state.qd[crate::model::Q_BASE_X],
            &config.stand_x_gains,
        );
        add_task_row(&row, des, w.base_height);
    }
    for leg in 0..2 {
        let phase = state.contact[leg];
        let (gains, weight) = match phase {
            ContactPhase::Swing => (&config.swing_gains, w.swing_foot),
            ContactPhase::Stance => (&config.support_gains, w.support_foot),
        };
        let est_pos = fk.feet[leg];
        let est_vel = tj.foot[leg] * state.qd;
        let des = desired_point_accel(&inputs.refs.feet[leg], est_pos, est_vel, gains);
        for axis in 0..2 {
            let mut row = vec![0.0; n];
            for j in 0..N_Q {
                row[j] = tj.foot[leg][(axis, j)];
            }
            add_task_row(&row, des[axis] - tj.foot_drift[leg][axis], weight);
        }
    }
    // Contact-force regularization and change penalty. The regularizer
    // exists to keep feet away from slipping, so it weights the tangential
    // components; putting it on the normals would reward unloading the legs
    // through the base and sag the stance.
    for k in 0..N_CONTACT {
        let j = IDX_FC + k;
        let tangential = k % 2 == 0;
        let reg = if tangential { w.contact_force } else { 0.0 };
        hessian[(j, j)] += 2.0 * (reg + w.contact_force_change);
        gradient[j] -= 2.0 * w.contact_force_change * inputs.f_prev[k];
    }
    // Relax-variable penalty.
    for k in 0..N_EPS {
        let j = IDX_EPS + k;
        hessian[(j, j)] += 2.0 * w.relax;
    }
    // Acceleration regularization (see QDD_REGULARIZATION).
    for j in 0..N_Q {
        hessian[(j, j)] += 2.0 * QDD_REGULARIZATION;
    }

    let mut problem = QpProblem::new(hessian, gradient);

    // Equalities: floating-base dynamic consistency, loop-closure
    // consistency of the accelerations (without it the optimizer can shed
    // contact force through physically impossible internal accelerations),
    // and swing-foot force variables pinned to zero (the layout stays fixed
    // for warm starting).
    let sf = floating_base_matrix();
    let nt = terms.null_projector.transpose();
    let lhs_qdd = sf * terms.mass;
    let lhs_fc = -(sf * nt * terms.contact_jac.transpose());
    let rhs = -(sf * (nt * terms.bias));
    let mut swing_rows = 0usize;
    for leg in 0..2 {
        if state.contact[leg] == ContactPhase::Swing {
            swing_rows += 2;
        }
    }
    let n_loop = crate::model::N_LOOP;
    let mut eq = DMatrix::<f64>::zeros(3 + n_loop + swing_rows, n);
    let mut eq_rhs = DVector::<f64>::zeros(3 + n_loop + swing_rows);
    for i in 0..3 {
        for j in 0..N_Q {
            eq[(i, j)] = lhs_qdd[(i, j)];
        }
        for k in 0..N_CONTACT {
            eq[(i, IDX_FC + k)] = lhs_fc[(i, k)];
        }
        eq_rhs[i] = rhs[i];
    }
    for i in 0..n_loop {
        for j in 0..N_Q {
            eq[(3 + i, j)] = terms.loop_terms.jac[(i, j)];
        }
        eq_rhs[3 + i] = -terms.loop_terms.jdot_qd[i];
    }
    let mut row = 3 + n_loop;
    for leg in 0..2 {
        if state.contact[leg] == ContactPhase::Swing {
            for axis in 0..2 {
                eq[(row, IDX_FC + 2 * leg + axis)] = 1.0;
                row += 1;
            }
        }
    }
    problem.eq_matrix = eq;
    problem.eq_rhs = eq_rhs;

    // Inequalities: friction pyramids, torque limits, preferable-space or
    // passive-range rows.
    let tmap = torque_map(terms)?;
    let mut ineq_rows: Vec<Vec<f64>> = Vec::new();
    let mut ineq_lower: Vec<f64> = Vec::new();
    let mut ineq_upper: Vec<f64> = Vec::new();

    for leg in 0..2 {
        if state.contact[leg] != ContactPhase::Stance {
            continue;
        }
        let fx = IDX_FC + 2 * leg;
        let fz = fx + 1;
        let mu = config.friction;
        let mut r1 = vec![0.0; n];
        r1[fx] = 1.0;
        r1[fz] = -mu;
        ineq_rows.push(r1);
        ineq_lower.push(f64::NEG_INFINITY);
        ineq_upper.push(0.0);
        let mut r2 = vec![0.0; n];
        r2[fx] = -1.0;
        r2[fz] = -mu;
        ineq_rows.push(r2);
        ineq_lower.push(f64::NEG_INFINITY);
        ineq_upper.push(0.0);
        let mut r3 = vec![0.0; n];
        r3[fz] = -1.0;
        ineq_rows.push(r3);
        ineq_lower.push(f64::NEG_INFINITY);
        ineq_upper.push(0.0);
    }

    let tau_max = model.actuator().tau_max;
    for i in 0..N_ACT {
        let mut r = vec![0.0; n];
        for j in 0..N_Q {
            r[j] = tmap.qdd_gain[(i, j)];
        }
        for k in 0..N_CONTACT {
            r[IDX_FC + k] = tmap.fc_gain[(i, k)];
        }
        ineq_rows.push(r);
        ineq_lower.push(-tau_max - tmap.offset[i]);
        ineq_upper.push(tau_max - tmap.offset[i]);
    }

    if let Some(mft) = inputs.mft_rows {
        for i in 0..mft.c.nrows() {
            let mut r = vec![0.0; n];
            for j in 0..N_Q {
                r[j] = mft.c[(i, j)];
            }
            r[IDX_EPS + i] = -1.0;
            ineq_rows.push(r);
            ineq_lower.push(f64::NEG_INFINITY);
            ineq_upper.push(mft.d[i]);
        }
    }
    if let Some(sa) = inputs.sa_rows {
        for i in 0..sa.rows.nrows() {
            let mut r = vec![0.0; n];
            for j in 0..N_Q {
                r[j] = sa.rows[(i, j)];
            }
            ineq_rows.push(r);
            ineq_lower.push(sa.lower[i]);
            ineq_upper.push(sa.upper[i]);
        }
    }

    let m = ineq_rows.len();
    let mut a_in = DMatrix::<f64>::zeros(m, n);
    for (i, r) in ineq_rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            a_in[(i, j)] = v;
        }
    }
    problem.ineq_matrix = a_in;
    problem.ineq_lower = DVector::from_vec(ineq_lower);
    problem.ineq_upper = DVector::from_vec(ineq_upper);

    // Acceleration bounds; contact forces and relax variables stay free.
    let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n, f64::INFINITY);
    for j in 0..N_Q {
        let lim = if j < 3 { config.qdd_limit_base } else { config.qdd_limit_joint };
        lb[j] = -lim;
        ub[j] = lim;
    }
    problem.lower_bounds = lb;
    problem.upper_bounds = ub;
    Ok(problem)
}

/// Per-tick controller outputs kept for logging and tests.
#[derive(Clone, Debug)]
pub struct TickDiagnostics {
    pub torque: ActVec,
    pub qdd: GenVec,
    pub contact_force: ContactVec,
    pub relax_inf_norm: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub status: QpStatus,
    /// Set when the solver failed and the previous torque was held.
    pub fault: bool,
}

/// Stateful whole-body controller (one instance per robot).
pub struct WholeBodyController {
    pub kind: ControllerKind,
    pub config: WbcConfig,
    model: RobotModel,
    stacked: Polyhedron,
    passive_min: [f64; N_ACT],
    passive_max: [f64; N_ACT],
    f_prev: ContactVec,
    tau_prev: ActVec,
    warm: Option<WarmStart>,
    started: bool,
}

impl WholeBodyController {
    pub fn new(
        model: RobotModel,
        preferable: &PreferableSpace,
        kind: ControllerKind,
        config: WbcConfig,
    ) -> Self {
        WholeBodyController {
            kind,
            config,
            model,
            stacked: preferable.stacked(),
            passive_min: preferable.passive_min,
            passive_max: preferable.passive_max,
            f_prev: ContactVec::zeros(),
            tau_prev: ActVec::zeros(),
            warm: None,
            started: false,
        }
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    /// Minimum-norm static contact-force distribution, used to seed the
    /// force-change penalty before the first tick.
    fn static_distribution(terms: &DynamicsTerms) -> ContactVec {
        let sf = floating_base_matrix();
        let nt = terms.null_projector.transpose();
        let a = sf * nt * terms.contact_jac.transpose();
        let b = sf * (nt * terms.bias);
        let gram = a * a.transpose();
        match gram.lu().solve(&b) {
            Some(lam) => a.transpose() * lam,
            None => ContactVec::zeros(),
        }
    }

    /// One 1 kHz control tick: assemble, solve, and map to hip torques.
    pub fn control_tick(
        &mut self,
        state: &GeneralizedState,
        refs: &TaskReferences,
    ) -> Result<TickDiagnostics, WbcError> {
        let terms = DynamicsTerms::compute(&self.model, &state.q, &state.qd)?;
        let tj = crate::model::task_jacobians(&self.model, &state.q, &state.qd);
        if !self.started {
            self.f_prev = Self::static_distribution(&terms);
            self.started = true;
        }

        let mft_rows = if self.kind == ControllerKind::Mft {
            let sa_sel = actuation_matrix();
            let hips = sa_sel * state.q;
            let hip_rates = sa_sel * state.qd;
            Some(build_mft_constraint(&self.stacked, &hips, &hip_rates, self.config.predict_dt)?)
        } else {
            None
        };
        let sa_rows = if self.kind == ControllerKind::Sa {
            Some(sa_constraint(
                &state.q,
                &state.qd,
                self.config.predict_dt,
                &self.passive_min,
                &self.passive_max,
            ))
        } else {
            None
        };

        let inputs = AssemblyInputs {
            terms: &terms,
            task_jac: &tj,
            refs,
            f_prev: &self.f_prev,
            mft_rows: mft_rows.as_ref(),
            sa_rows: sa_rows.as_ref(),
        };
        let mut problem = assemble_problem(&self.model, state, &self.config, &inputs)?;
        problem.warm = self.warm.clone();
        let solution = qp::solve(&problem);

        if solution.status != QpStatus::Optimal {
            // Fail-safe hold: keep the previous torque and flag the fault.
            return Ok(TickDiagnostics {
                torque: self.tau_prev,
                qdd: GenVec::zeros(),
                contact_force: self.f_prev,
                relax_inf_norm: f64::NAN,
                iterations: solution.iterations,
                solve_time: solution.solve_time,
                status: solution.status,
                fault: true,
            });
        }

        let qdd = GenVec::from_fn(|i, _| solution.primal[i]);
        let f_c = ContactVec::from_fn(|i, _| solution.primal[IDX_FC + i]);
        let relax = (0..N_EPS)
            .map(|i| solution.primal[IDX_EPS + i].abs())
            .fold(0.0_f64, f64::max);
        let torque = crate::dynamics::inverse_dynamics_actuated(&terms, &qdd, &f_c)?;

        self.f_prev = f_c;
        self.tau_prev = torque;
        self.warm = Some(WarmStart { primal: solution.primal.clone(), active: solution.active.clone() });

        Ok(TickDiagnostics {
            torque,
            qdd,
            contact_force: f_c,
            relax_inf_norm: relax,
            iterations: solution.iterations,
            solve_time: solution.solve_time,
            status: solution.status,
            fault: false,
        })
    }

    /// Assemble (but do not solve) the current tick's QP; test hook for the
    /// solver oracle.
    pub fn assemble_only(
        &mut self,
        state: &GeneralizedState,
        refs: &TaskReferences,
    ) -> Result<QpProblem, WbcError> {
        let terms = DynamicsTerms::compute(&self.model, &state.q, &state.qd)?;
        let tj = crate::model::task_jacobians(&self.model, &state.q, &state.qd);
        if !self.started {
            self.f_prev = Self::static_distribution(&terms);
            self.started = true;
        }
        let mft_rows = if self.kind == ControllerKind::Mft {
            let sa_sel = actuation_matrix();
            let hips = sa_sel * state.q;
            let hip_rates = sa_sel * state.qd;
            Some(build_mft_constraint(&self.stacked, &hips, &hip_rates, self.config.predict_dt)?)
        } else {
            None
        };
        let sa_rows = if self.kind == ControllerKind::Sa {
            Some(sa_constraint(
                &state.q,
                &state.qd,
                self.config.predict_dt,
                &self.passive_min,
                &self.passive_max,
            ))
        } else {
            None
        };
        let inputs = AssemblyInputs {
            terms: &terms,
            task_jac: &tj,
            refs,
            f_prev: &self.f_prev,
            mft_rows: mft_rows.as_ref(),
            sa_rows: sa_rows.as_ref(),
        };
        assemble_problem(&self.model, state, &self.config, &inputs)
    }

    /// Hip angles of both legs in actuated order.
    pub fn hips_of(state: &GeneralizedState) -> SVector<f64, N_ACT> {
        actuation_matrix() * state.q
    }

    pub fn stacked_polyhedron(&self) -> &Polyhedron {
        &self.stacked
    }
}

/// Hold references fixed at a standing pose: both feet in stance at their
/// current locations, base at the commanded height with zero pitch.
pub fn standing_references(state: &GeneralizedState, model: &RobotModel, z_cmd: f64) -> TaskReferences {
    let fk = forward_kinematics(model, &state.q);
    TaskReferences {
        base_height: TaskTarget { pos: z_cmd, vel: 0.0, acc: 0.0 },
        base_pitch: TaskTarget::default(),
        feet: [
            PointTarget { pos: fk.feet[0], ..Default::default() },
            PointTarget { pos: fk.feet[1], ..Default::default() },
        ],
        base_x: Some(TaskTarget {
            pos: 0.5 * (fk.feet[0].x + fk.feet[1].x),
            vel: 0.0,
            acc: 0.0,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::state_from_base_and_feet;
    use crate::wsmap::{
        default_r_min, default_raci_max, IndexBounds, PreferableSpace, DEFAULT_LTI_MIN,
        DEFAULT_LTI_MAX, DEFAULT_MAX_FACES, DEFAULT_RACI_ACCEL,
    };
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn model() -> RobotModel {
        RobotModel::reference()
    }

    fn preferable(m: &RobotModel) -> &'static PreferableSpace {
        static CACHE: OnceLock<PreferableSpace> = OnceLock::new();
        CACHE.get_or_init(|| {
            let bounds = IndexBounds {
                lti_min: DEFAULT_LTI_MIN,
                lti_max: DEFAULT_LTI_MAX,
                raci_min: 0.0,
                raci_max: default_raci_max(m, crate::model::LegId::Right),
            };
            PreferableSpace::build(m, 0.02, bounds, DEFAULT_RACI_ACCEL, DEFAULT_MAX_FACES, default_r_min(0.02))
                .unwrap()
                .0
        })
    }

    fn standing_state(m: &RobotModel, height: f64) -> GeneralizedState {
        state_from_base_and_feet(
            m,
            Vec2::new(0.0, height),
            0.0,
            Vec2::zeros(),
            0.0,
            [Vec2::new(-0.06, 0.0), Vec2::new(0.06, 0.0)],
            [Vec2::zeros(), Vec2::zeros()],
            [ContactPhase::Stance; 2],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn pd_law_reference_cases() {
        let gains = TaskGains { kp: 100.0, kd: 20.0 };
        let t = TaskTarget { pos: 1.0, vel: 0.0, acc: 0.0 };
        assert_relative_eq!(desired_task_accel(&t, 1.0, 0.0, &gains), 0.0);
        assert_relative_eq!(desired_task_accel(&t, 0.9, 0.0, &gains), 100.0 * 0.1, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..100 {
            let t = TaskTarget {
                pos: rng.gen_range(-1.0..1.0),
                vel: rng.gen_range(-1.0..1.0),
                acc: rng.gen_range(-5.0..5.0),
            };
            let (p, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let expected = t.acc + gains.kp * (t.pos - p) + gains.kd * (t.vel - v);
            assert_relative_eq!(desired_task_accel(&t, p, v, &gains), expected);
        }
    }

    #[test]
    fn mft_constraint_interior_and_boundary() {
        let m = model();
        let pref = preferable(&m);
        let stacked = pref.stacked();
        // Interior at rest: every slack is positive.
        let witness = &stacked.witness;
        let hips = SVector::<f64, 4>::from_fn(|i, _| witness[i]);
        let rates = SVector::<f64, 4>::zeros();
        let con = build_mft_constraint(&stacked, &hips, &rates, 0.05).unwrap();
        assert_eq!(con.c.nrows(), 12);
        assert_eq!(con.c.ncols(), 11);
        assert!(con.d.iter().all(|&d| d > 0.0), "interior at rest must leave slack");

        // On a face at rest: the face's slack is zero, so outward
        // acceleration through that face is forbidden.
        let a0: DVector<f64> = stacked.a.row(0).transpose();
        // Walk from the witness to face 0 along its normal.
        let t = (stacked.b[0] - a0.dot(witness)) / a0.dot(&a0);
        let on_face = witness + t * &a0;
        let hips_face = SVector::<f64, 4>::from_fn(|i, _| on_face[i]);
        let con = build_mft_constraint(&stacked, &hips_face, &rates, 0.05).unwrap();
        assert!(con.d[0].abs() < 1e-9, "face slack should vanish, got {}", con.d[0]);
    }

    #[test]
    fn mft_constraint_substitution_oracle() {
        let m = model();
        let stacked = preferable(&m).stacked();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..2000 {
            let hips = SVector::<f64, 4>::from_fn(|_, _| rng.gen_range(-1.2..1.2));
            let rates = SVector::<f64, 4>::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let dt = rng.gen_range(0.005..0.1);
            let qdd = GenVec::from_fn(|_, _| rng.gen_range(-100.0..100.0));
            let con = build_mft_constraint(&stacked, &hips, &rates, dt).unwrap();
            let lhs = &con.c * DVector::from_iterator(N_Q, qdd.iter().copied());
            let via_rows = (0..12).all(|i| lhs[i] <= con.d[i] + 1e-10);
            // Direct Taylor substitution.
            let mut predicted = DVector::<f64>::zeros(4);
            for (k, &col) in ACTUATED_IDX.iter().enumerate() {
                predicted[k] = hips[k] + rates[k] * dt + 0.5 * qdd[col] * dt * dt;
            }
            let direct = (&stacked.a * &predicted - &stacked.b).iter().all(|s| *s <= 1e-10);
            assert_eq!(via_rows, direct, "membership mismatch");
        }
    }

    #[test]
    fn cartesian_constraint_reduces_to_joint_case() {
        let m = model();
        let stacked = preferable(&m).stacked();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        for _ in 0..100 {
            let hips = SVector::<f64, 4>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let rates = SVector::<f64, 4>::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let dt = 0.05;
            let joint = build_mft_constraint(&stacked, &hips, &rates, dt).unwrap();
            // The joint case is the Cartesian form with J = S_a and no
            // velocity-product term.
            let sa = actuation_matrix();
            let mut jac = DMatrix::<f64>::zeros(4, N_Q);
            for i in 0..4 {
                for j in 0..N_Q {
                    jac[(i, j)] = sa[(i, j)];
                }
            }
            let mut qd = GenVec::zeros();
            for (k, &col) in ACTUATED_IDX.iter().enumerate() {
                qd[col] = rates[k];
            }
            let p_hat = DVector::from_iterator(4, hips.iter().copied());
            let cart = build_cartesian_constraint(
                &stacked,
                &p_hat,
                &jac,
                &qd,
                &DVector::zeros(4),
                dt,
            );
            assert!((&joint.c - &cart.c).amax() < 1e-12);
            assert!((&joint.d - &cart.d).amax() < 1e-12);
        }
    }

    #[test]
    fn cartesian_constraint_taylor_oracle_and_dt_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        // Random polyhedron over a 3-D task space with a random Jacobian.
        for _ in 0..200 {
            let n_h = 5;
            let mut a = DMatrix::<f64>::zeros(n_h, 3);
            for i in 0..n_h {
                for j in 0..3 {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            let b = DVector::from_fn(n_h, |_, _| rng.gen_range(-1.0..1.0));
            let poly = Polyhedron {
                space: SpaceTag::FootCartesian,
                a: a.clone(),
                b: b.clone(),
                witness: DVector::zeros(3),
            };
            let jac = DMatrix::from_fn(3, N_Q, |_, _| rng.gen_range(-1.0..1.0));
            let p_hat = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
            let qd = GenVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let jdot_qd = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let dt = rng.gen_range(0.01..0.1);
            let con = build_cartesian_constraint(&poly, &p_hat, &jac, &qd, &jdot_qd, dt);
            let qdd = GenVec::from_fn(|_, _| rng.gen_range(-20.0..20.0));

            // Direct Taylor prediction of the task position.
            let qd_dyn = DVector::from_iterator(N_Q, qd.iter().copied());
            let qdd_dyn = DVector::from_iterator(N_Q, qdd.iter().copied());
            let p_pred =
                &p_hat + (&jac * &qd_dyn) * dt + 0.5 * dt * dt * (&jac * &qdd_dyn + &jdot_qd);
            let direct = &a * &p_pred - &b;
            let via = &con.c * &qdd_dyn - &con.d;
            for i in 0..n_h {
                assert_relative_eq!(via[i], direct[i], epsilon = 1e-12, max_relative = 1e-12);
            }

            // dt -> 0 limit: d_i -> b_i - (A p_hat)_i.
            let tiny = build_cartesian_constraint(&poly, &p_hat, &jac, &qd, &jdot_qd, 1e-9);
            let limit = &b - &a * &p_hat;
            assert!((&tiny.d - &limit).amax() < 1e-6);
        }
    }

    #[test]
    fn sa_rows_interior_and_boundary() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.40);
        let con = sa_constraint(&state.q, &state.qd, 0.05, &pref.passive_min, &pref.passive_max);
        // Standing mid-workspace: qdd = 0 is feasible.
        for i in 0..4 {
            assert!(con.lower[i] <= 0.0 && 0.0 <= con.upper[i]);
        }
        // A passive joint resting exactly on its minimum: the row forbids
        // outward (negative) acceleration.
        let mut q = state.q;
        q[PASSIVE_IDX[0]] = pref.passive_min[0];
        let con = sa_constraint(&q, &GenVec::zeros(), 0.05, &pref.passive_min, &pref.passive_max);
        assert_relative_eq!(con.lower[0], 0.0, epsilon = 1e-12);

        // Substitution oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        for _ in 0..500 {
            let q = GenVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let qd = GenVec::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let qdd = GenVec::from_fn(|_, _| rng.gen_range(-100.0..100.0));
            let dt = rng.gen_range(0.005..0.1);
            let con = sa_constraint(&q, &qd, dt, &pref.passive_min, &pref.passive_max);
            let qdd_dyn = DVector::from_iterator(N_Q, qdd.iter().copied());
            let rows = &con.rows * &qdd_dyn;
            let via = (0..4).all(|i| rows[i] >= con.lower[i] - 1e-10 && rows[i] <= con.upper[i] + 1e-10);
            let direct = PASSIVE_IDX.iter().enumerate().all(|(k, &idx)| {
                let pred = q[idx] + qd[idx] * dt + 0.5 * qdd[idx] * dt * dt;
                pred >= pref.passive_min[k] - 1e-10 && pred <= pref.passive_max[k] + 1e-10
            });
            assert_eq!(via, direct);
        }
    }

    #[test]
    fn assembled_problem_has_27_variables() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.40);
        let refs = standing_references(&state, &m, 0.40);
        let mut ctrl =
            WholeBodyController::new(m.clone(), pref, ControllerKind::Mft, WbcConfig::default());
        let problem = ctrl.assemble_only(&state, &refs).unwrap();
        assert_eq!(problem.n(), 27);
    }

    #[test]
    fn static_stance_solves_to_rest() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.40);
        let refs = standing_references(&state, &m, 0.40);
        let mut ctrl =
            WholeBodyController::new(m.clone(), pref, ControllerKind::Mft, WbcConfig::default());
        let diag = ctrl.control_tick(&state, &refs).unwrap();
        assert!(!diag.fault);
        assert!(diag.qdd.amax() < 1e-4, "qdd at rest: {}", diag.qdd.amax());
        assert!(diag.relax_inf_norm < 1e-9);
        // Contact forces near the minimum-norm static distribution.
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let f_static = WholeBodyController::static_distribution(&terms);
        assert!(
            (diag.contact_force - f_static).amax() < 1e-4,
            "forces {:?} vs static {:?}",
            diag.contact_force,
            f_static
        );
        // Friction and torque limits hold.
        let mu = ctrl.config.friction;
        for leg in 0..2 {
            let fx = diag.contact_force[2 * leg];
            let fz = diag.contact_force[2 * leg + 1];
            assert!(fz >= -1e-10);
            assert!(fx.abs() <= mu * fz + 1e-10);
        }
        for t in diag.torque.iter() {
            assert!(t.abs() <= m.actuator().tau_max + 1e-8);
        }
    }

    #[test]
    fn relax_weight_zero_makes_rows_vacuous() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.445); // outside the preferable band
        let refs = standing_references(&state, &m, 0.445);
        let mut config = WbcConfig::default();
        config.weights.relax = 0.0;
        let mut with_rows =
            WholeBodyController::new(m.clone(), pref, ControllerKind::Mft, config);
        let problem = with_rows.assemble_only(&state, &refs).unwrap();
        let sol_with = qp::solve(&problem);

        // Same problem with the preferable rows removed entirely.
        let mut stripped = problem.clone();
        let keep: Vec<usize> = (0..stripped.ineq_matrix.nrows())
            .filter(|&i| {
                // The relax-coupled rows are exactly those touching eps.
                (0..N_EPS).all(|k| stripped.ineq_matrix[(i, IDX_EPS + k)] == 0.0)
            })
            .collect();
        let mut a = DMatrix::<f64>::zeros(keep.len(), stripped.ineq_matrix.ncols());
        let mut lo = DVector::<f64>::zeros(keep.len());
        let mut up = DVector::<f64>::zeros(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            a.row_mut(r).copy_from(&stripped.ineq_matrix.row(i));
            lo[r] = stripped.ineq_lower[i];
            up[r] = stripped.ineq_upper[i];
        }
        stripped.ineq_matrix = a;
        stripped.ineq_lower = lo;
        stripped.ineq_upper = up;
        let sol_without = qp::solve(&stripped);
        assert_eq!(sol_with.status, QpStatus::Optimal);
        assert_eq!(sol_without.status, QpStatus::Optimal);
        let d = (sol_with.primal.rows(0, IDX_EPS) - sol_without.primal.rows(0, IDX_EPS)).amax();
        assert!(d < 1e-5, "solutions diverge by {d}");
    }

    #[test]
    fn control_tick_is_deterministic() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.40);
        let refs = standing_references(&state, &m, 0.40);
        let run = || {
            let mut ctrl = WholeBodyController::new(
                m.clone(),
                pref,
                ControllerKind::Mft,
                WbcConfig::default(),
            );
            let d1 = ctrl.control_tick(&state, &refs).unwrap();
            let d2 = ctrl.control_tick(&state, &refs).unwrap();
            (d1.torque, d2.torque)
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(a1, b1, "first ticks must be bitwise identical");
        assert_eq!(a2, b2, "second ticks must be bitwise identical");
    }

    #[test]
    fn swing_phase_pins_contact_forces() {
        let m = model();
        let pref = preferable(&m);
        let mut state = standing_state(&m, 0.40);
        state.contact[1] = ContactPhase::Swing;
        let mut refs = standing_references(&state, &m, 0.40);
        refs.feet[1].pos += Vec2::new(0.0, 0.05);
        let mut ctrl =
            WholeBodyController::new(m.clone(), pref, ControllerKind::Mft, WbcConfig::default());
        let diag = ctrl.control_tick(&state, &refs).unwrap();
        assert!(!diag.fault);
        assert!(diag.contact_force[2].abs() < 1e-10);
        assert!(diag.contact_force[3].abs() < 1e-10);
    }

    #[test]
    fn sa_controller_runs_standing() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.40);
        let refs = standing_references(&state, &m, 0.40);
        let mut ctrl =
            WholeBodyController::new(m.clone(), pref, ControllerKind::Sa, WbcConfig::default());
        let diag = ctrl.control_tick(&state, &refs).unwrap();
        assert!(!diag.fault);
        assert!(diag.qdd.amax() < 1e-4);
    }

    #[test]
    fn torque_expression_matches_inverse_dynamics_at_optimum() {
        let m = model();
        let pref = preferable(&m);
        let state = standing_state(&m, 0.42);
        let refs = standing_references(&state, &m, 0.40); // height error drives motion
        let mut ctrl =
            WholeBodyController::new(m.clone(), pref, ControllerKind::Mft, WbcConfig::default());
        let diag = ctrl.control_tick(&state, &refs).unwrap();
        let terms = DynamicsTerms::compute(&m, &state.q, &state.qd).unwrap();
        let tmap = torque_map(&terms).unwrap();
        let linear = tmap.qdd_gain * diag.qdd + tmap.fc_gain * diag.contact_force + tmap.offset;
        assert!((linear - diag.torque).amax() < 1e-10);
    }
}
