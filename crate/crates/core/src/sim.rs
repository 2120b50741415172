//! Deterministic physics simulation with penalty ground contact.
//!
//! The constrained forward dynamics is integrated semi-implicitly (velocity
//! first, position with the velocity midpoint, exact for constant
//! acceleration); loop-closure drift is held down by Baumgarte terms on the
//! constraint rows. Contact is a spring-damper penalty normal force with
//! regularized Coulomb friction. Everything is seedless and bitwise
//! deterministic.

use crate::dynamics::{forward_dynamics_with_loop_rhs, ActVec, DynamicsError, DynamicsTerms};
use crate::model::{
    forward_kinematics, task_jacobians, ContactPhase, ContactVec, GenVec, GeneralizedState,
    RobotModel, Q_BASE_X,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation diverged: generalized speed {0:.1} exceeds the sanity bound")]
    NumericalBlowup(f64),
    #[error("dynamics failure: {0}")]
    Dynamics(#[from] DynamicsError),
}

/// One linear terrain piece; pieces are ordered by x and contiguous.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TerrainSegment {
    pub x_end: f64,
    pub z_start: f64,
    pub z_end: f64,
    pub friction: f64,
}

/// Piecewise-linear height profile with per-segment friction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Terrain {
    pub x_start: f64,
    pub segments: Vec<TerrainSegment>,
}

impl Terrain {
    pub fn flat(friction: f64) -> Self {
        Self::flat_at(0.0, friction)
    }

    pub fn flat_at(height: f64, friction: f64) -> Self {
        Terrain {
            x_start: -1e6,
            segments: vec![TerrainSegment { x_end: 1e6, z_start: height, z_end: height, friction }],
        }
    }

    pub fn height_and_friction(&self, x: f64) -> (f64, f64) {
        let mut x0 = self.x_start;
        for seg in &self.segments {
            if x <= seg.x_end || std::ptr::eq(seg, self.segments.last().unwrap()) {
                let span = (seg.x_end - x0).max(1e-12);
                let t = ((x - x0) / span).clamp(0.0, 1.0);
                return (seg.z_start + t * (seg.z_end - seg.z_start), seg.friction);
            }
            x0 = seg.x_end;
        }
        (0.0, 0.6)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ContactParams {
    /// Normal spring stiffness [N/m].
    pub stiffness: f64,
    /// Normal damping [N s/m].
    pub damping: f64,
    /// Friction regularization velocity [m/s].
    pub friction_vel: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams { stiffness: 5e4, damping: 1e3, friction_vel: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Physics time step [s].
    pub dt: f64,
    pub contact: ContactParams,
    /// Baumgarte natural frequency [rad/s] and damping ratio.
    pub baumgarte_omega: f64,
    pub baumgarte_zeta: f64,
    /// Generalized-speed sanity bound [rad/s or m/s].
    pub blowup_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 2e-4,
            contact: ContactParams::default(),
            baumgarte_omega: 200.0,
            baumgarte_zeta: 1.0,
            blowup_speed: 1e3,
        }
    }
}

/// A sagittal push: the impulse is delivered as a constant base force over
/// the spread window, so the integrated impulse is exact.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PushEvent {
    /// Impulse [N s], positive forward.
    pub impulse: f64,
    /// Window length [s].
    pub spread: f64,
}

impl PushEvent {
    pub fn force(&self) -> f64 {
        self.impulse / self.spread
    }
}

/// Per-foot contact forces from the penalty law.
pub fn contact_forces(
    model: &RobotModel,
    state: &GeneralizedState,
    terrain: &Terrain,
    params: &ContactParams,
) -> (ContactVec, [bool; 2]) {
    let fk = forward_kinematics(model, &state.q);
    let tj = task_jacobians(model, &state.q, &state.qd);
    let mut f = ContactVec::zeros();
    let mut flags = [false; 2];
    for leg in 0..2 {
        let foot = fk.feet[leg];
        let vel = tj.foot[leg] * state.qd;
        let (ground, mu) = terrain.height_and_friction(foot.x);
        let depth = ground - foot.y;
        if depth <= 0.0 {
            continue;
        }
        let normal = (params.stiffness * depth - params.damping * vel.y).max(0.0);
        let tangent = -mu * normal * (vel.x / params.friction_vel).tanh();
        f[2 * leg] = tangent;
        f[2 * leg + 1] = normal;
        flags[leg] = normal > 0.0;
    }
    (f, flags)
}

/// Simulation state plus scratch for the push window.
pub struct Simulator {
    pub model: RobotModel,
    pub config: SimConfig,
    pub terrain: Terrain,
    pub state: GeneralizedState,
    push_force: f64,
    push_steps_left: u64,
    /// Total applied push force at the current step [N], for logging.
    pub applied_push: f64,
    pub last_contact: ContactVec,
    pub last_contact_flags: [bool; 2],
}

impl Simulator {
    pub fn new(model: RobotModel, config: SimConfig, terrain: Terrain, state: GeneralizedState) -> Self {
        Simulator {
            model,
            config,
            terrain,
            state,
            push_force: 0.0,
            push_steps_left: 0,
            applied_push: 0.0,
            last_contact: ContactVec::zeros(),
            last_contact_flags: [false; 2],
        }
    }

    /// Schedule a push starting at the next step. The window is rounded to a
    /// whole number of steps and the force scaled so the delivered impulse
    /// matches the request exactly.
    pub fn apply_push(&mut self, event: &PushEvent) {
        assert!(event.spread > 0.0);
        let steps = (event.spread / self.config.dt).round().max(1.0) as u64;
        self.push_steps_left = steps;
        self.push_force = event.impulse / (steps as f64 * self.config.dt);
    }

    pub fn push_active(&self) -> bool {
        self.push_steps_left > 0
    }

    /// Advance one physics step under the given hip torques.
    pub fn step(&mut self, tau: &ActVec) -> Result<(), SimError> {
        let (f_c, flags) = contact_forces(&self.model, &self.state, &self.terrain, &self.config.contact);
        self.last_contact = f_c;
        self.last_contact_flags = flags;

        let mut external = GenVec::zeros();
        self.applied_push = 0.0;
        if self.push_steps_left > 0 {
            external[Q_BASE_X] = self.push_force;
            self.applied_push = self.push_force;
            self.push_steps_left -= 1;
        }

        let terms = DynamicsTerms::compute(&self.model, &self.state.q, &self.state.qd)?;
        // Baumgarte-stabilized constraint acceleration.
        let omega = self.config.baumgarte_omega;
        let zeta = self.config.baumgarte_zeta;
        let phi_dot = terms.loop_terms.jac * self.state.qd;
        let loop_rhs = -terms.loop_terms.jdot_qd
            - 2.0 * zeta * omega * phi_dot
            - omega * omega * terms.loop_terms.phi;
        let (qdd, _f_h) = forward_dynamics_with_loop_rhs(&terms, tau, &f_c, &external, &loop_rhs)?;

        let dt = self.config.dt;
        let qd_new = self.state.qd + qdd * dt;
        self.state.q += 0.5 * (self.state.qd + qd_new) * dt;
        self.state.qd = qd_new;
        self.state.t += dt;

        let speed = self.state.qd.amax();
        if speed > self.config.blowup_speed {
            return Err(SimError::NumericalBlowup(speed));
        }
        Ok(())
    }
}
