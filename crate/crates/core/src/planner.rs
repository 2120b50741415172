//! Gait state machine and reference generation.
//!
//! Only the base height and pitch are planned; the sagittal base motion is
//! left to the step dynamics. The swing foot lands at a pre-impact target
//! computed by a discrete P-type law from the predicted pre-impact
//! center-of-mass state; the prediction is the analytic flow of a linear
//! inverted pendulum about the support point over the remaining swing time.

use crate::model::{com_state, forward_kinematics, ContactPhase, GeneralizedState, LegId, RobotModel, Vec2};
use crate::wbc::{PointTarget, TaskReferences, TaskTarget};
use serde::{Deserialize, Serialize};

/// User command: base height and desired average sagittal speed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Command {
    pub base_height: f64,
    pub speed: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Nominal step duration [s].
    pub step_duration: f64,
    /// Swing apex height above the ground [m].
    pub apex: f64,
    /// Pre-impact velocity feedback gain [s].
    pub k_v: f64,
    /// Pre-impact velocity error gain [s].
    pub k_p: f64,
    /// Touch-down force threshold [N].
    pub touchdown_force: f64,
    /// Touch-down debounce time [s].
    pub touchdown_hold: f64,
    /// Slew limit of the live swing-target updates [m/s].
    pub retarget_rate: f64,
    /// Weight-shift interval before the first lift-off [s].
    pub weight_shift_time: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            step_duration: 0.35,
            apex: 0.06,
            k_v: 0.16,
            k_p: 0.08,
            touchdown_force: 5.0,
            touchdown_hold: 0.002,
            retarget_rate: 3.0,
            weight_shift_time: 0.7,
        }
    }
}

/// Base references: the commanded height and zero pitch; the sagittal
/// position is not planned.
pub fn base_reference(command: &Command) -> (f64, f64) {
    (command.base_height, 0.0)
}

/// Pre-impact foot placement from the predicted center-of-mass state.
pub fn foot_placement(x_com: f64, xd_com: f64, xd_desired: f64, k_v: f64, k_p: f64) -> f64 {
    x_com + k_v * xd_com + k_p * (xd_com - xd_desired)
}

/// Desired pre-impact speed for a commanded average speed: the periodic
/// pendulum orbit covering `speed * T` per step reaches its end-of-step
/// velocity boosted by (lambda T / 2) / tanh(lambda T / 2).
pub fn desired_preimpact_speed(command: &Command, gravity: f64, step_duration: f64) -> f64 {
    let lambda = (gravity / command.base_height.max(0.05)).sqrt();
    let half = 0.5 * lambda * step_duration;
    command.speed * half / half.tanh()
}

/// Analytic pendulum flow about a support point.
pub fn pendulum_flow(
    x0: f64,
    xd0: f64,
    support_x: f64,
    lambda: f64,
    horizon: f64,
) -> (f64, f64) {
    let (s, c) = (lambda * horizon).sinh_cosh();
    let rel = x0 - support_x;
    (support_x + rel * c + xd0 * s / lambda, rel * lambda * s + xd0 * c)
}

trait SinhCosh {
    fn sinh_cosh(self) -> (f64, f64);
}
impl SinhCosh for f64 {
    fn sinh_cosh(self) -> (f64, f64) {
        (self.sinh(), self.cosh())
    }
}

/// Cubic Hermite segment on [0, duration].
#[derive(Clone, Copy, Debug, Default)]
pub struct Cubic {
    c0: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    duration: f64,
}

impl Cubic {
    pub fn hermite(p0: f64, v0: f64, p1: f64, v1: f64, duration: f64) -> Self {
        let t = duration.max(1e-9);
        let c0 = p0;
        let c1 = v0;
        let c2 = (3.0 * (p1 - p0) - (2.0 * v0 + v1) * t) / (t * t);
        let c3 = (2.0 * (p0 - p1) + (v0 + v1) * t) / (t * t * t);
        Cubic { c0, c1, c2, c3, duration: t }
    }

    /// Position, velocity and acceleration at `t` (clamped to the segment).
    pub fn sample(&self, t: f64) -> (f64, f64, f64) {
        let t = t.clamp(0.0, self.duration);
        let p = self.c0 + t * (self.c1 + t * (self.c2 + t * self.c3));
        let v = self.c1 + t * (2.0 * self.c2 + t * 3.0 * self.c3);
        let a = 2.0 * self.c2 + 6.0 * self.c3 * t;
        (p, v, a)
    }
}

/// Swing-foot reference from lift-off to the target: a cubic in x with zero
/// boundary velocities, and a two-segment cubic z profile lifting to the
/// apex and returning to the ground.
#[derive(Clone, Copy, Debug)]
pub struct SwingProfile {
    pub x: Cubic,
    z_up: Cubic,
    z_down: Cubic,
    pub duration: f64,
    pub ground_z: f64,
}

/// Fraction of the swing over which the x motion completes; the foot then
/// hovers above the target so its deceleration reaction on the torso happens
/// before the support exchange instead of pumping it.
pub const SWING_X_FRACTION: f64 = 0.8;

impl SwingProfile {
    pub fn new(liftoff: Vec2, target_x: f64, apex: f64, duration: f64, ground_z: f64) -> Self {
        SwingProfile {
            x: Cubic::hermite(liftoff.x, 0.0, target_x, 0.0, SWING_X_FRACTION * duration),
            z_up: Cubic::hermite(liftoff.y, 0.0, ground_z + apex, 0.0, 0.5 * duration),
            z_down: Cubic::hermite(ground_z + apex, 0.0, ground_z, 0.0, 0.5 * duration),
            duration,
            ground_z,
        }
    }

    /// Rebuild the x spline mid-swing from the currently referenced state so
    /// position and velocity stay continuous under retargeting.
    pub fn retarget(&mut self, t: f64, new_target_x: f64) {
        let (p, v, _) = self.x.sample(t);
        let remaining = (SWING_X_FRACTION * self.duration - t).max(1e-3);
        let rebuilt = Cubic::hermite(p, v, new_target_x, 0.0, remaining);
        self.x = ShiftedCubic { inner: rebuilt, offset: t }.flatten();
    }

    pub fn sample(&self, t: f64) -> PointTarget {
        let (px, vx, ax) = self.x.sample(t);
        let half = 0.5 * self.duration;
        let (pz, vz, az) = if t <= half {
            self.z_up.sample(t)
        } else if t <= self.duration {
            self.z_down.sample(t - half)
        } else {
            // Past the nominal duration: keep descending gently until the
            // contact detector fires.
            let (p, _, _) = self.z_down.sample(half);
            (p - 0.2 * (t - self.duration), -0.2, 0.0)
        };
        PointTarget {
            pos: Vec2::new(px, pz),
            vel: Vec2::new(vx, vz),
            acc: Vec2::new(ax, az),
        }
    }
}

/// Helper that re-bases a cubic built on a shifted time axis.
struct ShiftedCubic {
    inner: Cubic,
    offset: f64,
}

impl ShiftedCubic {
    /// Expand (t - offset) powers into plain coefficients.
    fn flatten(self) -> Cubic {
        let Cubic { c0, c1, c2, c3, duration } = self.inner;
        let s = -self.offset;
        Cubic {
            c0: c0 + c1 * s + c2 * s * s + c3 * s * s * s,
            c1: c1 + 2.0 * c2 * s + 3.0 * c3 * s * s,
            c2: c2 + 3.0 * c3 * s,
            c3,
            duration: duration + self.offset,
        }
    }
}

/// Convenience wrapper matching the planner's public swing-trajectory
/// contract: sample the profile built from a lift-off pose.
pub fn swing_trajectory(
    liftoff: Vec2,
    target_x: f64,
    apex: f64,
    duration: f64,
    t_in_step: f64,
) -> PointTarget {
    SwingProfile::new(liftoff, target_x, apex, duration, 0.0).sample(t_in_step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaitMode {
    Stand,
    /// Standing with the sagittal target over the upcoming support foot,
    /// before the first lift-off.
    WeightShift,
    Walk,
}

/// Events the harness reacts to (push triggering).
#[derive(Clone, Copy, Debug, Default)]
pub struct GaitEvents {
    pub liftoff: Option<LegId>,
    pub touchdown: Option<LegId>,
}

/// Gait state machine: exactly one swing foot during walking, both feet in
/// stance while standing.
pub struct Planner {
    pub config: PlannerConfig,
    pub command: Command,
    mode: GaitMode,
    swing_leg: LegId,
    step_timer: f64,
    swing: SwingProfile,
    support_ref: [Vec2; 2],
    touchdown_accum: f64,
    shift_timer: f64,
    first_swing: LegId,
}

impl Planner {
    pub fn new(config: PlannerConfig, command: Command) -> Self {
        Planner {
            config,
            command,
            mode: GaitMode::Stand,
            swing_leg: LegId::Right,
            step_timer: 0.0,
            swing: SwingProfile::new(Vec2::zeros(), 0.0, config.apex, config.step_duration, 0.0),
            support_ref: [Vec2::zeros(); 2],
            touchdown_accum: 0.0,
            shift_timer: 0.0,
            first_swing: LegId::Right,
        }
    }

    pub fn mode(&self) -> GaitMode {
        self.mode
    }

    pub fn swing_leg(&self) -> LegId {
        self.swing_leg
    }

    pub fn step_timer(&self) -> f64 {
        self.step_timer
    }

    /// Current swing-foot placement target (end of the swing spline).
    pub fn swing_target_x(&self) -> f64 {
        self.swing.x.sample(self.swing.duration).0
    }

    /// Initialize standing references from the current state.
    pub fn start_standing(&mut self, model: &RobotModel, state: &GeneralizedState) {
        let fk = forward_kinematics(model, &state.q);
        self.support_ref = fk.feet;
        self.mode = GaitMode::Stand;
    }

    /// Enter the walking gait, lifting `first_swing` first. The gait begins
    /// with a weight-shift interval over the first support foot so the first
    /// lift-off does not kick the torso.
    pub fn start_walking(&mut self, model: &RobotModel, state: &GeneralizedState, first_swing: LegId) {
        self.start_standing(model, state);
        self.mode = GaitMode::WeightShift;
        self.first_swing = first_swing;
        self.shift_timer = 0.0;
    }

    fn begin_swing(&mut self, model: &RobotModel, state: &GeneralizedState, leg: LegId) {
        let fk = forward_kinematics(model, &state.q);
        self.swing_leg = leg;
        self.step_timer = 0.0;
        self.touchdown_accum = 0.0;
        let liftoff = fk.feet[leg as usize];
        let target = self.placement_target(model, state, liftoff.x);
        self.swing = SwingProfile::new(
            liftoff,
            target,
            self.config.apex,
            self.config.step_duration,
            0.0,
        );
    }

    /// Predicted pre-impact center-of-mass state.
    pub fn predict_preimpact_com(&self, model: &RobotModel, state: &GeneralizedState) -> (f64, f64) {
        let (com, com_vel) = com_state(model, &state.q, &state.qd);
        let support = self.support_ref[self.swing_leg.other() as usize].x;
        let lambda = (model.gravity() / self.command.base_height.max(0.05)).sqrt();
        let remaining = (self.config.step_duration - self.step_timer).max(0.0);
        pendulum_flow(com.x, com_vel.x, support, lambda, remaining)
    }

    fn placement_target(&self, model: &RobotModel, state: &GeneralizedState, fallback: f64) -> f64 {
        if self.mode != GaitMode::Walk {
            return fallback;
        }
        let (x_pre, xd_pre) = self.predict_preimpact_com(model, state);
        let xd_des =
            desired_preimpact_speed(&self.command, model.gravity(), self.config.step_duration);
        foot_placement(x_pre, xd_pre, xd_des, self.config.k_v, self.config.k_p)
    }

    /// Advance the gait machine by `dt` and produce the tick's references.
    /// `swing_normal_force` is the measured vertical contact force of the
    /// current swing foot (for touch-down detection).
    pub fn tick(
        &mut self,
        model: &RobotModel,
        state: &GeneralizedState,
        swing_normal_force: f64,
        dt: f64,
    ) -> (TaskReferences, [ContactPhase; 2], GaitEvents) {
        let mut events = GaitEvents::default();
        let (z_ref, pitch_ref) = base_reference(&self.command);
        let mut refs = TaskReferences {
            base_height: TaskTarget { pos: z_ref, vel: 0.0, acc: 0.0 },
            base_pitch: TaskTarget { pos: pitch_ref, vel: 0.0, acc: 0.0 },
            feet: [
                PointTarget { pos: self.support_ref[0], ..Default::default() },
                PointTarget { pos: self.support_ref[1], ..Default::default() },
            ],
            base_x: None,
        };
        if self.mode == GaitMode::Stand {
            // Standing needs sagittal feedback; center the base between the
            // feet. Walking leaves the sagittal motion to the step dynamics.
            refs.base_x = Some(TaskTarget {
                pos: 0.5 * (self.support_ref[0].x + self.support_ref[1].x),
                vel: 0.0,
                acc: 0.0,
            });
            return (refs, [ContactPhase::Stance; 2], events);
        }
        if self.mode == GaitMode::WeightShift {
            self.shift_timer += dt;
            let support = self.support_ref[self.first_swing.other() as usize].x;
            refs.base_x = Some(TaskTarget { pos: support, vel: 0.0, acc: 0.0 });
            if self.shift_timer >= self.config.weight_shift_time {
                self.mode = GaitMode::Walk;
                events.liftoff = Some(self.first_swing);
                let leg = self.first_swing;
                self.begin_swing(model, state, leg);
            } else {
                return (refs, [ContactPhase::Stance; 2], events);
            }
        }

        self.step_timer += dt;
        // Touch-down detection: sustained vertical force after the swing has
        // had time to leave the ground.
        if self.step_timer > 0.5 * self.config.step_duration
            && swing_normal_force >= self.config.touchdown_force
        {
            self.touchdown_accum += dt;
        } else {
            self.touchdown_accum = 0.0;
        }
        if self.touchdown_accum >= self.config.touchdown_hold {
            // Exchange support: the swing foot becomes stance at its current
            // location and the other foot lifts off immediately.
            let fk = forward_kinematics(model, &state.q);
            let landed = self.swing_leg;
            self.support_ref[landed as usize] = Vec2::new(fk.feet[landed as usize].x, 0.0);
            events.touchdown = Some(landed);
            let next = landed.other();
            events.liftoff = Some(next);
            self.begin_swing(model, state, next);
        } else if self.step_timer < 0.9 * SWING_X_FRACTION * self.config.step_duration {
            // Live retargeting, slew-limited: the raw prediction amplifies
            // torso motion early in the swing and the heavy-leg reaction
            // would pump the step cycle; the limit lets the target converge
            // smoothly while the prediction itself sharpens toward impact.
            // Once the x motion has completed the target stays frozen.
            let current = self.swing.x.sample(self.swing.duration).0;
            let raw = self.placement_target(model, state, current);
            let slew = self.config.retarget_rate * dt;
            let target = current + (raw - current).clamp(-slew, slew);
            self.swing.retarget(self.step_timer, target);
        }

        let mut contact = [ContactPhase::Stance; 2];
        contact[self.swing_leg as usize] = ContactPhase::Swing;
        refs.feet[self.swing_leg as usize] = self.swing.sample(self.step_timer);
        refs.feet[self.swing_leg.other() as usize] =
            PointTarget { pos: self.support_ref[self.swing_leg.other() as usize], ..Default::default() };
        (refs, contact, events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn base_reference_passes_command_through() {
        for h in [0.40, 0.44] {
            let (z, pitch) = base_reference(&Command { base_height: h, speed: 0.3 });
            assert_relative_eq!(z, h);
            assert_relative_eq!(pitch, 0.0);
        }
    }

    #[test]
    fn placement_law_reference_cases() {
        // Stationary: step under the predicted center of mass.
        assert_relative_eq!(foot_placement(0.3, 0.0, 0.0, 0.16, 0.08), 0.3);
        // Tracking at the desired speed: pure velocity feedback.
        assert_relative_eq!(foot_placement(0.0, 1.0, 1.0, 0.16, 0.08), 0.16);
        assert_relative_eq!(foot_placement(0.1, 0.5, 0.2, 0.16, 0.08), 0.1 + 0.08 + 0.08 * 0.3);
    }

    #[test]
    fn desired_speed_zero_and_monotone() {
        let g = 9.81;
        let cmd0 = Command { base_height: 0.40, speed: 0.0 };
        assert_relative_eq!(desired_preimpact_speed(&cmd0, g, 0.35), 0.0);
        let mut last = 0.0;
        for k in 1..10 {
            let cmd = Command { base_height: 0.40, speed: 0.1 * k as f64 };
            let v = desired_preimpact_speed(&cmd, g, 0.35);
            assert!(v > last);
            last = v;
        }
        // The boost factor exceeds one.
        let v = desired_preimpact_speed(&Command { base_height: 0.40, speed: 1.0 }, g, 0.35);
        assert!(v > 1.0);
    }

    #[test]
    fn pendulum_flow_reference_cases() {
        // Zero velocity, zero horizon: the current state.
        let (x, xd) = pendulum_flow(0.2, 0.0, 0.2, 5.0, 0.0);
        assert_relative_eq!(x, 0.2);
        assert_relative_eq!(xd, 0.0);
        // Ballistic limit: over the support point with lambda -> 0 the
        // prediction approaches x + xd * T.
        let (x, _) = pendulum_flow(0.0, 1.0, 0.0, 1e-5, 0.2);
        assert_relative_eq!(x, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn swing_boundary_conditions() {
        let liftoff = Vec2::new(0.05, 0.0);
        let apex = 0.06;
        let dur = 0.35;
        let start = swing_trajectory(liftoff, 0.20, apex, dur, 0.0);
        assert_relative_eq!(start.pos.x, 0.05, epsilon = 1e-12);
        assert_relative_eq!(start.pos.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(start.vel.x, 0.0, epsilon = 1e-12);
        let end = swing_trajectory(liftoff, 0.20, apex, dur, dur);
        assert_relative_eq!(end.pos.x, 0.20, epsilon = 1e-12);
        assert_relative_eq!(end.pos.y, 0.0, epsilon = 1e-10);
        assert_relative_eq!(end.vel.x, 0.0, epsilon = 1e-10);
        let mid = swing_trajectory(liftoff, 0.20, apex, dur, 0.5 * dur);
        assert_relative_eq!(mid.pos.y, apex, epsilon = 1e-12);
    }

    #[test]
    fn retargeting_keeps_position_and_velocity_continuous() {
        let liftoff = Vec2::new(0.0, 0.0);
        let dur = 0.35;
        let mut profile = SwingProfile::new(liftoff, 0.20, 0.06, dur, 0.0);
        let t_switch = 0.5 * dur;
        let before = profile.sample(t_switch);
        profile.retarget(t_switch, 0.30);
        let after = profile.sample(t_switch);
        assert_relative_eq!(before.pos.x, after.pos.x, epsilon = 1e-9);
        assert_relative_eq!(before.vel.x, after.vel.x, epsilon = 1e-9);
        // New endpoint is honored.
        let end = profile.sample(dur);
        assert_relative_eq!(end.pos.x, 0.30, epsilon = 1e-9);
        assert!(end.vel.x.abs() < 1e-9);
    }

    #[test]
    fn swing_extension_descends_past_nominal_duration() {
        let profile = SwingProfile::new(Vec2::zeros(), 0.1, 0.06, 0.35, 0.0);
        let a = profile.sample(0.36);
        let b = profile.sample(0.40);
        assert!(b.pos.y < a.pos.y);
        assert!(a.pos.y < 0.005);
    }
}
