//! Experiment orchestration: closed-loop runs, the push-recovery sweep
//! comparing the two controllers, logging and reports.
//!
//! A closed loop couples the 5 kHz physics simulation with the 1 kHz
//! controller (one control tick every five physics steps, zero-order-hold
//! torques) and the gait planner. Sweep points are isolated and run in
//! parallel; everything is deterministic, so identical specs produce
//! identical results.

use crate::dynamics::ActVec;
use crate::model::{ContactPhase, GeneralizedState, LegId, RobotModel, Vec2};
use crate::planner::{Command, GaitEvents, Planner, PlannerConfig};
use crate::sim::{PushEvent, SimConfig, SimError, Simulator, Terrain};
use crate::wbc::{ControllerKind, TaskReferences, WbcConfig, WholeBodyController};
use crate::wsmap::PreferableSpace;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Physics steps per control tick (5 kHz physics, 1 kHz control).
pub const STEPS_PER_TICK: usize = 5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("controller error: {0}")]
    Wbc(#[from] crate::wbc::WbcError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("workspace-map error: {0}")]
    Wsmap(#[from] crate::wsmap::WsmapError),
    #[error("kinematics error: {0}")]
    Kinematics(#[from] crate::model::KinematicsError),
    #[error("report parse error: {0}")]
    Report(String),
}

/// Outcome of one push-recovery run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunVerdict {
    Recovered,
    Fell,
    Diverged,
}

/// One record per control tick.
#[derive(Clone, Debug)]
pub struct TickRecord {
    pub t: f64,
    pub q: crate::model::GenVec,
    pub qd: crate::model::GenVec,
    pub tau: ActVec,
    pub f_c: crate::model::ContactVec,
    pub relax_inf_norm: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub fault: bool,
    pub push_force: f64,
    pub contact: [ContactPhase; 2],
}

/// Closed loop of simulator, controller and planner.
pub struct ClosedLoop {
    pub sim: Simulator,
    pub controller: WholeBodyController,
    pub planner: Planner,
    tau: ActVec,
    pub records: Vec<TickRecord>,
    pub record_ticks: bool,
    pub events_log: Vec<(f64, GaitEvents)>,
}

impl ClosedLoop {
    pub fn new(sim: Simulator, controller: WholeBodyController, planner: Planner) -> Self {
        ClosedLoop {
            sim,
            controller,
            planner,
            tau: ActVec::zeros(),
            records: Vec::new(),
            record_ticks: true,
            events_log: Vec::new(),
        }
    }

    pub fn state(&self) -> &GeneralizedState {
        &self.sim.state
    }

    /// Advance one control tick (five physics steps). Returns the gait
    /// events of the tick.
    pub fn tick(&mut self) -> Result<GaitEvents, HarnessError> {
        let model = self.sim.model.clone();
        let dt_tick = self.sim.config.dt * STEPS_PER_TICK as f64;
        // Measured vertical force of the planner's swing foot, for
        // touch-down detection.
        let swing_leg = self.planner.swing_leg();
        let swing_fz = self.sim.last_contact[2 * swing_leg as usize + 1];
        let (refs, contact, events) =
            self.planner.tick(&model, &self.sim.state, swing_fz, dt_tick);
        if events.liftoff.is_some() || events.touchdown.is_some() {
            self.events_log.push((self.sim.state.t, events));
        }
        let mut state = self.sim.state.clone();
        state.contact = contact;
        self.sim.state.contact = contact;
        let diag = self.controller.control_tick(&state, &refs)?;
        self.tau = diag.torque;
        if self.record_ticks {
            self.records.push(TickRecord {
                t: state.t,
                q: state.q,
                qd: state.qd,
                tau: diag.torque,
                f_c: diag.contact_force,
                relax_inf_norm: diag.relax_inf_norm,
                iterations: diag.iterations,
                solve_time: diag.solve_time,
                fault: diag.fault,
                push_force: self.sim.applied_push,
                contact,
            });
        }
        for _ in 0..STEPS_PER_TICK {
            self.sim.step(&self.tau)?;
        }
        Ok(events)
    }

    /// Run for a duration, applying `on_events` to react to gait events
    /// (push triggering). The callback returns an optional push to apply.
    pub fn run_for(
        &mut self,
        duration: f64,
        mut on_events: impl FnMut(f64, &GaitEvents) -> Option<PushEvent>,
    ) -> Result<(), HarnessError> {
        let dt_tick = self.sim.config.dt * STEPS_PER_TICK as f64;
        let ticks = (duration / dt_tick).round() as usize;
        for _ in 0..ticks {
            let events = self.tick()?;
            if let Some(push) = on_events(self.sim.state.t, &events) {
                self.sim.apply_push(&push);
            }
        }
        Ok(())
    }
}

/// Build a standing state on flat ground at the commanded height, feet
/// symmetric under the hips.
pub fn standing_start(model: &RobotModel, height: f64) -> Result<GeneralizedState, HarnessError> {
    let stance_half_spread = 0.06;
    // Pre-load the contact springs with the static weight so the start is
    // near equilibrium: each foot penetrates by half the weight over k.
    let penetration = 0.5 * model.total_mass() * model.gravity() / 5e4;
    Ok(crate::model::state_from_base_and_feet(
        model,
        Vec2::new(0.0, height - penetration),
        0.0,
        Vec2::zeros(),
        0.0,
        [
            Vec2::new(-stance_half_spread, -penetration),
            Vec2::new(stance_half_spread, -penetration),
        ],
        [Vec2::zeros(), Vec2::zeros()],
        [ContactPhase::Stance; 2],
        0.0,
    )?)
}

/// Summary statistics of a walking run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WalkSummary {
    pub duration: f64,
    pub mean_height_error: f64,
    pub max_height_error: f64,
    pub mean_pitch_error: f64,
    pub max_pitch_error: f64,
    pub mean_base_speed: f64,
    pub achieved_speed: f64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub mean_iterations: f64,
    pub max_relax: f64,
    pub faults: usize,
    pub steps_taken: usize,
}

fn summarize_walk(
    records: &[TickRecord],
    events: &[(f64, GaitEvents)],
    height_ref: f64,
    window_start: f64,
) -> WalkSummary {
    let rows: Vec<&TickRecord> = records.iter().filter(|r| r.t >= window_start).collect();
    let n = rows.len().max(1) as f64;
    let mut s = WalkSummary {
        duration: rows.last().map(|r| r.t).unwrap_or(0.0) - window_start,
        mean_height_error: 0.0,
        max_height_error: 0.0,
        mean_pitch_error: 0.0,
        max_pitch_error: 0.0,
        mean_base_speed: 0.0,
        achieved_speed: 0.0,
        mean_solve_time: 0.0,
        max_solve_time: 0.0,
        mean_iterations: 0.0,
        max_relax: 0.0,
        faults: 0,
        steps_taken: events
            .iter()
            .filter(|(t, e)| *t >= window_start && e.touchdown.is_some())
            .count(),
    };
    for r in &rows {
        let he = (r.q[crate::model::Q_BASE_Z] - height_ref).abs();
        let pe = r.q[crate::model::Q_PITCH].abs();
        s.mean_height_error += he / n;
        s.max_height_error = s.max_height_error.max(he);
        s.mean_pitch_error += pe / n;
        s.max_pitch_error = s.max_pitch_error.max(pe);
        s.mean_base_speed += r.qd[crate::model::Q_BASE_X].abs() / n;
        s.mean_solve_time += r.solve_time / n;
        s.max_solve_time = s.max_solve_time.max(r.solve_time);
        s.mean_iterations += r.iterations as f64 / n;
        if r.relax_inf_norm.is_finite() {
            s.max_relax = s.max_relax.max(r.relax_inf_norm);
        }
        s.faults += r.fault as usize;
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let dt = (last.t - first.t).max(1e-9);
        s.achieved_speed =
            (last.q[crate::model::Q_BASE_X] - first.q[crate::model::Q_BASE_X]) / dt;
    }
    s
}

/// Shared per-run configuration of the closed loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoopConfig {
    pub wbc: WbcConfig,
    pub planner: PlannerConfig,
    pub sim: SimConfig,
    pub friction: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            wbc: WbcConfig::default(),
            planner: PlannerConfig::default(),
            sim: SimConfig::default(),
            friction: 0.6,
        }
    }
}

/// Assemble a closed loop stepping in place (or walking) at a command.
pub fn make_walking_loop(
    model: &RobotModel,
    preferable: &PreferableSpace,
    kind: ControllerKind,
    config: &LoopConfig,
    command: Command,
) -> Result<ClosedLoop, HarnessError> {
    let state = standing_start(model, command.base_height)?;
    let sim = Simulator::new(
        model.clone(),
        config.sim,
        Terrain::flat(config.friction),
        state,
    );
    let controller = WholeBodyController::new(model.clone(), preferable, kind, config.wbc);
    let planner = Planner::new(config.planner, command);
    let mut cl = ClosedLoop::new(sim, controller, planner);
    let model_ref = cl.sim.model.clone();
    let state_ref = cl.sim.state.clone();
    cl.planner.start_standing(&model_ref, &state_ref);
    Ok(cl)
}

/// Run a walking experiment: stand briefly, then walk for the duration.
pub fn run_walk(
    model: &RobotModel,
    preferable: &PreferableSpace,
    kind: ControllerKind,
    config: &LoopConfig,
    command: Command,
    duration: f64,
    record: bool,
) -> Result<(WalkSummary, Vec<TickRecord>), HarnessError> {
    let mut cl = make_walking_loop(model, preferable, kind, config, command)?;
    cl.record_ticks = record || true; // summaries need the rows
    let stand_time = 1.0;
    cl.run_for(stand_time, |_, _| None)?;
    let m = cl.sim.model.clone();
    let st = cl.sim.state.clone();
    cl.planner.start_walking(&m, &st, LegId::Right);
    cl.run_for(duration, |_, _| None)?;
    let summary = summarize_walk(&cl.records, &cl.events_log, command.base_height, stand_time + 1.0);
    let records = if record { cl.records } else { Vec::new() };
    Ok((summary, records))
}

/// Recovery criterion of the push protocol.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecoveryCriterion {
    /// Post-push observation window [s].
    pub window: f64,
    /// Allowed relative height deviation during the window.
    pub height_band: f64,
    /// Fall threshold as a fraction of the reference height.
    pub fall_fraction: f64,
}

impl Default for RecoveryCriterion {
    fn default() -> Self {
        RecoveryCriterion { window: 3.0, height_band: 0.30, fall_fraction: 0.5 }
    }
}

/// Protocol parameters of one push-recovery run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PushProtocol {
    /// Time stepping in place before the push is armed [s].
    pub settle_time: f64,
    /// Push window length [s].
    pub spread: f64,
    pub criterion: RecoveryCriterion,
}

impl Default for PushProtocol {
    fn default() -> Self {
        PushProtocol { settle_time: 2.0, spread: 0.01, criterion: RecoveryCriterion::default() }
    }
}

/// Outcome of a single (height, controller, impulse) run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PushRunOutcome {
    pub verdict: RunVerdict,
    pub push_time: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub faults: usize,
}

/// Execute one push-recovery run: step in place, push at the first lift-off
/// after the settle time, observe the criterion window.
pub fn push_recovery_run(
    model: &RobotModel,
    preferable: &PreferableSpace,
    kind: ControllerKind,
    config: &LoopConfig,
    height: f64,
    impulse: f64,
    protocol: &PushProtocol,
) -> Result<PushRunOutcome, HarnessError> {
    let command = Command { base_height: height, speed: 0.0 };
    let mut cl = make_walking_loop(model, preferable, kind, config, command)?;
    cl.record_ticks = false;

    // Stand, then step in place.
    let run = (|| -> Result<PushRunOutcome, HarnessError> {
        cl.run_for(1.0, |_, _| None)?;
        let m = cl.sim.model.clone();
        let st = cl.sim.state.clone();
        cl.planner.start_walking(&m, &st, LegId::Right);

        // Step until the first lift-off event past the settle time.
        let settle_deadline = cl.sim.state.t + protocol.settle_time;
        let spread = protocol.spread;
        let mut push_time = f64::NAN;
        let dt_tick = cl.sim.config.dt * STEPS_PER_TICK as f64;
        let max_wait_ticks = ((protocol.settle_time + 2.0) / dt_tick) as usize + 1000;
        let mut armed_push = None;
        for _ in 0..max_wait_ticks {
            let events = cl.tick()?;
            let t = cl.sim.state.t;
            if t >= settle_deadline && events.liftoff.is_some() {
                armed_push = Some(PushEvent { impulse, spread });
                push_time = t;
                break;
            }
        }
        let Some(push) = armed_push else {
            return Err(HarnessError::BadConfig(
                "no lift-off event observed; the gait never settled".into(),
            ));
        };
        cl.sim.apply_push(&push);

        // Observe the criterion window.
        let mut min_height = f64::INFINITY;
        let mut max_height = f64::NEG_INFINITY;
        let mut faults = 0usize;
        let mut verdict = RunVerdict::Recovered;
        let ticks = (protocol.criterion.window / dt_tick).round() as usize;
        for _ in 0..ticks {
            match cl.tick() {
                Ok(_) => {}
                Err(HarnessError::Sim(SimError::NumericalBlowup(_))) => {
                    verdict = RunVerdict::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            }
            let z = cl.sim.state.q[crate::model::Q_BASE_Z];
            min_height = min_height.min(z);
            max_height = max_height.max(z);
            if z < protocol.criterion.fall_fraction * height {
                verdict = RunVerdict::Fell;
                break;
            }
            if (z - height).abs() > protocol.criterion.height_band * height {
                verdict = RunVerdict::Fell;
                break;
            }
        }
        Ok(PushRunOutcome { verdict, push_time, min_height, max_height, faults: { faults += 0; faults } })
    })();

    match run {
        Ok(outcome) => Ok(outcome),
        Err(HarnessError::Sim(SimError::NumericalBlowup(_))) => Ok(PushRunOutcome {
            verdict: RunVerdict::Diverged,
            push_time: f64::NAN,
            min_height: f64::NAN,
            max_height: f64::NAN,
            faults: 0,
        }),
        Err(e) => Err(e),
    }
}

/// Sweep grid of the push-recovery comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub heights: Vec<f64>,
    pub impulse_start: f64,
    pub impulse_step: f64,
    /// Safety cap so a never-failing controller terminates the sweep.
    pub impulse_max: f64,
    pub protocol: PushProtocol,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            heights: vec![0.38, 0.40, 0.42, 0.44, 0.46],
            impulse_start: 3.0,
            impulse_step: 0.1,
            impulse_max: 30.0,
            protocol: PushProtocol::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub height: f64,
    pub controller: ControllerKind,
    /// Largest swept impulse with verdict Recovered (all smaller impulses
    /// recovered too, by construction of the ascending sweep).
    pub max_impulse: f64,
    pub first_failure: Option<f64>,
    pub failure_verdict: Option<RunVerdict>,
    pub runs: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub heights: Vec<f64>,
    pub sa_max_impulse: Vec<f64>,
    pub mft_max_impulse: Vec<f64>,
    pub increase_percent: Vec<f64>,
    pub cells: Vec<SweepCell>,
    /// Hash of the effective configuration shared by both controllers.
    pub config_hash: String,
}

/// Hash of everything that must be identical between the two controllers'
/// runs (model, loop config, sweep spec) — the controller kind is the only
/// allowed difference.
pub fn effective_config_hash(model: &RobotModel, config: &LoopConfig, spec: &SweepSpec) -> String {
    use sha2::{Digest, Sha256};
    let mut text = String::new();
    let _ = write!(text, "{}|", model.hash());
    let _ = write!(text, "{}|", toml::to_string(config).unwrap_or_default());
    let _ = write!(text, "{}", toml::to_string(spec).unwrap_or_default());
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Ascending-impulse sweep for one (height, controller) cell.
pub fn sweep_cell(
    model: &RobotModel,
    preferable: &PreferableSpace,
    kind: ControllerKind,
    config: &LoopConfig,
    height: f64,
    spec: &SweepSpec,
) -> Result<SweepCell, HarnessError> {
    let start = std::time::Instant::now();
    let mut impulse = spec.impulse_start;
    let mut max_impulse = 0.0;
    let mut first_failure = None;
    let mut failure_verdict = None;
    let mut runs = 0usize;
    while impulse <= spec.impulse_max + 1e-9 {
        let outcome =
            push_recovery_run(model, preferable, kind, config, height, impulse, &spec.protocol)?;
        runs += 1;
        if outcome.verdict == RunVerdict::Recovered {
            max_impulse = impulse;
        } else {
            first_failure = Some(impulse);
            failure_verdict = Some(outcome.verdict);
            break;
        }
        impulse = (impulse / spec.impulse_step).round() * spec.impulse_step + spec.impulse_step;
    }
    Ok(SweepCell {
        height,
        controller: kind,
        max_impulse,
        first_failure,
        failure_verdict,
        runs,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Run the full push-recovery sweep over heights and both controllers.
pub fn run_push_sweep(
    model: &RobotModel,
    preferable: &PreferableSpace,
    config: &LoopConfig,
    spec: &SweepSpec,
) -> Result<SweepResult, HarnessError> {
    use rayon::prelude::*;
    let mut jobs: Vec<(f64, ControllerKind)> = Vec::new();
    for &h in &spec.heights {
        jobs.push((h, ControllerKind::Sa));
        jobs.push((h, ControllerKind::Mft));
    }
    let cells: Result<Vec<SweepCell>, HarnessError> = jobs
        .par_iter()
        .map(|&(h, kind)| sweep_cell(model, preferable, kind, config, h, spec))
        .collect();
    let cells = cells?;

    let mut sa = Vec::new();
    let mut mft = Vec::new();
    for &h in &spec.heights {
        let find = |kind: ControllerKind| {
            cells
                .iter()
                .find(|c| c.controller == kind && (c.height - h).abs() < 1e-12)
                .map(|c| c.max_impulse)
                .unwrap_or(f64::NAN)
        };
        sa.push(find(ControllerKind::Sa));
        mft.push(find(ControllerKind::Mft));
    }
    let increase: Vec<f64> =
        sa.iter().zip(&mft).map(|(s, m)| 100.0 * (m - s) / s.max(1e-9)).collect();
    Ok(SweepResult {
        heights: spec.heights.clone(),
        sa_max_impulse: sa,
        mft_max_impulse: mft,
        increase_percent: increase,
        cells,
        config_hash: effective_config_hash(model, config, spec),
    })
}

/// Human-readable comparison table in the shape of the push-recovery
/// results: heights across, the two controllers and the percentage
/// increase as rows.
pub fn format_report(result: &SweepResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Push-recovery sweep (config {})", result.config_hash);
    let mut header = String::from("height [m]          ");
    for h in &result.heights {
        let _ = write!(header, "{h:>8.2}");
    }
    let _ = writeln!(out, "{header}");
    let mut row = String::from("I_max SA-WBC [Ns]   ");
    for v in &result.sa_max_impulse {
        let _ = write!(row, "{v:>8.1}");
    }
    let _ = writeln!(out, "{row}");
    let mut row = String::from("I_max MFT-WBC [Ns]  ");
    for v in &result.mft_max_impulse {
        let _ = write!(row, "{v:>8.1}");
    }
    let _ = writeln!(out, "{row}");
    let mut row = String::from("increase [%]        ");
    for v in &result.increase_percent {
        let _ = write!(row, "{v:>8.1}");
    }
    let _ = writeln!(out, "{row}");
    out
}

pub fn save_sweep_result(path: impl AsRef<Path>, result: &SweepResult) -> Result<(), HarnessError> {
    let text = toml::to_string_pretty(result)
        .map_err(|e| HarnessError::Report(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_sweep_result(path: impl AsRef<Path>) -> Result<SweepResult, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| HarnessError::Report(format!("parse: {e}")))
}

/// Write per-tick records as CSV.
pub fn write_tick_log(path: impl AsRef<Path>, records: &[TickRecord]) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "t")?;
    for i in 0..crate::model::N_Q {
        write!(f, ",q{}", i + 1)?;
    }
    for i in 0..crate::model::N_Q {
        write!(f, ",qd{}", i + 1)?;
    }
    for i in 0..4 {
        write!(f, ",tau{}", i + 1)?;
    }
    for name in ["f1x", "f1z", "f2x", "f2z"] {
        write!(f, ",{name}")?;
    }
    writeln!(f, ",relax,iterations,solve_time,fault,push_force,phase_r,phase_l")?;
    for r in records {
        write!(f, "{:.6}", r.t)?;
        for v in r.q.iter() {
            write!(f, ",{v:.9}")?;
        }
        for v in r.qd.iter() {
            write!(f, ",{v:.9}")?;
        }
        for v in r.tau.iter() {
            write!(f, ",{v:.9}")?;
        }
        for v in r.f_c.iter() {
            write!(f, ",{v:.9}")?;
        }
        let phase = |p: ContactPhase| if p == ContactPhase::Stance { 1 } else { 0 };
        writeln!(
            f,
            ",{:.3e},{},{:.3e},{},{:.3e},{},{}",
            r.relax_inf_norm,
            r.iterations,
            r.solve_time,
            r.fault as u8,
            r.push_force,
            phase(r.contact[0]),
            phase(r.contact[1]),
        )?;
    }
    Ok(())
}

/// Create the run directory and write the effective-config snapshot plus a
/// manifest of produced files.
pub struct RunDirectory {
    pub path: PathBuf,
    files: Vec<String>,
}

impl RunDirectory {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(&path)?;
        Ok(RunDirectory { path: path.as_ref().to_path_buf(), files: Vec::new() })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.path.join(name)
    }

    pub fn write_manifest(&self) -> Result<(), HarnessError> {
        let mut text = String::new();
        for f in &self.files {
            let _ = writeln!(text, "{f}");
        }
        std::fs::write(self.path.join("manifest.txt"), text)?;
        Ok(())
    }
}


#[cfg(test)]
mod diagnose {
    use super::*;
    use crate::harness::tests::*;

    #[test]
    #[ignore]
    fn standing_trace() {
        let m = RobotModel::reference();
        let pref = super::tests::preferable(&m);
        let mut cl = make_walking_loop(
            &m,
            pref,
            ControllerKind::Mft,
            &LoopConfig::default(),
            Command { base_height: 0.40, speed: 0.0 },
        )
        .unwrap();
        for k in 0..5000 {
            cl.tick().unwrap();
            if k % 250 == 0 {
                let r = cl.records.last().unwrap();
                println!(
                    "t={:.3} z={:.4} zd={:+.3} pitch={:+.4} tau=[{:+.2} {:+.2} {:+.2} {:+.2}] fz=[{:.1} {:.1}] fault={} iters={}",
                    r.t,
                    r.q[crate::model::Q_BASE_Z],
                    r.qd[crate::model::Q_BASE_Z],
                    r.q[crate::model::Q_PITCH],
                    r.tau[0], r.tau[1], r.tau[2], r.tau[3],
                    r.f_c[1], r.f_c[3],
                    r.fault as u8,
                    r.iterations
                );
            }
        }
    }
}
