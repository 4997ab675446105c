//! Closed-loop simulator: rigid trunk plant under foot forces, swing-leg
//! kinematics, and the full planner/controller stack at realistic rates.
//!
//! The plant integrates the trunk as a floating rigid body with the
//! gyroscopic torque kept (the controller drops it; the plant must not).
//! Stance feet are pinned (no slip), swing feet follow a half-ellipse that
//! retargets when the planner adjusts a foothold. The controller runs at
//! 250 Hz on top of a 1 kHz physics step, with force plans refreshed at
//! 25 Hz through the latest-plan mailbox.

use crate::compensation::{
    compensation_wrench, cross_inertia, distribute_wrench, JointVector, LegModel,
};
use crate::foothold::{
    build_contact_sequence, ContactSequence, FootholdConfig, FootholdError, PlannerState,
};
use crate::gait::{build_schedule, ContactFlags, GaitError, GaitParams, LEG_COUNT};
use crate::model::{
    condense, continuous_matrices, discretize_zoh, gravity_vector, rot_z, skew, BodyGeometry,
    DiscreteLtv, ModelError, RobotParams, RobotState, PITCH_SINGULARITY_MARGIN,
};
use crate::mpc::{
    build_qp, horizon_flags, solve_mpc, wrench_from_plan, MpcWeights, PlanSlot, Wrench,
};
use crate::reference::{build_reference, UserCommand};
use crate::terrain::{HeightMap, TerrainError};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad simulation config: {0}")]
    Config(String),
    #[error("pitch reached the representation singularity at t = {t:.3}")]
    PitchSingularity { t: f64 },
    #[error(transparent)]
    Gait(#[from] GaitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

/// One external push: a wrench held constant over a time window.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisturbancePulse {
    pub start: f64,
    pub duration: f64,
    /// Torque (x, y, z) then force (x, y, z).
    pub wrench: [f64; 6],
}

impl DisturbancePulse {
    /// Pure force at the center of mass.
    pub fn force(start: f64, duration: f64, force: Vector3<f64>) -> Self {
        Self {
            start,
            duration,
            wrench: [0.0, 0.0, 0.0, force.x, force.y, force.z],
        }
    }

    pub fn as_wrench(&self) -> Wrench {
        Wrench::from_column_slice(&self.wrench)
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// Piecewise-constant operator command, active from `start` onward.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CommandSegment {
    pub start: f64,
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
}

/// Optional additive state-estimate noise (deterministic under the seed).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub position: f64,
    pub velocity: f64,
}

/// Controller stages that can be switched off for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Replace the predictive horizon with a single-step balance QP.
    Mpc,
    /// Drop the leg-inertia compensation wrench.
    Ic,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Plant integration step (s).
    pub physics_step: f64,
    /// Controller tick rate (Hz).
    pub task_rate: f64,
    /// Force-plan refresh rate (Hz).
    pub mpc_rate: f64,
    /// Prediction steps per plan.
    pub horizon: usize,
    pub duration: f64,
    pub seed: u64,
    pub gait: GaitParams,
    pub params: RobotParams,
    pub geometry: BodyGeometry,
    pub legs: LegModel,
    pub foothold: FootholdConfig,
    pub weights: MpcWeights,
    pub commands: Vec<CommandSegment>,
    pub disturbances: Vec<DisturbancePulse>,
    pub ablation: Ablation,
    pub noise: Option<NoiseConfig>,
    /// Start position in the plane; height comes from the terrain.
    pub start_xy: Vector2<f64>,
    pub start_yaw: f64,
    /// Roll or pitch beyond this magnitude counts as a fall (rad).
    pub fall_angle: f64,
    /// Body height above terrain below this counts as a fall (m).
    pub min_clearance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            physics_step: 1e-3,
            task_rate: 250.0,
            mpc_rate: 25.0,
            horizon: 20,
            duration: 10.0,
            seed: 0,
            gait: GaitParams::trot(0.6, 1.4),
            params: RobotParams::default(),
            geometry: BodyGeometry::default(),
            legs: LegModel::default(),
            foothold: FootholdConfig::default(),
            weights: MpcWeights::default(),
            commands: Vec::new(),
            disturbances: Vec::new(),
            ablation: Ablation::None,
            noise: None,
            start_xy: Vector2::zeros(),
            start_yaw: 0.0,
            fall_angle: 0.7,
            min_clearance: 0.2,
        }
    }
}

impl SimConfig {
    pub fn task_period(&self) -> f64 {
        1.0 / self.task_rate
    }

    pub fn mpc_period(&self) -> f64 {
        1.0 / self.mpc_rate
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.physics_step > 0.0) || !(self.task_rate > 0.0) || !(self.mpc_rate > 0.0) {
            return Err(SimError::Config("rates and steps must be positive".into()));
        }
        let substeps = self.task_period() / self.physics_step;
        if (substeps - substeps.round()).abs() > 1e-6 || substeps < 1.0 - 1e-9 {
            return Err(SimError::Config(format!(
                "physics step {} must divide the task period {}",
                self.physics_step,
                self.task_period()
            )));
        }
        let ticks = self.mpc_period() / self.task_period();
        if (ticks - ticks.round()).abs() > 1e-6 || ticks < 1.0 - 1e-9 {
            return Err(SimError::Config(format!(
                "task period {} must divide the plan period {}",
                self.task_period(),
                self.mpc_period()
            )));
        }
        if self.horizon == 0 {
            return Err(SimError::Config("horizon must be at least 1".into()));
        }
        if !(self.duration > 0.0) {
            return Err(SimError::Config("duration must be positive".into()));
        }
        Ok(())
    }

    pub fn command_at(&self, t: f64) -> UserCommand {
        let mut current = UserCommand::default();
        for seg in &self.commands {
            if seg.start <= t + 1e-12 {
                current = UserCommand {
                    velocity: Vector2::new(seg.velocity[0], seg.velocity[1]),
                    yaw_rate: seg.yaw_rate,
                };
            }
        }
        current
    }
}

/// Rotation exponential (Rodrigues).
fn rotation_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let angle = w.norm();
    if angle < 1e-12 {
        return Matrix3::identity() + skew(w);
    }
    let k = skew(&(w / angle));
    Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
}

/// ZYX angles from a rotation matrix, keeping yaw continuous with the
/// previous sample.
fn euler_from_rotation(
    r: &Matrix3<f64>,
    previous: &Vector3<f64>,
    t: f64,
) -> Result<Vector3<f64>, SimError> {
    let sin_pitch = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sin_pitch.asin();
    if pitch.abs() >= std::f64::consts::FRAC_PI_2 - PITCH_SINGULARITY_MARGIN {
        return Err(SimError::PitchSingularity { t });
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let mut yaw = r[(1, 0)].atan2(r[(0, 0)]);
    yaw += ((previous.z - yaw) / std::f64::consts::TAU).round() * std::f64::consts::TAU;
    Ok(Vector3::new(roll, pitch, yaw))
}

/// One plant step: semi-implicit Euler with the rotation integrated on the
/// group. Velocities update from accelerations at the current state, then
/// positions move with the new velocities. The gyroscopic torque is kept.
pub fn step_physics(
    params: &RobotParams,
    state: &RobotState,
    feet: &[Vector3<f64>; LEG_COUNT],
    forces: &[Vector3<f64>; LEG_COUNT],
    extra: &Wrench,
    dt: f64,
    t: f64,
) -> Result<RobotState, SimError> {
    let rotation = state.rotation();
    let inertia_world = rotation * params.inertia_matrix() * rotation.transpose();

    let mut force = Vector3::new(extra[3], extra[4], extra[5]);
    let mut torque = Vector3::new(extra[0], extra[1], extra[2]);
    for leg in 0..LEG_COUNT {
        force += forces[leg];
        torque += (feet[leg] - state.position).cross(&forces[leg]);
    }
    let accel = force / params.mass + gravity_vector();
    let omega_dot = inertia_world
        .try_inverse()
        .ok_or(ModelError::SingularInertia)?
        * (torque - state.omega.cross(&(inertia_world * state.omega)));

    let velocity = state.velocity + dt * accel;
    let omega = state.omega + dt * omega_dot;
    let position = state.position + dt * velocity;
    let new_rotation = rotation_exp(&(omega * dt)) * rotation;
    let euler = euler_from_rotation(&new_rotation, &state.euler, t)?;
    Ok(RobotState {
        euler,
        position,
        omega,
        velocity,
    })
}

/// Half-ellipse swing trajectory from lift-off point to touchdown target.
///
/// The foot tracks the straight chord with a sinusoidal height bump peaking
/// mid-swing at `clearance` above the chord.
#[derive(Debug, Clone, Copy)]
pub struct SwingPath {
    pub origin: Vector3<f64>,
    pub target: Vector3<f64>,
    pub clearance: f64,
}

impl SwingPath {
    pub fn position(&self, s: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        self.origin
            + s * (self.target - self.origin)
            + Vector3::new(0.0, 0.0, self.clearance * (std::f64::consts::PI * s).sin())
    }

    pub fn velocity(&self, s: f64, duration: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        ((self.target - self.origin)
            + Vector3::new(
                0.0,
                0.0,
                self.clearance * std::f64::consts::PI * (std::f64::consts::PI * s).cos(),
            ))
            / duration
    }

    pub fn acceleration(&self, s: f64, duration: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        Vector3::new(
            0.0,
            0.0,
            -self.clearance
                * std::f64::consts::PI
                * std::f64::consts::PI
                * (std::f64::consts::PI * s).sin(),
        ) / (duration * duration)
    }

    /// Replans from the current point on this path to a new target,
    /// position-continuous at the switch. The residual bump shrinks with
    /// the remaining swing so a late retarget does not lift the foot again.
    pub fn retarget(&self, s: f64, new_target: Vector3<f64>) -> SwingPath {
        let s = s.clamp(0.0, 1.0);
        SwingPath {
            origin: self.position(s),
            target: new_target,
            clearance: self.clearance * (1.0 - s),
        }
    }
}

#[derive(Debug, Clone)]
enum LegMode {
    Stance,
    Swing {
        path: SwingPath,
        started: f64,
        duration: f64,
        /// Planned touchdown point captured at lift-off, for the
        /// prediction-error metric.
        prediction: Vector3<f64>,
    },
}

/// Reasons a run ended before its configured duration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Failure {
    Fall { t: f64, reason: String },
    Controller { t: f64, message: String },
}

#[derive(Debug, Clone)]
pub enum SimEvent {
    Liftoff {
        t: f64,
        leg: usize,
        prediction: Vector3<f64>,
    },
    Touchdown {
        t: f64,
        leg: usize,
        actual: Vector3<f64>,
        predicted: Vector3<f64>,
        error: f64,
    },
    PlanSolved {
        t: f64,
        iterations: usize,
        objective: f64,
        fallback: bool,
    },
    DisturbanceStart { t: f64, index: usize },
    DisturbanceEnd { t: f64, index: usize },
    Failed { t: f64, what: String },
}

/// One controller-tick record.
#[derive(Debug, Clone)]
pub struct TickRecord {
    pub t: f64,
    pub state: RobotState,
    pub reference: RobotState,
    pub contact: ContactFlags,
    pub feet: [Vector3<f64>; LEG_COUNT],
    pub forces: [Vector3<f64>; LEG_COUNT],
    pub w_mpc: Wrench,
    pub w_l: Wrench,
    pub w_d: Wrench,
    pub distribution_residual: f64,
    pub plan_age: f64,
    pub plan_iterations: usize,
    pub plan_violation: f64,
    /// Most recent touchdown prediction error per leg (0 before the first).
    pub last_error: [f64; LEG_COUNT],
}

pub const SIMLOG_VERSION: &str = "simlog v1";

#[derive(Debug, Clone, Default)]
pub struct SimLog {
    pub ticks: Vec<TickRecord>,
    pub events: Vec<SimEvent>,
}

impl SimLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {SIMLOG_VERSION}\n");
        out.push_str("t,roll,pitch,yaw,x,y,z,wx,wy,wz,vx,vy,vz");
        out.push_str(",ref_roll,ref_pitch,ref_yaw,ref_x,ref_y,ref_z,ref_vx,ref_vy,ref_vz");
        for name in crate::gait::LEG_NAMES {
            out.push_str(&format!(",contact_{}", name.to_lowercase()));
        }
        for name in crate::gait::LEG_NAMES {
            let n = name.to_lowercase();
            out.push_str(&format!(",{n}_x,{n}_y,{n}_z"));
        }
        for name in crate::gait::LEG_NAMES {
            let n = name.to_lowercase();
            out.push_str(&format!(",f_{n}_x,f_{n}_y,f_{n}_z"));
        }
        for block in ["wmpc", "wl", "wd"] {
            for axis in ["tx", "ty", "tz", "fx", "fy", "fz"] {
                out.push_str(&format!(",{block}_{axis}"));
            }
        }
        out.push_str(",dist_residual,plan_age,plan_iterations,plan_violation");
        for name in crate::gait::LEG_NAMES {
            out.push_str(&format!(",e_{}", name.to_lowercase()));
        }
        out.push('\n');
        for r in &self.ticks {
            let mut row = format!("{:.8e}", r.t);
            let mut push = |v: f64| row.push_str(&format!(",{v:.8e}"));
            for v in [r.state.euler, r.state.position, r.state.omega, r.state.velocity] {
                push(v.x);
                push(v.y);
                push(v.z);
            }
            for v in [r.reference.euler, r.reference.position] {
                push(v.x);
                push(v.y);
                push(v.z);
            }
            push(r.reference.velocity.x);
            push(r.reference.velocity.y);
            push(r.reference.velocity.z);
            for leg in 0..LEG_COUNT {
                push(if r.contact[leg] { 1.0 } else { 0.0 });
            }
            for leg in 0..LEG_COUNT {
                push(r.feet[leg].x);
                push(r.feet[leg].y);
                push(r.feet[leg].z);
            }
            for leg in 0..LEG_COUNT {
                push(r.forces[leg].x);
                push(r.forces[leg].y);
                push(r.forces[leg].z);
            }
            for w in [&r.w_mpc, &r.w_l, &r.w_d] {
                for i in 0..6 {
                    push(w[i]);
                }
            }
            push(r.distribution_residual);
            push(r.plan_age);
            push(r.plan_iterations as f64);
            push(r.plan_violation);
            for leg in 0..LEG_COUNT {
                push(r.last_error[leg]);
            }
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn events_to_csv(&self) -> String {
        let mut out = String::from("# simevents v1\nt,event,leg,x,y,z,error,detail\n");
        let fmt = |t: f64,
                   event: &str,
                   leg: Option<usize>,
                   point: Option<Vector3<f64>>,
                   error: Option<f64>,
                   detail: &str| {
            let leg = leg.map(|l| l.to_string()).unwrap_or_default();
            let (x, y, z) = point
                .map(|p| {
                    (
                        format!("{:.8e}", p.x),
                        format!("{:.8e}", p.y),
                        format!("{:.8e}", p.z),
                    )
                })
                .unwrap_or_default();
            let error = error.map(|e| format!("{e:.8e}")).unwrap_or_default();
            format!("{t:.8e},{event},{leg},{x},{y},{z},{error},{detail}\n")
        };
        for e in &self.events {
            out.push_str(&match e {
                SimEvent::Liftoff { t, leg, prediction } => {
                    fmt(*t, "liftoff", Some(*leg), Some(*prediction), None, "")
                }
                SimEvent::Touchdown {
                    t,
                    leg,
                    actual,
                    error,
                    ..
                } => fmt(*t, "touchdown", Some(*leg), Some(*actual), Some(*error), ""),
                SimEvent::PlanSolved {
                    t,
                    iterations,
                    fallback,
                    ..
                } => fmt(
                    *t,
                    "plan",
                    None,
                    None,
                    None,
                    &format!("iters={iterations} fallback={fallback}"),
                ),
                SimEvent::DisturbanceStart { t, index } => {
                    fmt(*t, "disturbance_start", None, None, None, &index.to_string())
                }
                SimEvent::DisturbanceEnd { t, index } => {
                    fmt(*t, "disturbance_end", None, None, None, &index.to_string())
                }
                SimEvent::Failed { t, what } => fmt(*t, "failed", None, None, None, what),
            });
        }
        out
    }
}

/// Per-leg and overall touchdown prediction error statistics.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ErrorStats {
    pub count: usize,
    pub rms: f64,
    pub max: f64,
}

fn error_stats(errors: &[f64]) -> ErrorStats {
    if errors.is_empty() {
        return ErrorStats::default();
    }
    let sum_sq: f64 = errors.iter().map(|e| e * e).sum();
    ErrorStats {
        count: errors.len(),
        rms: (sum_sq / errors.len() as f64).sqrt(),
        max: errors.iter().cloned().fold(0.0, f64::max),
    }
}

/// Wall-clock measurements; excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Timing {
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub mean_plan_build_ms: f64,
    pub max_plan_build_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub completed: bool,
    pub failure: Option<Failure>,
    pub simulated: f64,
    pub ticks: usize,
    pub plans: usize,
    /// Heading-frame forward speed averaged over the final five seconds.
    pub mean_forward_velocity: f64,
    pub commanded_forward_velocity: f64,
    /// RMS of the heading-frame velocity error over the same window.
    pub velocity_rms_error: f64,
    /// Largest planar departure from the start position.
    pub com_drift_max: f64,
    pub foothold_error: [ErrorStats; LEG_COUNT],
    pub foothold_error_overall: ErrorStats,
    /// Worst per-cycle |vertical impulse / (m g T) - 1| over complete
    /// cycles.
    pub vertical_impulse_worst: f64,
    pub max_plan_age: f64,
    pub max_plan_violation: f64,
    pub mean_iterations: f64,
    pub timing: Timing,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: SimLog,
    pub summary: Summary,
}

fn summarize(
    log: &SimLog,
    config: &SimConfig,
    failure: Option<Failure>,
    timing: Timing,
    plans: usize,
) -> Summary {
    let simulated = log.ticks.last().map(|r| r.t).unwrap_or(0.0);
    let window_start = (simulated - 5.0).max(0.0);
    let final_window: Vec<&TickRecord> =
        log.ticks.iter().filter(|r| r.t >= window_start).collect();
    let mean_forward_velocity = if final_window.is_empty() {
        0.0
    } else {
        final_window
            .iter()
            .map(|r| {
                let yaw = r.state.euler.z;
                r.state.velocity.x * yaw.cos() + r.state.velocity.y * yaw.sin()
            })
            .sum::<f64>()
            / final_window.len() as f64
    };
    let commanded = config.command_at(simulated).velocity.x;
    let velocity_rms_error = if final_window.is_empty() {
        0.0
    } else {
        (final_window
            .iter()
            .map(|r| {
                let yaw = r.state.euler.z;
                let v = r.state.velocity.x * yaw.cos() + r.state.velocity.y * yaw.sin();
                let e = v - config.command_at(r.t).velocity.x;
                e * e
            })
            .sum::<f64>()
            / final_window.len() as f64)
            .sqrt()
    };

    let start = Vector2::new(config.start_xy.x, config.start_xy.y);
    let com_drift_max = log
        .ticks
        .iter()
        .map(|r| (Vector2::new(r.state.position.x, r.state.position.y) - start).norm())
        .fold(0.0, f64::max);

    let mut per_leg: [Vec<f64>; LEG_COUNT] = Default::default();
    for e in &log.events {
        if let SimEvent::Touchdown { leg, error, .. } = e {
            per_leg[*leg].push(*error);
        }
    }
    let all: Vec<f64> = per_leg.iter().flatten().cloned().collect();

    // Vertical impulse per complete gait cycle against the weight.
    let cycle = config.gait.cycle_time();
    let mg = config.params.weight();
    let task = config.task_period();
    let mut worst: f64 = 0.0;
    let mut cycle_index = 0usize;
    loop {
        let (lo, hi) = (cycle_index as f64 * cycle, (cycle_index + 1) as f64 * cycle);
        if hi > simulated + 1e-9 {
            break;
        }
        let impulse: f64 = log
            .ticks
            .iter()
            .filter(|r| r.t >= lo && r.t < hi)
            .map(|r| r.forces.iter().map(|f| f.z).sum::<f64>() * task)
            .sum();
        worst = worst.max((impulse / (mg * cycle) - 1.0).abs());
        cycle_index += 1;
    }

    let max_plan_age = log.ticks.iter().map(|r| r.plan_age).fold(0.0, f64::max);
    let max_plan_violation = log
        .ticks
        .iter()
        .map(|r| r.plan_violation)
        .fold(0.0, f64::max);
    let mean_iterations = if log.ticks.is_empty() {
        0.0
    } else {
        log.ticks.iter().map(|r| r.plan_iterations as f64).sum::<f64>() / log.ticks.len() as f64
    };

    Summary {
        completed: failure.is_none(),
        failure,
        simulated,
        ticks: log.ticks.len(),
        plans,
        mean_forward_velocity,
        commanded_forward_velocity: commanded,
        velocity_rms_error,
        com_drift_max,
        foothold_error: std::array::from_fn(|leg| error_stats(&per_leg[leg])),
        foothold_error_overall: error_stats(&all),
        vertical_impulse_worst: worst,
        max_plan_age,
        max_plan_violation,
        mean_iterations,
        timing,
    }
}

/// Largest planar lead the carried reference anchor may hold over the
/// estimated position before it is pulled back (anti-windup).
const CARRY_RADIUS: f64 = 0.05;
/// Same clamp for the carried yaw (rad).
const CARRY_YAW: f64 = 0.2;
///// Slew limits shaping raw operator commands into the reference command:
/// planar acceleration (m/s^2) and yaw acceleration (rad/s^2). Step changes
/// in the commanded velocity ramp in at these rates so the reference never
/// demands an instant jump from the current gait.
const REF_ACCEL: f64 = 1.0;
const REF_YAW_ACCEL: f64 = 2.0;
/// Integral trim on the reference command: gain (1/s) on the heading-frame
/// velocity error and caps on the accumulated correction. The trim nudges
/// the commanded speed, and with it the stride length, until the measured
/// speed matches what the operator asked for, without ever demanding a
/// large step change the way a raw position offset would.
const KI_VEL: f64 = 0.0;
const VEL_TRIM_MAX: f64 = 0.12;
const KI_YAW: f64 = 0.6;
const YAW_TRIM_MAX: f64 = 0.3;
/// Saturation for the realized leg-compensation wrench (N m, N). The model
/// quantity is a feedforward; near the leg workspace boundary its joint
/// accelerations can spike, and a real leg cannot push on the trunk harder
/// than roughly its own share of the robot's weight times swing
/// accelerations. The same saturated value enters the contact distribution
/// and the trunk reaction, so compensation still cancels exactly.
const W_L_TORQUE_MAX: f64 = 100.0;
const W_L_FORCE_MAX: f64 = 200.0;

/// Scales each block of a compensation wrench into its saturation bound.
fn saturate_wrench(w: &Wrench) -> Wrench {
    let torque = Vector3::new(w[0], w[1], w[2]);
    let force = Vector3::new(w[3], w[4], w[5]);
    let ts = if torque.norm() > W_L_TORQUE_MAX {
        W_L_TORQUE_MAX / torque.norm()
    } else {
        1.0
    };
    let fs = if force.norm() > W_L_FORCE_MAX {
        W_L_FORCE_MAX / force.norm()
    } else {
        1.0
    };
    let mut out = Wrench::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&(torque * ts));
    out.fixed_rows_mut::<3>(3).copy_from(&(force * fs));
    out
}

struct Controller<'a> {
    config: &'a SimConfig,
    map: &'a HeightMap,
    slot: PlanSlot,
    plan_time: f64,
    contacts: Option<ContactSequence>,
    reference_now: RobotState,
    rng: ChaCha8Rng,
    solve_ms: Vec<f64>,
    build_ms: Vec<f64>,
    plans: usize,
    /// Reference anchor advanced at the commanded rates between plans.
    /// Anchoring the reference here instead of at the estimate makes a
    /// persistent tracking deficit accumulate as position error (the plan
    /// then works to close it) rather than being forgiven at every replan.
    carry_xy: Vector2<f64>,
    carry_yaw: f64,
    /// Slewed reference command (heading frame); trails the raw operator
    /// command at the `REF_ACCEL`/`REF_YAW_ACCEL` rates.
    ref_velocity: Vector2<f64>,
    ref_yaw_rate: f64,
    /// Integral trim added onto the slewed command to close steady-state
    /// speed deficits; clamped to `VEL_TRIM_MAX`/`YAW_TRIM_MAX`.
    vel_trim: Vector2<f64>,
    yaw_trim: f64,
}

enum PlanError {
    Fatal(String),
    Foothold(FootholdError),
}

impl std::fmt::Display for PlanError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanError::Fatal(m) => write!(f, "{m}"),
            PlanError::Foothold(e) => write!(f, "foothold planning: {e}"),
        }
    }
}

impl<'a> Controller<'a> {
    fn estimate(&mut self, state: &RobotState) -> RobotState {
        let mut est = *state;
        if let Some(noise) = self.config.noise {
            for i in 0..3 {
                est.position[i] += noise.position * self.rng.gen_range(-1.0..1.0);
                est.velocity[i] += noise.velocity * self.rng.gen_range(-1.0..1.0);
            }
        }
        est
    }

    /// Full planning pass: schedule, contact sequence, references, model
    /// condensation, QP solve. Publishes the plan on success.
    /// `held_contacts` are terrain points: pinned feet for stance legs,
    /// lift-off points for legs in flight.
    fn replan(
        &mut self,
        t: f64,
        state: &RobotState,
        held_contacts: &[Vector3<f64>; LEG_COUNT],
        modes: &[LegMode; LEG_COUNT],
        events: &mut Vec<SimEvent>,
    ) -> Result<(), PlanError> {
        let build_started = std::time::Instant::now();
        let config = self.config;
        let estimated = self.estimate(state);
        let since_last = if self.plans == 0 {
            0.0
        } else {
            t - self.plan_time
        };

        let raw = config.command_at(t);
        let dv = raw.velocity - self.ref_velocity;
        let max_dv = REF_ACCEL * since_last;
        if dv.norm() > max_dv {
            self.ref_velocity += dv * (max_dv / dv.norm());
        } else {
            self.ref_velocity = raw.velocity;
        }
        let dw = raw.yaw_rate - self.ref_yaw_rate;
        self.ref_yaw_rate += dw.clamp(-REF_YAW_ACCEL * since_last, REF_YAW_ACCEL * since_last);

        let heading_v = rot_z(-estimated.yaw()) * estimated.velocity;
        let vel_err = self.ref_velocity - Vector2::new(heading_v.x, heading_v.y);
        self.vel_trim += vel_err * (KI_VEL * since_last);
        if self.vel_trim.norm() > VEL_TRIM_MAX {
            self.vel_trim *= VEL_TRIM_MAX / self.vel_trim.norm();
        }
        let yaw_err = self.ref_yaw_rate - estimated.omega.z;
        self.yaw_trim = (self.yaw_trim + KI_YAW * since_last * yaw_err)
            .clamp(-YAW_TRIM_MAX, YAW_TRIM_MAX);
        let command = UserCommand {
            velocity: self.ref_velocity + self.vel_trim,
            yaw_rate: self.ref_yaw_rate + self.yaw_trim,
        };

        let phase = (t * config.gait.step_frequency).fract();
        let mut swing_times = [0.0; LEG_COUNT];
        for leg in 0..LEG_COUNT {
            if let LegMode::Swing { started, duration, .. } = &modes[leg] {
                swing_times[leg] = (t - started).clamp(0.0, *duration);
            }
        }
        let schedule = build_schedule(&config.gait, phase, &swing_times)
            .map_err(|e| PlanError::Fatal(e.to_string()))?;
        let planner = PlannerState {
            feet: *held_contacts,
            com_position: estimated.position,
            com_velocity: estimated.velocity,
            yaw: estimated.yaw(),
            forward_speed: command.velocity.x,
        };
        let contacts = build_contact_sequence(
            &planner,
            &schedule,
            self.map,
            &config.gait,
            &config.geometry,
            &config.foothold,
        )
        .map_err(PlanError::Foothold)?;

        let heading = rot_z(self.carry_yaw);
        let world_v = heading * Vector3::new(command.velocity.x, command.velocity.y, 0.0);
        self.carry_xy += Vector2::new(world_v.x, world_v.y) * since_last;
        self.carry_yaw += command.yaw_rate * since_last;
        let lead = self.carry_xy - Vector2::new(estimated.position.x, estimated.position.y);
        if lead.norm() > CARRY_RADIUS {
            self.carry_xy = Vector2::new(estimated.position.x, estimated.position.y)
                + lead * (CARRY_RADIUS / lead.norm());
        }
        // Yaw is kept unwrapped on both sides, so a plain difference works.
        let yaw_lead = self.carry_yaw - estimated.yaw();
        if yaw_lead.abs() > CARRY_YAW {
            self.carry_yaw = estimated.yaw() + CARRY_YAW.copysign(yaw_lead);
        }
        let mut anchor = estimated;
        anchor.position.x = self.carry_xy.x;
        anchor.position.y = self.carry_xy.y;
        anchor.euler.z = self.carry_yaw;

        let reference = build_reference(
            &anchor,
            &command,
            &schedule,
            &contacts,
            config.geometry.body_height,
            config.horizon,
        )
        .map_err(|e| PlanError::Fatal(e.to_string()))?;

        let steps = if config.ablation == Ablation::Mpc {
            1
        } else {
            config.horizon
        };
        let period = schedule.span() / config.horizon as f64;
        let mut ltv = DiscreteLtv {
            a: Vec::with_capacity(steps),
            b: Vec::with_capacity(steps),
            dt: period,
        };
        for k in 0..steps {
            let sample = &reference.samples[k];
            // Linearize attitude kinematics about a point that starts at the
            // measured roll/pitch and relaxes to the reference over the
            // horizon: at large tilt the first steps then see the true
            // Euler-rate coupling instead of the flat-reference one.
            let blend = if steps > 1 {
                k as f64 / (steps - 1) as f64
            } else {
                0.0
            };
            let euler_ref = Vector3::new(
                estimated.euler.x + blend * (sample[0] - estimated.euler.x),
                estimated.euler.y + blend * (sample[1] - estimated.euler.y),
                sample[2],
            );
            let com_ref = Vector3::new(sample[3], sample[4], sample[5]);
            let kappa = schedule
                .index_at(k as f64 * period)
                .map_err(|e| PlanError::Fatal(e.to_string()))?;
            let feet_k = contacts.contacts_at(kappa);
            let (a, b) = continuous_matrices(&config.params, &euler_ref, &com_ref, &feet_k)
                .map_err(|e| PlanError::Fatal(e.to_string()))?;
            let (ad, bd) =
                discretize_zoh(&a, &b, period).map_err(|e| PlanError::Fatal(e.to_string()))?;
            ltv.a.push(ad);
            ltv.b.push(bd);
        }
        let horizon = condense(&ltv, &reference.samples[..steps])
            .map_err(|e| PlanError::Fatal(e.to_string()))?;
        let flags =
            horizon_flags(&schedule, steps).map_err(|e| PlanError::Fatal(e.to_string()))?;
        let build = build_qp(
            &horizon,
            &estimated.to_vector(),
            &config.weights,
            &flags,
            &config.params,
        )
        .map_err(|e| PlanError::Fatal(e.to_string()))?;
        let build_elapsed = build_started.elapsed().as_secs_f64() * 1e3;

        let solve_started = std::time::Instant::now();
        let (plan, fallback) = match solve_mpc(&build, 1e-9) {
            Ok(plan) => (plan, false),
            Err(first_err) => {
                // Degraded retry: a single-step balance plan from the same
                // inputs keeps the trunk controlled while the horizon is
                // unsolvable.
                let fallback_ltv = DiscreteLtv {
                    a: vec![ltv.a[0]],
                    b: vec![ltv.b[0]],
                    dt: period,
                };
                let fb_horizon = condense(&fallback_ltv, &reference.samples[..1])
                    .map_err(|e| PlanError::Fatal(e.to_string()))?;
                let fb_build = build_qp(
                    &fb_horizon,
                    &estimated.to_vector(),
                    &config.weights,
                    &flags[..1],
                    &config.params,
                )
                .map_err(|e| PlanError::Fatal(e.to_string()))?;
                let plan = solve_mpc(&fb_build, 1e-9).map_err(|second_err| {
                    PlanError::Fatal(format!(
                        "plan solve failed: {first_err}; fallback failed: {second_err}"
                    ))
                })?;
                (plan, true)
            }
        };
        self.solve_ms.push(solve_started.elapsed().as_secs_f64() * 1e3);
        self.build_ms.push(build_elapsed);
        events.push(SimEvent::PlanSolved {
            t,
            iterations: plan.iterations,
            objective: plan.objective,
            fallback,
        });
        self.slot.publish(plan);
        self.plan_time = t;
        self.plans += 1;
        self.reference_now = RobotState::from_vector(&reference.samples[0]);
        self.contacts = Some(contacts);
        Ok(())
    }
}

/// Start pose for a scenario: feet under the hips on the terrain, trunk
/// level at the configured height above the mean contact.
pub fn initial_stance(
    config: &SimConfig,
    map: &HeightMap,
) -> ([Vector3<f64>; LEG_COUNT], RobotState) {
    let rot0 = crate::model::rot_z(config.start_yaw);
    let feet: [Vector3<f64>; LEG_COUNT] = std::array::from_fn(|leg| {
        let hip = rot0 * config.geometry.hip(leg);
        let x = config.start_xy.x + hip.x;
        let y = config.start_xy.y + hip.y;
        let z = map.height_at(Vector2::new(x, y)).ok().flatten().unwrap_or(0.0);
        Vector3::new(x, y, z)
    });
    let mean_z = feet.iter().map(|f| f.z).sum::<f64>() / LEG_COUNT as f64;
    let mut state = RobotState::at_rest(Vector3::new(
        config.start_xy.x,
        config.start_xy.y,
        mean_z + config.geometry.body_height,
    ));
    state.euler.z = config.start_yaw;
    (feet, state)
}

/// Runs the scenario to completion (or failure) and returns the log plus
/// summary. Hard configuration errors return `Err`; falls and controller
/// failures end the run early and are reported in the summary.
pub fn run_closed_loop(config: &SimConfig, map: &HeightMap) -> Result<SimOutcome, SimError> {
    config.validate()?;
    let task_period = config.task_period();
    let substeps = (task_period / config.physics_step).round() as usize;
    let mpc_every = (config.mpc_period() / task_period).round() as usize;
    let swing_duration = config.gait.swing_duration();
    let total_ticks = (config.duration / task_period).round() as usize;

    let (mut feet, mut state) = initial_stance(config, map);
    // Planner view of the feet: held contacts stay on the terrain while the
    // actual swing foot travels its arc.
    let mut held_contacts = feet;

    let mut modes: [LegMode; LEG_COUNT] = std::array::from_fn(|_| LegMode::Stance);
    let mut last_q = JointVector::zeros();
    let mut last_error = [0.0; LEG_COUNT];
    let mut log = SimLog::default();
    let mut failure: Option<Failure> = None;

    let mut controller = Controller {
        config,
        map,
        slot: PlanSlot::new(),
        plan_time: f64::NEG_INFINITY,
        contacts: None,
        reference_now: state,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        solve_ms: Vec::new(),
        build_ms: Vec::new(),
        plans: 0,
        carry_xy: Vector2::new(state.position.x, state.position.y),
        carry_yaw: state.yaw(),
        ref_velocity: Vector2::zeros(),
        ref_yaw_rate: 0.0,
        vel_trim: Vector2::zeros(),
        yaw_trim: 0.0,
    };

    let mut disturbance_active = vec![false; config.disturbances.len()];

    'run: for tick in 0..total_ticks {
        let t = tick as f64 * task_period;
        let phase = (t * config.gait.step_frequency).fract();

        // Refresh the force plan at its own rate (including t = 0).
        if tick % mpc_every == 0 {
            if let Err(e) = controller.replan(t, &state, &held_contacts, &modes, &mut log.events) {
                log.events.push(SimEvent::Failed {
                    t,
                    what: e.to_string(),
                });
                failure = Some(Failure::Controller {
                    t,
                    message: e.to_string(),
                });
                break 'run;
            }
        }
        let contacts = controller
            .contacts
            .as_ref()
            .expect("plan published before first tick");

        // Stance transitions driven by the same clock the planner uses.
        for leg in 0..LEG_COUNT {
            let stance_now = config.gait.in_stance(phase, leg);
            match (&modes[leg], stance_now) {
                (LegMode::Stance, false) => {
                    let target = contacts
                        .first_touchdown(leg)
                        .map(|e| e.point)
                        .unwrap_or(feet[leg]);
                    log.events.push(SimEvent::Liftoff {
                        t,
                        leg,
                        prediction: target,
                    });
                    modes[leg] = LegMode::Swing {
                        path: SwingPath {
                            origin: feet[leg],
                            target,
                            clearance: config.foothold.clearance,
                        },
                        started: t,
                        duration: swing_duration,
                        prediction: target,
                    };
                }
                (LegMode::Swing { path, prediction, .. }, true) => {
                    let actual = path.target;
                    feet[leg] = actual;
                    held_contacts[leg] = actual;
                    let error = (actual - prediction).norm();
                    last_error[leg] = error;
                    log.events.push(SimEvent::Touchdown {
                        t,
                        leg,
                        actual,
                        predicted: *prediction,
                        error,
                    });
                    modes[leg] = LegMode::Stance;
                }
                _ => {}
            }
        }

        // Swing progression, retargeting, and desired joint accelerations.
        let mut qdd_desired = JointVector::zeros();
        let rotation = state.rotation();
        for leg in 0..LEG_COUNT {
            if let LegMode::Swing {
                path,
                started,
                duration,
                ..
            } = &mut modes[leg]
            {
                let s = ((t - *started) / *duration).clamp(0.0, 1.0);
                if let Some(entry) = contacts.first_touchdown(leg) {
                    if (entry.point - path.target).norm() > 1e-4 && s < 1.0 {
                        *path = path.retarget(s, entry.point);
                        *started = t;
                        *duration = (1.0 - s) * *duration;
                    }
                }
                let s = ((t - *started) / *duration).clamp(0.0, 1.0);
                feet[leg] = path.position(s);

                // Desired joint accelerations from the planned path via
                // differenced inverse kinematics at a frozen base pose.
                // The probe center stays one step inside the arc: the path
                // clamps outside [0, 1], and differencing across that kink
                // would blow up as 1/h.
                let h = 1e-4;
                let ds = h / *duration;
                let sc = s.clamp(ds, 1.0 - ds);
                let q_at = |sv: f64| {
                    config
                        .legs
                        .inverse_kinematics(leg, &rotation, &state.position, &path.position(sv))
                };
                if let (Ok(qm), Ok(q0), Ok(qp)) = (q_at(sc - ds), q_at(sc), q_at(sc + ds)) {
                    for j in 0..3 {
                        qdd_desired[3 * leg + j] = (qp[j] - 2.0 * q0[j] + qm[j]) / (h * h);
                        last_q[3 * leg + j] = q0[j];
                    }
                }
            } else {
                // Stance joints track the pinned foot.
                if let Ok(q) =
                    config
                        .legs
                        .inverse_kinematics(leg, &rotation, &state.position, &feet[leg])
                {
                    for j in 0..3 {
                        last_q[3 * leg + j] = q[j];
                    }
                }
            }
        }

        // Controller outputs for this tick.
        let plan = controller.slot.latest().expect("plan available");
        let plan_age = t - controller.plan_time;
        debug_assert!(plan_age <= config.mpc_period() + 1e-9, "stale plan");
        let stance_flags: ContactFlags =
            std::array::from_fn(|leg| matches!(modes[leg], LegMode::Stance));
        let w_mpc = wrench_from_plan(&plan, &feet, &state.position);
        let m_ua = cross_inertia(&config.legs, &state, &last_q);
        let w_l = saturate_wrench(&compensation_wrench(&m_ua, &qdd_desired));
        let w_l_applied = if config.ablation == Ablation::Ic {
            Wrench::zeros()
        } else {
            w_l
        };
        let w_d = w_mpc + w_l_applied;

        // Planned forces apply to legs still in stance. When a leg lifts
        // off mid-plan the survivors are scaled up, preserving each force
        // direction (so friction ratios hold), to carry the planned total
        // until the next refresh; a full least-squares redistribution here
        // turns out to pump the support-line attitude mode instead.
        let mut forces = [Vector3::zeros(); LEG_COUNT];
        let mut planned_fz = 0.0;
        let mut surviving_fz = 0.0;
        let mut tallest = 0.0_f64;
        for leg in 0..LEG_COUNT {
            planned_fz += plan.first_step[leg].z;
            if stance_flags[leg] {
                forces[leg] = plan.first_step[leg];
                surviving_fz += plan.first_step[leg].z;
                tallest = tallest.max(plan.first_step[leg].z);
            }
        }
        if false && planned_fz > surviving_fz && surviving_fz > 1.0 {
            let mut scale = planned_fz / surviving_fz;
            if tallest * scale > config.params.fz_max {
                scale = config.params.fz_max / tallest;
            }
            for f in &mut forces {
                *f *= scale;
            }
        }

        let stance_feet: Vec<Vector3<f64>> = (0..LEG_COUNT)
            .filter(|&l| stance_flags[l])
            .map(|l| feet[l])
            .collect();
        let distribution = distribute_wrench(
            &w_d,
            &stance_feet,
            &state.position,
            config.params.friction,
            config.params.fz_min,
            config.params.fz_max,
        );

        // Compensation cancels the modeled swing reaction directly: with it
        // on the trunk feels the planned wrench alone, with it ablated the
        // uncompensated reaction perturbs the trunk. Disturbances stack on
        // top.
        let mut extra = w_l_applied - w_l;
        for (i, pulse) in config.disturbances.iter().enumerate() {
            let active = pulse.active(t);
            if active {
                extra += pulse.as_wrench();
            }
            if active != disturbance_active[i] {
                log.events.push(if active {
                    SimEvent::DisturbanceStart { t, index: i }
                } else {
                    SimEvent::DisturbanceEnd { t, index: i }
                });
                disturbance_active[i] = active;
            }
        }

        log.ticks.push(TickRecord {
            t,
            state,
            reference: controller.reference_now,
            contact: stance_flags,
            feet,
            forces,
            w_mpc,
            w_l,
            w_d,
            distribution_residual: distribution.residual,
            plan_age,
            plan_iterations: plan.iterations,
            plan_violation: plan.max_violation,
            last_error,
        });

        // Plant substeps.
        for sub in 0..substeps {
            let t_sub = t + sub as f64 * config.physics_step;
            match step_physics(
                &config.params,
                &state,
                &feet,
                &forces,
                &extra,
                config.physics_step,
                t_sub,
            ) {
                Ok(next) => state = next,
                Err(SimError::PitchSingularity { t }) => {
                    failure = Some(Failure::Fall {
                        t,
                        reason: "pitch singularity".into(),
                    });
                    log.events.push(SimEvent::Failed {
                        t,
                        what: "pitch singularity".into(),
                    });
                    break 'run;
                }
                Err(e) => return Err(e),
            }
        }

        // Fall detection. Unknown terrain cells skip the clearance check.
        let tilted =
            state.euler.x.abs() > config.fall_angle || state.euler.y.abs() > config.fall_angle;
        let sunk = matches!(
            map.height_at(Vector2::new(state.position.x, state.position.y)),
            Ok(Some(ground)) if state.position.z - ground < config.min_clearance
        );
        if tilted || sunk {
            let reason = if tilted { "tilt over limit" } else { "body too low" };
            failure = Some(Failure::Fall {
                t,
                reason: reason.into(),
            });
            log.events.push(SimEvent::Failed {
                t,
                what: reason.into(),
            });
            break 'run;
        }
    }

    let timing = Timing {
        mean_solve_ms: mean(&controller.solve_ms),
        max_solve_ms: controller.solve_ms.iter().cloned().fold(0.0, f64::max),
        mean_plan_build_ms: mean(&controller.build_ms),
        max_plan_build_ms: controller.build_ms.iter().cloned().fold(0.0, f64::max),
    };
    let summary = summarize(&log, config, failure, timing, controller.plans);
    Ok(SimOutcome { log, summary })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
