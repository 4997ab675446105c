//! COM reference trajectory generation.
//!
//! Anchors are laid down at every distinct stance-change time of the
//! schedule (plus "now"): yaw integrates the commanded rate, planar position
//! advances with the commanded velocity rotated by the accumulated yaw,
//! roll/pitch/height come from a plane fit of the contact configuration at
//! that change. Rates are forward finite differences between anchors, and
//! the horizon samples hold the most recent anchor (zero-order hold,
//! left-closed at ties). Each 15-dimensional sample is
//! `[Θ_ref; r_ref; ω_ref; ṙ_ref; g]` with `ω_ref = T(Θ_ref) Θ̇_ref` by
//! construction.

use crate::foothold::ContactSequence;
use crate::gait::ContactSchedule;
use crate::model::{
    euler_rate_map, gravity_vector, rot_z, ModelError, RobotState, StateVector,
};
use crate::terrain::{fit_plane, TerrainError};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

pub const MAX_COMMAND_SPEED: f64 = 2.0;
pub const MAX_COMMAND_YAW_RATE: f64 = 1.5;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("bad command: {0}")]
    BadCommand(String),
    #[error("plane fit failed at stance change {kappa}: {source}")]
    PlaneFit {
        kappa: usize,
        source: TerrainError,
    },
    #[error("horizon {horizon:.6} s exceeds anchor span {span:.6} s")]
    HorizonExceedsSpan { horizon: f64, span: f64 },
    #[error("need at least one anchor")]
    NoAnchors,
    #[error("{0} anchors but {1} rate entries")]
    RateMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Operator command: planar velocity in the heading frame plus a yaw rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct UserCommand {
    pub velocity: Vector2<f64>,
    pub yaw_rate: f64,
}

impl UserCommand {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        if !self.velocity.x.is_finite() || !self.velocity.y.is_finite() || !self.yaw_rate.is_finite()
        {
            return Err(ReferenceError::BadCommand("non-finite command".into()));
        }
        if self.velocity.norm() > MAX_COMMAND_SPEED {
            return Err(ReferenceError::BadCommand(format!(
                "speed {:.3} exceeds {MAX_COMMAND_SPEED}",
                self.velocity.norm()
            )));
        }
        if self.yaw_rate.abs() > MAX_COMMAND_YAW_RATE {
            return Err(ReferenceError::BadCommand(format!(
                "yaw rate {:.3} exceeds {MAX_COMMAND_YAW_RATE}",
                self.yaw_rate
            )));
        }
        Ok(())
    }
}

/// Pose reference at one stance change.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    /// Seconds from now.
    pub dt: f64,
    pub yaw: f64,
    pub roll: f64,
    pub pitch: f64,
    pub position: Vector3<f64>,
}

/// Numerical pose rates between anchors.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnchorRate {
    pub yaw_rate: f64,
    pub roll_rate: f64,
    pub pitch_rate: f64,
    pub velocity: Vector3<f64>,
}

/// Anchors over one schedule, with the time span they cover.
#[derive(Debug, Clone)]
pub struct AnchorTrack {
    pub anchors: Vec<Anchor>,
    pub span: f64,
}

/// Horizon-sampled reference.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub samples: Vec<StateVector>,
    pub period: f64,
    pub anchors: AnchorTrack,
    pub rates: Vec<AnchorRate>,
}

impl ReferenceTrajectory {
    /// Per-sample CSV (time, Euler angles, position, body rates, velocity).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("t,roll,pitch,yaw,x,y,z,wx,wy,wz,vx,vy,vz\n");
        for (k, s) in self.samples.iter().enumerate() {
            let t = (k + 1) as f64 * self.period;
            out.push_str(&format!(
                "{t:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], s[8], s[9], s[10], s[11]
            ));
        }
        out
    }
}

/// Roll/pitch that align the body z axis with the terrain normal once yaw is
/// factored out.
fn tilt_from_normal(normal: &Vector3<f64>, yaw: f64) -> (f64, f64) {
    let n = rot_z(-yaw) * normal;
    let roll = (-n.y).asin();
    let pitch = n.x.atan2(n.z);
    (roll, pitch)
}

/// Lays an anchor at "now" plus every distinct stance-change time.
///
/// Simultaneous changes (a trot swaps diagonal pairs at the same instant)
/// merge into one anchor so the numerical rates never divide by a zero gap.
pub fn anchor_references(
    state: &RobotState,
    command: &UserCommand,
    schedule: &ContactSchedule,
    contacts: &ContactSequence,
    body_height: f64,
) -> Result<AnchorTrack, ReferenceError> {
    command.validate()?;
    let yaw0 = state.yaw();
    let v_world = rot_z(yaw0) * Vector3::new(command.velocity.x, command.velocity.y, 0.0);
    let mut times = vec![0.0];
    times.extend(schedule.merged_times());
    let mut anchors = Vec::with_capacity(times.len());
    for &t in &times {
        let kappa = schedule
            .index_at(t)
            .expect("anchor times come from the schedule");
        let yaw = yaw0 + t * command.yaw_rate;
        let delta_yaw = yaw - yaw0;
        let displaced = state.position + t * (rot_z(delta_yaw) * v_world);
        let points = contacts.contacts_at(kappa);
        let plane = fit_plane(&points)
            .map_err(|source| ReferenceError::PlaneFit { kappa, source })?;
        let (roll, pitch) = tilt_from_normal(&plane.normal, yaw);
        anchors.push(Anchor {
            dt: t,
            yaw,
            roll,
            pitch,
            position: Vector3::new(displaced.x, displaced.y, plane.centroid.z + body_height),
        });
    }
    Ok(AnchorTrack {
        anchors,
        span: schedule.span(),
    })
}

/// Forward differences between consecutive anchors; the last anchor repeats
/// the previous rate (a single anchor gets zero rates).
pub fn rates_from_anchors(track: &AnchorTrack) -> Vec<AnchorRate> {
    let a = &track.anchors;
    let m = a.len();
    let mut rates = vec![AnchorRate::default(); m];
    for i in 0..m.saturating_sub(1) {
        let gap = a[i + 1].dt - a[i].dt;
        rates[i] = AnchorRate {
            yaw_rate: (a[i + 1].yaw - a[i].yaw) / gap,
            roll_rate: (a[i + 1].roll - a[i].roll) / gap,
            pitch_rate: (a[i + 1].pitch - a[i].pitch) / gap,
            velocity: (a[i + 1].position - a[i].position) / gap,
        };
    }
    if m >= 2 {
        rates[m - 1] = rates[m - 2];
    }
    rates
}

/// Samples the anchor track at `k * period` for `k = 1..=n`, holding the
/// most recent anchor (a sample exactly on an anchor takes the new anchor).
pub fn resample_zoh(
    track: &AnchorTrack,
    rates: &[AnchorRate],
    n: usize,
    period: f64,
) -> Result<ReferenceTrajectory, ReferenceError> {
    if track.anchors.is_empty() {
        return Err(ReferenceError::NoAnchors);
    }
    if rates.len() != track.anchors.len() {
        return Err(ReferenceError::RateMismatch(track.anchors.len(), rates.len()));
    }
    if n == 0 || !(period > 0.0) {
        return Err(ReferenceError::BadCommand(
            "horizon needs n >= 1 and period > 0".into(),
        ));
    }
    let horizon = n as f64 * period;
    if horizon > track.span * (1.0 + 1e-9) {
        return Err(ReferenceError::HorizonExceedsSpan {
            horizon,
            span: track.span,
        });
    }
    let tie = 1e-9 * track.span.max(period);
    let mut samples = Vec::with_capacity(n);
    for k in 1..=n {
        let t = k as f64 * period;
        let mut j = 0;
        for (i, a) in track.anchors.iter().enumerate() {
            if a.dt <= t + tie {
                j = i;
            } else {
                break;
            }
        }
        let a = &track.anchors[j];
        let r = &rates[j];
        let euler = Vector3::new(a.roll, a.pitch, a.yaw);
        let euler_rate = Vector3::new(r.roll_rate, r.pitch_rate, r.yaw_rate);
        let omega = euler_rate_map(&euler)? * euler_rate;
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&euler);
        x.fixed_rows_mut::<3>(3).copy_from(&a.position);
        x.fixed_rows_mut::<3>(6).copy_from(&omega);
        x.fixed_rows_mut::<3>(9).copy_from(&r.velocity);
        x.fixed_rows_mut::<3>(12).copy_from(&gravity_vector());
        samples.push(x);
    }
    Ok(ReferenceTrajectory {
        samples,
        period,
        anchors: track.clone(),
        rates: rates.to_vec(),
    })
}

/// Full pipeline: anchors, rates, and an n-sample hold over the schedule
/// span.
pub fn build_reference(
    state: &RobotState,
    command: &UserCommand,
    schedule: &ContactSchedule,
    contacts: &ContactSequence,
    body_height: f64,
    n: usize,
) -> Result<ReferenceTrajectory, ReferenceError> {
    let track = anchor_references(state, command, schedule, contacts, body_height)?;
    let rates = rates_from_anchors(&track);
    let period = schedule.span() / n as f64;
    resample_zoh(&track, &rates, n, period)
}
