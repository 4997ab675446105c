//! Foothold prediction and terrain-aware selection.
//!
//! Upcoming touchdown locations are predicted from the gait timing,
//!
//! ```text
//! p̂ = p̄ + ½ ℓ_s + Δt ṙ
//! ```
//!
//! then each prediction is adjusted by exhaustively scoring a heightmap crop
//! around it: soft costs for swing-path collisions, local roughness, and
//! deviation from the nominal cell, plus hard rejections of unknown cells,
//! cells near height discontinuities, and cells outside the crop disk or the
//! leg's reach. The evaluator is deliberately brute force: every candidate
//! cell is scored, so the minimizer is the oracle.

use crate::gait::{ContactSchedule, GaitParams, LEG_COUNT};
use crate::model::{rot_z, BodyGeometry};
use crate::terrain::{HeightMap, TerrainError};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FootholdError {
    #[error("no safe foothold for leg {leg} at stance change {kappa}")]
    NoSafeFoothold { leg: usize, kappa: usize },
    #[error("nominal cell ({0}, {1}) outside crop")]
    NominalOutsideCrop(usize, usize),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

/// Selection weights and safety limits. Distances in meters.
#[derive(Debug, Clone, Copy)]
pub struct FootholdConfig {
    pub w_collision: f64,
    pub w_roughness: f64,
    pub w_uncertainty: f64,
    /// Candidates this close (cell-center metric, inclusive) to a height
    /// discontinuity are rejected.
    pub edge_margin: f64,
    /// Height jump between nearby cells that counts as a discontinuity.
    pub edge_threshold: f64,
    /// Candidates outside this radius of the crop center are rejected.
    pub crop_half_extent: f64,
    /// Candidates outside this radius of the predicted hip projection are
    /// rejected.
    pub reach_radius: f64,
    /// Swing apex clearance used for collision checking.
    pub clearance: f64,
    /// Trailing fraction of the swing path checked for collisions.
    pub approach_fraction: f64,
}

impl Default for FootholdConfig {
    fn default() -> Self {
        Self {
            w_collision: 1.0,
            w_roughness: 1.0,
            w_uncertainty: 0.25,
            edge_margin: 0.04,
            edge_threshold: 0.04,
            crop_half_extent: 0.30,
            reach_radius: 0.35,
            clearance: 0.12,
            approach_fraction: 0.25,
        }
    }
}

/// One evaluated touchdown prediction.
#[derive(Debug, Clone, Copy)]
pub struct FootholdPrediction {
    pub leg: usize,
    /// Predicted foothold.
    pub point: Vector3<f64>,
    /// Time until the touchdown.
    pub dt: f64,
    /// Swing-ellipse center the prediction extends from.
    pub ellipse_center: Vector3<f64>,
    /// Step-length vector.
    pub step_length: Vector3<f64>,
}

/// Exact evaluation of the prediction rule; the fields keep their inputs so
/// the identity can be re-checked.
pub fn predict_foothold(
    leg: usize,
    ellipse_center: Vector3<f64>,
    step_length: Vector3<f64>,
    dt: f64,
    base_velocity: Vector3<f64>,
) -> FootholdPrediction {
    debug_assert!(dt >= 0.0);
    FootholdPrediction {
        leg,
        point: ellipse_center + 0.5 * step_length + dt * base_velocity,
        dt,
        ellipse_center,
        step_length,
    }
}

/// Planar stride for one gait cycle at the commanded forward speed, rotated
/// into the heading.
pub fn step_length(yaw: f64, forward_speed: f64, step_frequency: f64) -> Vector3<f64> {
    rot_z(yaw) * Vector3::new(forward_speed / step_frequency, 0.0, 0.0)
}

/// Why a candidate cell was thrown out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Unknown,
    NearEdge,
    OutsideCropDisk,
    OutOfReach,
}

/// Dense cost field over a crop; `None` cost means the cell was rejected.
#[derive(Debug, Clone)]
pub struct ScoreGrid {
    pub origin: Vector2<f64>,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub cost: Vec<Option<f64>>,
    pub rejection: Vec<Option<Rejection>>,
    pub nominal: (usize, usize),
    pub chosen: Option<(usize, usize)>,
}

impl ScoreGrid {
    pub fn cost_at(&self, ix: usize, iy: usize) -> Option<f64> {
        self.cost[iy * self.width + ix]
    }

    /// One row per cell: indices, world center, cost (empty when rejected),
    /// rejection reason, and chosen/nominal markers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ix,iy,x,y,cost,rejection,nominal,chosen\n");
        for iy in 0..self.height {
            for ix in 0..self.width {
                let i = iy * self.width + ix;
                let x = self.origin.x + (ix as f64 + 0.5) * self.resolution;
                let y = self.origin.y + (iy as f64 + 0.5) * self.resolution;
                let cost = self.cost[i]
                    .map(|c| format!("{c:.8e}"))
                    .unwrap_or_default();
                let why = match self.rejection[i] {
                    None => "",
                    Some(Rejection::Unknown) => "unknown",
                    Some(Rejection::NearEdge) => "near_edge",
                    Some(Rejection::OutsideCropDisk) => "outside_crop",
                    Some(Rejection::OutOfReach) => "out_of_reach",
                };
                let nominal = (ix, iy) == self.nominal;
                let chosen = self.chosen == Some((ix, iy));
                out.push_str(&format!(
                    "{ix},{iy},{x:.8e},{y:.8e},{cost},{why},{},{}\n",
                    nominal as u8, chosen as u8
                ));
            }
        }
        out
    }
}

/// Swing-path description for collision checks: the foot travels a
/// half-ellipse from `liftoff` to the candidate cell.
#[derive(Debug, Clone, Copy)]
pub struct SwingGeometry {
    pub liftoff: Vector3<f64>,
    pub clearance: f64,
}

fn swing_height(liftoff: &Vector3<f64>, target: &Vector3<f64>, clearance: f64, s: f64) -> f64 {
    liftoff.z + (target.z - liftoff.z) * s + clearance * (std::f64::consts::PI * s).sin()
}

/// True when terrain pokes above the final approach of the half-ellipse
/// into `target`. Unknown terrain under the approach counts as a collision.
fn approach_collides(
    map: &HeightMap,
    swing: &SwingGeometry,
    target: &Vector3<f64>,
    approach_fraction: f64,
) -> bool {
    let chord = Vector2::new(target.x - swing.liftoff.x, target.y - swing.liftoff.y);
    let len = chord.norm();
    let steps = (len * approach_fraction / map.resolution()).ceil().max(1.0) as usize;
    for k in 0..steps {
        // Sample strictly before touchdown; s = 1 is the foothold itself.
        let s = 1.0 - approach_fraction * (k as f64 + 0.5) / steps as f64;
        let xy = Vector2::new(
            swing.liftoff.x + chord.x * s,
            swing.liftoff.y + chord.y * s,
        );
        let z = swing_height(&swing.liftoff, target, swing.clearance, s);
        match map.height_at(xy) {
            Ok(Some(h)) if h > z + 1e-9 => return true,
            Ok(Some(_)) => {}
            // Off-crop or unknown: cannot certify the approach.
            Ok(None) | Err(_) => return true,
        }
    }
    false
}

/// Population standard deviation of known heights in the 3x3 neighborhood.
fn local_roughness(map: &HeightMap, ix: usize, iy: usize) -> f64 {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
            if jx < 0 || jy < 0 || jx >= map.width() as i64 || jy >= map.height() as i64 {
                continue;
            }
            if let Some(h) = map.cell(jx as usize, jy as usize) {
                sum += h;
                sq += h * h;
                n += 1.0;
            }
        }
    }
    if n < 1.5 {
        return 0.0;
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}

/// True when any cell within `edge_margin` of the candidate (inclusive,
/// cell-center metric) is unknown or differs in height by at least
/// `edge_threshold`.
fn near_discontinuity(map: &HeightMap, ix: usize, iy: usize, h: f64, cfg: &FootholdConfig) -> bool {
    let reach = (cfg.edge_margin / map.resolution()).floor() as i64 + 1;
    let margin_sq = cfg.edge_margin * cfg.edge_margin + 1e-12;
    let res = map.resolution();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if dx == 0 && dy == 0 {
                continue;
            }
            let d_sq = ((dx * dx + dy * dy) as f64) * res * res;
            if d_sq > margin_sq {
                continue;
            }
            let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
            if jx < 0 || jy < 0 || jx >= map.width() as i64 || jy >= map.height() as i64 {
                // Beyond the crop is unobserved terrain.
                return true;
            }
            match map.cell(jx as usize, jy as usize) {
                None => return true,
                Some(other) if (other - h).abs() >= cfg.edge_threshold => return true,
                Some(_) => {}
            }
        }
    }
    false
}

/// Scores every cell of the crop and picks the cheapest safe one. Ties go to
/// the lowest row-major index. `reach` optionally restricts candidates to a
/// disk around the predicted hip projection.
pub fn evaluate_foothold(
    crop: &HeightMap,
    nominal: (usize, usize),
    swing: &SwingGeometry,
    reach: Option<(Vector2<f64>, f64)>,
    cfg: &FootholdConfig,
) -> Result<((usize, usize), ScoreGrid), FootholdError> {
    let (w, h) = (crop.width(), crop.height());
    if nominal.0 >= w || nominal.1 >= h {
        return Err(FootholdError::NominalOutsideCrop(nominal.0, nominal.1));
    }
    let center = Vector2::new(
        crop.origin().x + 0.5 * w as f64 * crop.resolution(),
        crop.origin().y + 0.5 * h as f64 * crop.resolution(),
    );
    let nominal_center = crop.cell_center(nominal.0, nominal.1);
    let mut grid = ScoreGrid {
        origin: crop.origin(),
        resolution: crop.resolution(),
        width: w,
        height: h,
        cost: vec![None; w * h],
        rejection: vec![None; w * h],
        nominal,
        chosen: None,
    };
    let mut best: Option<(f64, (usize, usize))> = None;
    for iy in 0..h {
        for ix in 0..w {
            let i = iy * w + ix;
            let cell_c = crop.cell_center(ix, iy);
            let height = match crop.cell(ix, iy) {
                None => {
                    grid.rejection[i] = Some(Rejection::Unknown);
                    continue;
                }
                Some(z) => z,
            };
            if (cell_c - center).norm() > cfg.crop_half_extent + 1e-12 {
                grid.rejection[i] = Some(Rejection::OutsideCropDisk);
                continue;
            }
            if let Some((hip, radius)) = reach {
                if (cell_c - hip).norm() > radius {
                    grid.rejection[i] = Some(Rejection::OutOfReach);
                    continue;
                }
            }
            if near_discontinuity(crop, ix, iy, height, cfg) {
                grid.rejection[i] = Some(Rejection::NearEdge);
                continue;
            }
            let target = Vector3::new(cell_c.x, cell_c.y, height);
            let collision = approach_collides(crop, swing, &target, cfg.approach_fraction);
            let cost = cfg.w_collision * collision as u8 as f64
                + cfg.w_roughness * local_roughness(crop, ix, iy)
                + cfg.w_uncertainty * (cell_c - nominal_center).norm();
            grid.cost[i] = Some(cost);
            if best.map_or(true, |(c, _)| cost < c) {
                best = Some((cost, (ix, iy)));
            }
        }
    }
    let Some((_, chosen)) = best else {
        // Caller knows leg and stance-change index; 0 placeholders here.
        return Err(FootholdError::NoSafeFoothold { leg: 0, kappa: 0 });
    };
    grid.chosen = Some(chosen);
    Ok((chosen, grid))
}

/// One planned contact: where the foot is (or will land), how it was scored.
#[derive(Debug, Clone, Copy)]
pub struct ContactEntry {
    pub point: Vector3<f64>,
    /// Cost of the chosen cell; 0 for carried-over entries.
    pub score: f64,
    /// Planar distance between the chosen cell and the nominal prediction.
    pub adjustment: f64,
    /// True when this entry is a freshly evaluated touchdown.
    pub evaluated: bool,
}

/// Planned contact locations for every leg at every stance change of the
/// schedule (entry 0 is the current state).
#[derive(Debug, Clone)]
pub struct ContactSequence {
    pub entries: [Vec<ContactEntry>; LEG_COUNT],
}

impl ContactSequence {
    pub fn len(&self) -> usize {
        self.entries[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries[0].is_empty()
    }

    /// Contact points of all legs at stance-change index `kappa`.
    pub fn contacts_at(&self, kappa: usize) -> [Vector3<f64>; LEG_COUNT] {
        std::array::from_fn(|leg| self.entries[leg][kappa].point)
    }

    /// First freshly evaluated touchdown of `leg`, if any.
    pub fn first_touchdown(&self, leg: usize) -> Option<&ContactEntry> {
        self.entries[leg].iter().find(|e| e.evaluated)
    }
}

/// Kinematic context for planning.
#[derive(Debug, Clone, Copy)]
pub struct PlannerState {
    /// Held contact per leg: the pinned foot for stance legs, the lift-off
    /// point for legs currently in swing. Always terrain points.
    pub feet: [Vector3<f64>; LEG_COUNT],
    pub com_position: Vector3<f64>,
    pub com_velocity: Vector3<f64>,
    pub yaw: f64,
    /// Commanded forward speed defining the stride length.
    pub forward_speed: f64,
}

impl PlannerState {
    /// Swing-ellipse center: the hip projected to the held-contact height.
    ///
    /// Predictions extend from here rather than from the foot so that
    /// re-evaluating mid-swing with a shrunk time-to-touchdown returns the
    /// same point: the center advances with the trunk at exactly the rate
    /// the shrinking velocity term gives up.
    pub fn ellipse_center(&self, geometry: &BodyGeometry, leg: usize) -> Vector3<f64> {
        let hip = self.com_position + rot_z(self.yaw) * geometry.hip(leg);
        Vector3::new(hip.x, hip.y, self.feet[leg].z)
    }
}

/// Predicts and terrain-adjusts every upcoming touchdown in the schedule.
///
/// Each touchdown of a leg evaluates the prediction rule with that event's
/// time offset from the leg's swing-ellipse center; non-touchdown entries
/// carry the held contact forward.
pub fn build_contact_sequence(
    state: &PlannerState,
    schedule: &ContactSchedule,
    map: &HeightMap,
    gait: &GaitParams,
    geometry: &BodyGeometry,
    cfg: &FootholdConfig,
) -> Result<ContactSequence, FootholdError> {
    let events = schedule.events();
    let mut entries: [Vec<ContactEntry>; LEG_COUNT] = std::array::from_fn(|leg| {
        vec![ContactEntry {
            point: state.feet[leg],
            score: 0.0,
            adjustment: 0.0,
            evaluated: false,
        }]
    });
    for (kappa, event) in events.iter().enumerate().skip(1) {
        for leg in 0..LEG_COUNT {
            let prev = *entries[leg].last().expect("seeded with current contact");
            let is_touchdown = event.leg == Some(leg) && event.flags[leg];
            if !is_touchdown {
                entries[leg].push(ContactEntry {
                    evaluated: false,
                    score: 0.0,
                    adjustment: 0.0,
                    ..prev
                });
                continue;
            }
            let (entry, _) =
                plan_touchdown(state, map, gait, geometry, cfg, leg, kappa, event.dt, prev.point)?;
            entries[leg].push(entry);
        }
    }
    Ok(ContactSequence { entries })
}

/// Predicts, scores, and adjusts one scheduled touchdown: the prediction
/// rule at `dt` from the leg's swing-ellipse center, cropped to the map and
/// evaluated cell by cell. Returns the chosen contact together with the
/// full score grid over the crop (`kappa` only labels errors).
#[allow(clippy::too_many_arguments)]
pub fn plan_touchdown(
    state: &PlannerState,
    map: &HeightMap,
    gait: &GaitParams,
    geometry: &BodyGeometry,
    cfg: &FootholdConfig,
    leg: usize,
    kappa: usize,
    dt: f64,
    liftoff: Vector3<f64>,
) -> Result<(ContactEntry, ScoreGrid), FootholdError> {
    let stride = step_length(state.yaw, state.forward_speed, gait.step_frequency);
    let prediction = predict_foothold(
        leg,
        state.ellipse_center(geometry, leg),
        stride,
        dt,
        state.com_velocity,
    );
    let crop = map.crop(prediction.point.xy(), cfg.crop_half_extent)?;
    let nominal = crop
        .cell_index(prediction.point.xy())
        .ok_or(FootholdError::NoSafeFoothold { leg, kappa })?;
    let swing = SwingGeometry {
        liftoff,
        clearance: cfg.clearance,
    };
    let hip_xy = predicted_hip(state, geometry, leg, dt);
    let (chosen, grid) =
        evaluate_foothold(&crop, nominal, &swing, Some((hip_xy, cfg.reach_radius)), cfg).map_err(
            |e| match e {
                FootholdError::NoSafeFoothold { .. } => FootholdError::NoSafeFoothold { leg, kappa },
                other => other,
            },
        )?;
    let shift = crop.cell_center(chosen.0, chosen.1) - crop.cell_center(nominal.0, nominal.1);
    let z = crop.cell(chosen.0, chosen.1).expect("chosen cell is known");
    let point = Vector3::new(prediction.point.x + shift.x, prediction.point.y + shift.y, z);
    let entry = ContactEntry {
        point,
        score: grid
            .cost_at(chosen.0, chosen.1)
            .expect("chosen cell has a cost"),
        adjustment: shift.norm(),
        evaluated: true,
    };
    Ok((entry, grid))
}

/// Hip projection at touchdown time, advanced with the base velocity.
fn predicted_hip(
    state: &PlannerState,
    geometry: &BodyGeometry,
    leg: usize,
    dt: f64,
) -> Vector2<f64> {
    let hip = state.com_position + rot_z(state.yaw) * geometry.hip(leg);
    Vector2::new(
        hip.x + dt * state.com_velocity.x,
        hip.y + dt * state.com_velocity.y,
    )
}
