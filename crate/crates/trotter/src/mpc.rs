//! Centroidal model-predictive controller.
//!
//! Condensed horizon in, ground-reaction-force plan out. The tracking
//! objective `‖X − X_ref‖²_L + ‖ū‖²_K` becomes a dense strictly convex QP
//! over the stacked inputs:
//!
//! ```text
//! H = 2 (B̄ᵀ L B̄ + K),    f = 2 B̄ᵀ L (Ā x0 − X_ref)
//! ```
//!
//! with, per step and per leg: four friction-pyramid rows and two vertical
//! force bounds while the leg is in stance, and three equality rows pinning
//! the force to zero while it swings. Only the first-step forces are acted
//! on; the rest of the plan is discarded at the next solve.

use crate::gait::{ContactFlags, ContactSchedule, GaitError, LEG_COUNT};
use crate::model::{CondensedHorizon, RobotParams, StateVector, INPUT_DIM, STATE_DIM};
use crate::qpsolver::{self, QpError, QpProblem};
use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("bad weights: {0}")]
    BadWeights(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gait query failed: {0}")]
    Gait(#[from] GaitError),
    #[error("QP solve failed: {0}")]
    Solver(#[from] QpError),
    #[error("plan violates contact constraints by {max:.3e}")]
    PlanViolation { max: f64 },
}

/// Diagonal weights: one entry per state dimension (repeated across the
/// horizon) and one scalar on every input component.
#[derive(Debug, Clone, Copy)]
pub struct MpcWeights {
    pub state: [f64; STATE_DIM],
    pub input: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            state: [1.0; STATE_DIM],
            input: 1e-9,
        }
    }
}

impl MpcWeights {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.state.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MpcError::BadWeights("state weights must be >= 0".into()));
        }
        if !(self.input > 0.0) || !self.input.is_finite() {
            return Err(MpcError::BadWeights(
                "input weight must be > 0 for strict convexity".into(),
            ));
        }
        Ok(())
    }
}

/// QP plus the stance context needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct QpBuild {
    pub problem: QpProblem,
    pub flags: Vec<ContactFlags>,
    /// Steps with no stance leg whose state weight was zeroed (none for the
    /// shipped gaits; callers should surface these as warnings).
    pub zeroed_steps: Vec<usize>,
}

/// Optimized force plan. Forces are world-frame, stacked `[leg0 xyz, ...]`
/// per step.
#[derive(Debug, Clone)]
pub struct GrfPlan {
    pub forces: DVector<f64>,
    pub first_step: [Vector3<f64>; LEG_COUNT],
    pub objective: f64,
    pub iterations: usize,
    /// Worst constraint violation at the solution (max-norm, newtons).
    pub max_violation: f64,
    pub solve_time: f64,
    pub steps: usize,
}

/// World-frame wrench, torque stacked over force.
pub type Wrench = Vector6<f64>;

pub fn wrench(torque: Vector3<f64>, force: Vector3<f64>) -> Wrench {
    Vector6::new(torque.x, torque.y, torque.z, force.x, force.y, force.z)
}

/// Samples stance flags at each horizon step start (`k * period`, where the
/// horizon spans the schedule's two gait cycles).
pub fn horizon_flags(schedule: &ContactSchedule, n: usize) -> Result<Vec<ContactFlags>, MpcError> {
    if n == 0 {
        return Err(MpcError::Shape("zero-step horizon".into()));
    }
    let period = schedule.span() / n as f64;
    (0..n)
        .map(|k| schedule.flags_at(k as f64 * period).map_err(MpcError::from))
        .collect()
}

pub fn build_qp(
    horizon: &CondensedHorizon,
    x0: &StateVector,
    weights: &MpcWeights,
    flags: &[ContactFlags],
    params: &RobotParams,
) -> Result<QpBuild, MpcError> {
    weights.validate()?;
    let n = horizon.steps;
    if flags.len() != n {
        return Err(MpcError::Shape(format!(
            "{} flag sets for {} steps",
            flags.len(),
            n
        )));
    }
    if horizon.b_bar.nrows() != STATE_DIM * n || horizon.b_bar.ncols() != INPUT_DIM * n {
        return Err(MpcError::Shape("condensed matrices do not match steps".into()));
    }

    // A step nobody stands on cannot influence its own tracking error; zero
    // that step's weight so the QP stays well posed.
    let zeroed_steps: Vec<usize> = (0..n)
        .filter(|&k| flags[k].iter().all(|s| !s))
        .collect();
    let mut l_diag = DVector::zeros(STATE_DIM * n);
    for k in 0..n {
        if zeroed_steps.contains(&k) {
            continue;
        }
        for s in 0..STATE_DIM {
            l_diag[STATE_DIM * k + s] = weights.state[s];
        }
    }

    let mut lb = horizon.b_bar.clone();
    for (i, mut row) in lb.row_iter_mut().enumerate() {
        row *= l_diag[i];
    }
    let mut h = horizon.b_bar.transpose() * &lb;
    h *= 2.0;
    for i in 0..INPUT_DIM * n {
        h[(i, i)] += 2.0 * weights.input;
    }
    let mut err0 = &horizon.a_bar * x0 - &horizon.x_ref;
    for i in 0..err0.len() {
        err0[i] *= l_diag[i];
    }
    let f = 2.0 * horizon.b_bar.transpose() * err0;

    let stance_total: usize = flags
        .iter()
        .map(|fl| fl.iter().filter(|s| **s).count())
        .sum();
    let swing_total = LEG_COUNT * n - stance_total;
    let mut a_in = DMatrix::zeros(6 * stance_total, INPUT_DIM * n);
    let mut b_in = DVector::zeros(6 * stance_total);
    let mut a_eq = DMatrix::zeros(3 * swing_total, INPUT_DIM * n);
    let b_eq = DVector::zeros(3 * swing_total);
    let mu = params.friction;
    let mut row_in = 0;
    let mut row_eq = 0;
    for (k, fl) in flags.iter().enumerate() {
        for (leg, stance) in fl.iter().enumerate() {
            let cx = INPUT_DIM * k + 3 * leg;
            if *stance {
                // mu*u_z - u_x >= 0, mu*u_z + u_x >= 0, same for u_y.
                for (lat, s) in [(0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0)] {
                    a_in[(row_in, cx + 2)] = mu;
                    a_in[(row_in, cx + lat)] = s;
                    row_in += 1;
                }
                a_in[(row_in, cx + 2)] = 1.0;
                b_in[row_in] = params.fz_min;
                row_in += 1;
                a_in[(row_in, cx + 2)] = -1.0;
                b_in[row_in] = -params.fz_max;
                row_in += 1;
            } else {
                for c in 0..3 {
                    a_eq[(row_eq, cx + c)] = 1.0;
                    row_eq += 1;
                }
            }
        }
    }

    Ok(QpBuild {
        problem: QpProblem {
            h,
            f,
            a_eq,
            b_eq,
            a_in,
            b_in,
        },
        flags: flags.to_vec(),
        zeroed_steps,
    })
}

pub fn solve_mpc(build: &QpBuild, tol: f64) -> Result<GrfPlan, MpcError> {
    solve_mpc_hinted(build, tol, &[])
}

/// Like [`solve_mpc`] with a warm-start hint (inequality rows expected
/// active, e.g. from the previous solve).
pub fn solve_mpc_hinted(build: &QpBuild, tol: f64, hint: &[usize]) -> Result<GrfPlan, MpcError> {
    let started = std::time::Instant::now();
    let sol = qpsolver::solve_hinted(&build.problem, tol, hint)?;
    let kkt = qpsolver::kkt_residuals(&build.problem, &sol);
    let max_violation = kkt.primal_eq.max(kkt.primal_in);
    // Contact consistency is load-bearing: a swing leg with force or a
    // stance force outside the pyramid must never reach the plant.
    if max_violation > 1e-6 {
        return Err(MpcError::PlanViolation { max: max_violation });
    }
    let mut first_step = [Vector3::zeros(); LEG_COUNT];
    for leg in 0..LEG_COUNT {
        first_step[leg] = Vector3::new(
            sol.x[3 * leg],
            sol.x[3 * leg + 1],
            sol.x[3 * leg + 2],
        );
    }
    Ok(GrfPlan {
        steps: build.flags.len(),
        forces: sol.x,
        first_step,
        objective: sol.objective,
        iterations: sol.iterations,
        max_violation,
        solve_time: started.elapsed().as_secs_f64(),
    })
}

/// Net wrench of the first-step forces about the center of mass.
pub fn wrench_from_plan(
    plan: &GrfPlan,
    feet: &[Vector3<f64>; LEG_COUNT],
    com: &Vector3<f64>,
) -> Wrench {
    let mut torque = Vector3::zeros();
    let mut force = Vector3::zeros();
    for leg in 0..LEG_COUNT {
        torque += (feet[leg] - com).cross(&plan.first_step[leg]);
        force += plan.first_step[leg];
    }
    wrench(torque, force)
}

/// Latest-plan mailbox shared between the solve thread and the task loop.
///
/// The contract: readers always see the most recently published complete
/// plan, never a partially written one, and must tolerate a plan up to one
/// solve period old.
#[derive(Default)]
pub struct PlanSlot {
    inner: Mutex<Option<Arc<GrfPlan>>>,
}

impl PlanSlot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, plan: GrfPlan) {
        *self.inner.lock().expect("plan slot poisoned") = Some(Arc::new(plan));
    }

    pub fn latest(&self) -> Option<Arc<GrfPlan>> {
        self.inner.lock().expect("plan slot poisoned").clone()
    }
}
