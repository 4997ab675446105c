//! Leg-inertia compensation and stance force distribution.
//!
//! Swinging legs carry momentum the trunk controller does not model. The
//! cross-inertia matrix built here maps joint accelerations to the reaction
//! wrench they impose on the trunk, so the controller can add that wrench to
//! its own output before distributing the total to the stance feet.
//!
//! Legs are modeled as chains of point masses: an abduction link, an upper
//! link, and a lower link, each with its mass at a configurable fraction of
//! its length. That is enough to reproduce the swing reaction while keeping
//! an independent momentum oracle tractable.

use crate::model::{skew, RobotState};
use crate::mpc::Wrench;
use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

pub const JOINT_COUNT: usize = 12;

/// Joint-acceleration-to-trunk-wrench map (torque rows above force rows).
pub type CrossInertia = SMatrix<f64, 6, 12>;
/// Stacked joint vector, leg-major: [q_haa, q_hfe, q_kfe] x (LF, RF, LH, RH).
pub type JointVector = SVector<f64, 12>;

#[derive(Debug, Error)]
pub enum CompensationError {
    #[error("leg {leg}: target out of reach")]
    Unreachable { leg: usize },
    #[error("bad leg model: {0}")]
    BadModel(String),
}

/// Point-mass leg chain parameters, shared by all four legs up to mirroring.
#[derive(Debug, Clone)]
pub struct LegModel {
    /// Hip (abduction joint) positions in the body frame, LF RF LH RH.
    pub hips: [Vector3<f64>; 4],
    /// Lateral sign of the abduction offset per leg (+1 left, -1 right).
    pub side_sign: [f64; 4],
    /// Knee bend direction per leg.
    pub knee_sign: [f64; 4],
    /// Abduction link length (hip to thigh joint, lateral).
    pub l1: f64,
    /// Upper link length.
    pub l2: f64,
    /// Lower link length.
    pub l3: f64,
    /// Link point masses (abduction, upper, lower), kg.
    pub masses: [f64; 3],
    /// Mass position along each link as a fraction of its length.
    pub com_fraction: f64,
}

impl Default for LegModel {
    fn default() -> Self {
        Self {
            hips: [
                Vector3::new(0.44, 0.24, 0.0),
                Vector3::new(0.44, -0.24, 0.0),
                Vector3::new(-0.44, 0.24, 0.0),
                Vector3::new(-0.44, -0.24, 0.0),
            ],
            side_sign: [1.0, -1.0, 1.0, -1.0],
            knee_sign: [-1.0, -1.0, 1.0, 1.0],
            l1: 0.10,
            l2: 0.38,
            l3: 0.38,
            masses: [1.5, 2.5, 1.0],
            com_fraction: 0.5,
        }
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// World-frame kinematics of one leg: joint centers and axes, link mass
/// centers, foot point.
#[derive(Debug, Clone)]
pub struct LegKinematics {
    pub joint_centers: [Vector3<f64>; 3],
    pub joint_axes: [Vector3<f64>; 3],
    pub mass_centers: [Vector3<f64>; 3],
    pub foot: Vector3<f64>,
}

impl LegModel {
    pub fn validate(&self) -> Result<(), CompensationError> {
        if self.masses.iter().any(|&m| m < 0.0) {
            return Err(CompensationError::BadModel("negative link mass".into()));
        }
        if self.l1 <= 0.0 || self.l2 <= 0.0 || self.l3 <= 0.0 {
            return Err(CompensationError::BadModel("link lengths must be positive".into()));
        }
        Ok(())
    }

    /// Forward kinematics for one leg, all quantities in the world frame.
    ///
    /// The abduction joint rotates about the body x axis, thigh and knee
    /// about the abducted y axis.
    pub fn leg_kinematics(
        &self,
        leg: usize,
        base_rotation: &Matrix3<f64>,
        base_position: &Vector3<f64>,
        q: &[f64; 3],
    ) -> LegKinematics {
        let s = self.side_sign[leg];
        let f = self.com_fraction;
        let hip = base_position + base_rotation * self.hips[leg];
        let r1 = base_rotation * rot_x(q[0]);
        let thigh_joint = hip + r1 * Vector3::new(0.0, s * self.l1, 0.0);
        let r2 = r1 * rot_y(q[1]);
        let knee = thigh_joint + r2 * Vector3::new(0.0, 0.0, -self.l2);
        let r3 = r2 * rot_y(q[2]);
        let foot = knee + r3 * Vector3::new(0.0, 0.0, -self.l3);
        LegKinematics {
            joint_centers: [hip, thigh_joint, knee],
            joint_axes: [
                base_rotation * Vector3::x(),
                r1 * Vector3::y(),
                r2 * Vector3::y(),
            ],
            mass_centers: [
                hip + r1 * Vector3::new(0.0, s * f * self.l1, 0.0),
                thigh_joint + r2 * Vector3::new(0.0, 0.0, -f * self.l2),
                knee + r3 * Vector3::new(0.0, 0.0, -f * self.l3),
            ],
            foot,
        }
    }

    /// World foot position for one leg.
    pub fn foot_position(
        &self,
        leg: usize,
        base_rotation: &Matrix3<f64>,
        base_position: &Vector3<f64>,
        q: &[f64; 3],
    ) -> Vector3<f64> {
        self.leg_kinematics(leg, base_rotation, base_position, q).foot
    }

    /// Closed-form inverse kinematics for a world-frame foot target.
    ///
    /// Returns the joint angles on this leg's knee-bend branch, with the
    /// foot below the hip line in the abducted leg plane (the stance and
    /// swing regime; fully folded-up poses resolve to the mirrored
    /// abduction angle).
    pub fn inverse_kinematics(
        &self,
        leg: usize,
        base_rotation: &Matrix3<f64>,
        base_position: &Vector3<f64>,
        target: &Vector3<f64>,
    ) -> Result<[f64; 3], CompensationError> {
        let s = self.side_sign[leg];
        // Target relative to the hip, in the body frame.
        let d = base_rotation.transpose() * (target - base_position) - self.hips[leg];
        let rho_sq = d.y * d.y + d.z * d.z;
        if rho_sq < self.l1 * self.l1 {
            return Err(CompensationError::Unreachable { leg });
        }
        let rho = rho_sq.sqrt();
        let q1 = d.z.atan2(d.y) + (s * self.l1 / rho).clamp(-1.0, 1.0).acos();
        // Remaining chain lives in the abducted x-z plane.
        let e = rot_x(-q1) * d;
        let (x, z) = (e.x, e.z);
        let r_sq = x * x + z * z;
        let reach_max = self.l2 + self.l3;
        let reach_min = (self.l2 - self.l3).abs();
        if r_sq > reach_max * reach_max * (1.0 + 1e-9)
            || r_sq < reach_min * reach_min * (1.0 - 1e-9)
        {
            return Err(CompensationError::Unreachable { leg });
        }
        let cos_knee =
            ((r_sq - self.l2 * self.l2 - self.l3 * self.l3) / (2.0 * self.l2 * self.l3))
                .clamp(-1.0, 1.0);
        let sin_knee = self.knee_sign[leg] * (1.0 - cos_knee * cos_knee).max(0.0).sqrt();
        let q3 = sin_knee.atan2(cos_knee);
        let q2 = (-x).atan2(-z) - (self.l3 * sin_knee).atan2(self.l2 + self.l3 * cos_knee);
        let wrap = |a: f64| (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
            - std::f64::consts::PI;
        Ok([wrap(q1), wrap(q2), wrap(q3)])
    }
}

/// Splits the stacked joint vector into one leg's angles.
pub fn leg_slice(q: &JointVector, leg: usize) -> [f64; 3] {
    [q[3 * leg], q[3 * leg + 1], q[3 * leg + 2]]
}

/// Builds the 6x12 map from joint accelerations to the trunk wrench the legs
/// demand. Column j sums, over the links moved by joint j,
/// `m_k [ (c_k - r) x (a_j x (c_k - o_j)) ; a_j x (c_k - o_j) ]`
/// with `c_k` the link mass center, `a_j`/`o_j` the joint axis and center,
/// and `r` the trunk reference point.
pub fn cross_inertia(model: &LegModel, state: &RobotState, q: &JointVector) -> CrossInertia {
    let rotation = state.rotation();
    let r = state.position;
    let mut m = CrossInertia::zeros();
    for leg in 0..4 {
        let kin = model.leg_kinematics(leg, &rotation, &r, &leg_slice(q, leg));
        for joint in 0..3 {
            let col = 3 * leg + joint;
            let axis = kin.joint_axes[joint];
            let center = kin.joint_centers[joint];
            let mut torque = Vector3::zeros();
            let mut force = Vector3::zeros();
            // Links at or below this joint move with it.
            for link in joint..3 {
                let mass = model.masses[link];
                let c = kin.mass_centers[link];
                let velocity = axis.cross(&(c - center));
                torque += mass * (c - r).cross(&velocity);
                force += mass * velocity;
            }
            m.fixed_view_mut::<3, 1>(0, col).copy_from(&torque);
            m.fixed_view_mut::<3, 1>(3, col).copy_from(&force);
        }
    }
    m
}

/// Reaction wrench for the desired joint accelerations.
pub fn compensation_wrench(m_ua: &CrossInertia, qdd_desired: &JointVector) -> Wrench {
    m_ua * qdd_desired
}

#[derive(Debug, Clone)]
pub struct CompensationResult {
    pub m_ua: CrossInertia,
    pub w_l: Wrench,
    pub w_d: Wrench,
}

/// Full compensation step: cross-inertia at the current configuration, leg
/// wrench for the desired accelerations, and the total desired wrench.
pub fn compensate(
    model: &LegModel,
    state: &RobotState,
    q: &JointVector,
    qdd_desired: &JointVector,
    w_mpc: &Wrench,
) -> CompensationResult {
    let m_ua = cross_inertia(model, state, q);
    let w_l = compensation_wrench(&m_ua, qdd_desired);
    CompensationResult {
        m_ua,
        w_l,
        w_d: w_mpc + w_l,
    }
}

/// Stance force set realizing a desired trunk wrench.
#[derive(Debug, Clone)]
pub struct ForceDistribution {
    pub forces: Vec<Vector3<f64>>,
    /// Norm of the wrench error after distribution.
    pub residual: f64,
    /// True when friction or normal-force bounds had to clip a foot.
    pub clamped: bool,
}

fn grasp_map(feet: &[Vector3<f64>], com: &Vector3<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(6, 3 * feet.len());
    for (i, p) in feet.iter().enumerate() {
        g.view_mut((0, 3 * i), (3, 3)).copy_from(&skew(&(p - com)));
        g.view_mut((3, 3 * i), (3, 3)).copy_from(&Matrix3::identity());
    }
    g
}

fn clamp_force(f: &Vector3<f64>, mu: f64, fz_min: f64, fz_max: f64) -> (Vector3<f64>, bool) {
    let fz = f.z.clamp(fz_min, fz_max);
    let mut tangent = Vector3::new(f.x, f.y, 0.0);
    let limit = mu * fz.max(0.0);
    let t_norm = tangent.norm();
    if t_norm > limit {
        tangent *= if t_norm > 0.0 { limit / t_norm } else { 0.0 };
    }
    let clamped = fz != f.z || t_norm > limit + 1e-15;
    (Vector3::new(tangent.x, tangent.y, fz), clamped)
}

/// Distributes a desired trunk wrench over the stance feet.
///
/// Solves the least-norm force set reproducing the wrench through the grasp
/// map, then clips any foot that violates the friction cone or normal
/// bounds and re-solves once over the remaining feet. A final clip keeps
/// every returned force inside the cone and bounds no matter what the
/// re-solve asked for; the residual reports how much of the wrench the
/// final forces miss.
pub fn distribute_wrench(
    w_d: &Wrench,
    feet: &[Vector3<f64>],
    com: &Vector3<f64>,
    mu: f64,
    fz_min: f64,
    fz_max: f64,
) -> ForceDistribution {
    if feet.is_empty() {
        return ForceDistribution {
            forces: Vec::new(),
            residual: w_d.norm(),
            clamped: false,
        };
    }
    let g = grasp_map(feet, com);
    let rhs = DMatrix::from_column_slice(6, 1, w_d.as_slice());
    let solution = g
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .expect("svd of grasp map");
    let mut forces: Vec<Vector3<f64>> = (0..feet.len())
        .map(|i| Vector3::new(solution[3 * i], solution[3 * i + 1], solution[3 * i + 2]))
        .collect();

    let mut clamped_any = false;
    let mut free = Vec::new();
    for (i, f) in forces.iter_mut().enumerate() {
        let (clipped, clamped) = clamp_force(f, mu, fz_min, fz_max);
        if clamped {
            *f = clipped;
            clamped_any = true;
        } else {
            free.push(i);
        }
    }
    if clamped_any && !free.is_empty() {
        // Re-solve for the unclipped feet against the leftover wrench.
        let mut remainder = *w_d;
        for (i, f) in forces.iter().enumerate() {
            if !free.contains(&i) {
                remainder -= Wrench::from_iterator(
                    (feet[i] - com).cross(f).iter().chain(f.iter()).copied(),
                );
            }
        }
        let free_feet: Vec<Vector3<f64>> = free.iter().map(|&i| feet[i]).collect();
        let g_free = grasp_map(&free_feet, com);
        let rhs = DMatrix::from_column_slice(6, 1, remainder.as_slice());
        if let Ok(sol) = g_free.svd(true, true).solve(&rhs, 1e-12) {
            for (slot, &i) in free.iter().enumerate() {
                let (clipped, _) = clamp_force(
                    &Vector3::new(sol[3 * slot], sol[3 * slot + 1], sol[3 * slot + 2]),
                    mu,
                    fz_min,
                    fz_max,
                );
                forces[i] = clipped;
            }
        }
    }

    let mut achieved = Wrench::zeros();
    for (i, f) in forces.iter().enumerate() {
        achieved += Wrench::from_iterator(
            (feet[i] - com).cross(f).iter().chain(f.iter()).copied(),
        );
    }
    ForceDistribution {
        forces,
        residual: (achieved - w_d).norm(),
        clamped: clamped_any,
    }
}
