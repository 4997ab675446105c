//! Linear time-varying centroidal dynamics.
//!
//! The trunk is modeled as a single rigid body driven by ground-reaction
//! forces at the four feet. The state is
//!
//! ```text
//! x = [Θ, r, ω, ṙ, g] ∈ R^15
//! ```
//!
//! with ZYX Euler angles `Θ = (φ roll, θ pitch, ψ yaw)`, COM position `r`,
//! world angular velocity `ω`, COM velocity `ṙ`, and the gravity vector `g`
//! carried as constant state so the dynamics stay linear without an affine
//! term. Inputs are the stacked foot forces `u ∈ R^12`.
//!
//! Continuous dynamics, linearized at a reference orientation and reference
//! torque arms (the gyroscopic term `ω × I_w ω` is dropped here; the
//! simulator plant keeps it):
//!
//! ```text
//! Θ̇ = T⁻¹(Θ_ref) ω        ω̇ = I_w⁻¹ Σ (p_i − r_ref) × F_i
//! ṙ = ṙ                    r̈ = Σ F_i / m + g
//! ```
//!
//! No small-angle assumption is made: `T⁻¹` is evaluated at the full
//! reference orientation and `I_w = R(Θ_ref) I R(Θ_ref)ᵀ`. Discretization is
//! exact zero-order hold through the augmented matrix exponential, and
//! [`condense`] stacks the step matrices into horizon prediction form.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 15;
pub const INPUT_DIM: usize = 12;

/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.81;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Pitch guard distance from the Euler-rate singularity at |θ| = π/2.
pub const PITCH_SINGULARITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("pitch {0:.6} rad is within {PITCH_SINGULARITY_MARGIN:e} of the Euler-rate singularity at ±π/2")]
    PitchSingularity(f64),
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("inertia matrix is not invertible")]
    SingularInertia,
    #[error("horizon inputs are inconsistent: {0}")]
    BadHorizon(String),
}

/// Trunk rigid-body parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RobotParams {
    /// Total mass (kg).
    pub mass: f64,
    /// Body-frame rotational inertia about the COM (kg m^2).
    pub inertia: [f64; 3],
    /// Contact friction coefficient for the pyramid constraints.
    pub friction: f64,
    /// Stance-leg normal force bounds (N).
    pub fz_min: f64,
    pub fz_max: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        let mass = 130.0;
        Self {
            mass,
            inertia: [6.5, 21.0, 22.5],
            friction: 0.7,
            // Upper bound: 2.5x the per-leg share of the weight on a
            // two-leg stance.
            fz_max: 2.5 * mass * GRAVITY / 2.0,
            fz_min: 0.0,
        }
    }
}

impl RobotParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.inertia[0],
            self.inertia[1],
            self.inertia[2],
        ))
    }

    pub fn weight(&self) -> f64 {
        self.mass * GRAVITY
    }
}

/// Body layout shared by foothold planning, references, and the simulator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BodyGeometry {
    /// Hip positions in the body frame, leg order LF, RF, LH, RH.
    pub hip_offsets: [[f64; 3]; 4],
    /// Nominal COM height above the support plane (m).
    pub body_height: f64,
}

impl Default for BodyGeometry {
    fn default() -> Self {
        Self {
            hip_offsets: [
                [0.44, 0.24, 0.0],
                [0.44, -0.24, 0.0],
                [-0.44, 0.24, 0.0],
                [-0.44, -0.24, 0.0],
            ],
            body_height: 0.58,
        }
    }
}

impl BodyGeometry {
    pub fn hip(&self, leg: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.hip_offsets[leg])
    }
}

/// Trunk state. Gravity is appended when converting to the 15-dim vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// ZYX Euler angles (roll, pitch, yaw), rad.
    pub euler: Vector3<f64>,
    /// COM position in world (m).
    pub position: Vector3<f64>,
    /// Angular velocity in world (rad/s).
    pub omega: Vector3<f64>,
    /// COM velocity in world (m/s).
    pub velocity: Vector3<f64>,
}

impl RobotState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            euler: Vector3::zeros(),
            position,
            omega: Vector3::zeros(),
            velocity: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.euler);
        x.fixed_rows_mut::<3>(3).copy_from(&self.position);
        x.fixed_rows_mut::<3>(6).copy_from(&self.omega);
        x.fixed_rows_mut::<3>(9).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(12).copy_from(&gravity_vector());
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            euler: x.fixed_rows::<3>(0).into(),
            position: x.fixed_rows::<3>(3).into(),
            omega: x.fixed_rows::<3>(6).into(),
            velocity: x.fixed_rows::<3>(9).into(),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.euler.z
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_zyx(&self.euler)
    }
}

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World-from-body rotation for ZYX Euler angles: `R = Rz(ψ) Ry(θ) Rx(φ)`.
pub fn rotation_zyx(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sphi, cphi) = euler.x.sin_cos();
    let (sth, cth) = euler.y.sin_cos();
    let (spsi, cpsi) = euler.z.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cphi, -sphi, 0.0, sphi, cphi);
    let ry = Matrix3::new(cth, 0.0, sth, 0.0, 1.0, 0.0, -sth, 0.0, cth);
    let rz = Matrix3::new(cpsi, -spsi, 0.0, spsi, cpsi, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

fn check_pitch(euler: &Vector3<f64>) -> Result<(), ModelError> {
    if euler.y.abs() >= std::f64::consts::FRAC_PI_2 - PITCH_SINGULARITY_MARGIN {
        return Err(ModelError::PitchSingularity(euler.y));
    }
    Ok(())
}

/// Euler-rate map `T(Θ)` with `ω = T(Θ) Θ̇`. Singular iff `cos θ = 0`;
/// errors inside the guard band around |θ| = π/2.
pub fn euler_rate_map(euler: &Vector3<f64>) -> Result<Matrix3<f64>, ModelError> {
    check_pitch(euler)?;
    let (sth, cth) = euler.y.sin_cos();
    let (spsi, cpsi) = euler.z.sin_cos();
    // Columns: roll axis Rz(ψ)Ry(θ)x̂, pitch axis Rz(ψ)ŷ, yaw axis ẑ.
    Ok(Matrix3::new(
        cth * cpsi, -spsi, 0.0,
        cth * spsi, cpsi, 0.0,
        -sth, 0.0, 1.0,
    ))
}

/// Closed-form inverse of [`euler_rate_map`]: `Θ̇ = T⁻¹(Θ) ω`.
pub fn euler_rate_map_inv(euler: &Vector3<f64>) -> Result<Matrix3<f64>, ModelError> {
    check_pitch(euler)?;
    let (sth, cth) = euler.y.sin_cos();
    let (spsi, cpsi) = euler.z.sin_cos();
    let tth = sth / cth;
    Ok(Matrix3::new(
        cpsi / cth, spsi / cth, 0.0,
        -spsi, cpsi, 0.0,
        cpsi * tth, spsi * tth, 1.0,
    ))
}

/// Continuous-time `(A, B)` linearized at a reference orientation and
/// reference torque arms `p_i - com`. Swing legs keep their force columns;
/// the MPC zeroes those inputs with equality constraints instead.
pub fn continuous_matrices(
    params: &RobotParams,
    euler_ref: &Vector3<f64>,
    com_ref: &Vector3<f64>,
    feet: &[Vector3<f64>; 4],
) -> Result<(StateMatrix, InputMatrix), ModelError> {
    let t_inv = euler_rate_map_inv(euler_ref)?;
    let r = rotation_zyx(euler_ref);
    let inertia_world = r * params.inertia_matrix() * r.transpose();
    let iw_inv = inertia_world
        .try_inverse()
        .ok_or(ModelError::SingularInertia)?;

    let mut a = StateMatrix::zeros();
    a.fixed_view_mut::<3, 3>(0, 6).copy_from(&t_inv);
    a.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(9, 12)
        .copy_from(&Matrix3::identity());

    let mut b = InputMatrix::zeros();
    for (i, p) in feet.iter().enumerate() {
        let arm = p - com_ref;
        b.fixed_view_mut::<3, 3>(6, 3 * i)
            .copy_from(&(iw_inv * skew(&arm)));
        b.fixed_view_mut::<3, 3>(9, 3 * i)
            .copy_from(&(Matrix3::identity() / params.mass));
    }
    Ok((a, b))
}

/// Max absolute column sum.
fn l1_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by Pade(6,6) with scaling and squaring; the argument
/// is scaled until its 1-norm is at most 0.5.
fn expm_pade6(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = l1_norm(m);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let a = m / 2f64.powi(squarings as i32);

    // c[j+1] = c[j] (p - j) / ((2p - j)(j + 1)), p = 6.
    let mut coeff = [0.0; 7];
    coeff[0] = 1.0;
    for j in 0..6 {
        coeff[j + 1] = coeff[j] * (6.0 - j as f64) / ((12.0 - j as f64) * (j as f64 + 1.0));
    }

    let mut num = DMatrix::identity(n, n) * coeff[0];
    let mut den = num.clone();
    let mut power = DMatrix::identity(n, n);
    for (j, &c) in coeff.iter().enumerate().skip(1) {
        power = &power * &a;
        num += &power * c;
        if j % 2 == 0 {
            den += &power * c;
        } else {
            den -= &power * c;
        }
    }
    let mut exp = den
        .lu()
        .solve(&num)
        .expect("Pade denominator is nonsingular for scaled arguments");
    for _ in 0..squarings {
        exp = &exp * &exp;
    }
    exp
}

/// Exact zero-order-hold discretization via the augmented matrix exponential
///
/// ```text
/// exp([[A, B], [0, 0]] dt) = [[A_d, B_d], [0, I]]
/// ```
pub fn discretize_zoh(
    a: &StateMatrix,
    b: &InputMatrix,
    dt: f64,
) -> Result<(StateMatrix, InputMatrix), ModelError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(ModelError::BadTimeStep(dt));
    }
    let n = STATE_DIM + INPUT_DIM;
    let mut aug = DMatrix::zeros(n, n);
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            aug[(i, j)] = a[(i, j)] * dt;
        }
        for j in 0..INPUT_DIM {
            aug[(i, STATE_DIM + j)] = b[(i, j)] * dt;
        }
    }
    let exp = expm_pade6(&aug);
    let mut ad = StateMatrix::zeros();
    let mut bd = InputMatrix::zeros();
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            ad[(i, j)] = exp[(i, j)];
        }
        for j in 0..INPUT_DIM {
            bd[(i, j)] = exp[(i, STATE_DIM + j)];
        }
    }
    Ok((ad, bd))
}

/// Per-step discrete dynamics along a horizon.
#[derive(Debug, Clone)]
pub struct DiscreteLtv {
    pub a: Vec<StateMatrix>,
    pub b: Vec<InputMatrix>,
    pub dt: f64,
}

impl DiscreteLtv {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Stacked horizon prediction `X = Ā x0 + B̄ ū` with the stacked reference.
///
/// Row block `k` predicts `x[k+1]`; `B̄` is block lower triangular with
/// `B̄(k, j) = A_d[k] ... A_d[j+1] B_d[j]`.
#[derive(Debug, Clone)]
pub struct CondensedHorizon {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub steps: usize,
}

/// Condenses an LTV horizon into stacked prediction matrices.
pub fn condense(ltv: &DiscreteLtv, x_ref: &[StateVector]) -> Result<CondensedHorizon, ModelError> {
    let n = ltv.len();
    if n == 0 {
        return Err(ModelError::BadHorizon("empty horizon".into()));
    }
    if ltv.b.len() != n {
        return Err(ModelError::BadHorizon(format!(
            "{} A blocks vs {} B blocks",
            n,
            ltv.b.len()
        )));
    }
    if x_ref.len() != n {
        return Err(ModelError::BadHorizon(format!(
            "{} reference samples for {} steps",
            x_ref.len(),
            n
        )));
    }
    let mut a_bar = DMatrix::zeros(STATE_DIM * n, STATE_DIM);
    let mut b_bar = DMatrix::zeros(STATE_DIM * n, INPUT_DIM * n);
    let mut xr = DVector::zeros(STATE_DIM * n);

    // Row k extends row k-1: left-multiply everything by A_d[k], then place
    // B_d[k] on the diagonal.
    let mut phi = *&ltv.a[0]; // A_d[k] ... A_d[0]
    for k in 0..n {
        if k > 0 {
            phi = ltv.a[k] * phi;
        }
        a_bar
            .view_mut((STATE_DIM * k, 0), (STATE_DIM, STATE_DIM))
            .copy_from(&phi);
        for j in 0..k {
            let above = b_bar
                .view((STATE_DIM * (k - 1), INPUT_DIM * j), (STATE_DIM, INPUT_DIM))
                .into_owned();
            let block = ltv.a[k] * above;
            b_bar
                .view_mut((STATE_DIM * k, INPUT_DIM * j), (STATE_DIM, INPUT_DIM))
                .copy_from(&block);
        }
        b_bar
            .view_mut((STATE_DIM * k, INPUT_DIM * k), (STATE_DIM, INPUT_DIM))
            .copy_from(&ltv.b[k]);
        xr.rows_mut(STATE_DIM * k, STATE_DIM)
            .copy_from(&x_ref[k]);
    }
    Ok(CondensedHorizon {
        a_bar,
        b_bar,
        x_ref: xr,
        steps: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent matrix-exponential oracle: plain Taylor series with its
    /// own scaling threshold. Shares no code with the Pade path.
    fn expm_taylor(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let norm = l1_norm(m);
        let squarings = if norm > 0.25 {
            (norm / 0.25).log2().ceil() as u32
        } else {
            0
        };
        let a = m / 2f64.powi(squarings as i32);
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..60 {
            term = &term * &a / k as f64;
            sum += &term;
            if l1_norm(&term) < 1e-18 {
                break;
            }
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    fn default_feet() -> [Vector3<f64>; 4] {
        let g = BodyGeometry::default();
        [
            g.hip(0) - Vector3::new(0.0, 0.0, g.body_height),
            g.hip(1) - Vector3::new(0.0, 0.0, g.body_height),
            g.hip(2) - Vector3::new(0.0, 0.0, g.body_height),
            g.hip(3) - Vector3::new(0.0, 0.0, g.body_height),
        ]
    }

    fn splitmix(state: &mut u64) -> f64 {
        // Deterministic uniform in [-1, 1).
        *state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        (z >> 12) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
    }

    #[test]
    fn euler_rate_map_identity_at_zero() {
        let t = euler_rate_map(&Vector3::zeros()).unwrap();
        assert_relative_eq!(t, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn euler_rate_map_inverse_is_exact() {
        let mut s = 7u64;
        for _ in 0..50 {
            let e = Vector3::new(
                1.2 * splitmix(&mut s),
                1.3 * splitmix(&mut s),
                3.0 * splitmix(&mut s),
            );
            let t = euler_rate_map(&e).unwrap();
            let ti = euler_rate_map_inv(&e).unwrap();
            assert_relative_eq!(t * ti, Matrix3::identity(), epsilon = 1e-13);
        }
    }

    #[test]
    fn euler_rate_map_singularity_guard() {
        let near = Vector3::new(0.0, std::f64::consts::FRAC_PI_2 - 1e-9, 0.0);
        assert!(matches!(
            euler_rate_map(&near),
            Err(ModelError::PitchSingularity(_))
        ));
        assert!(euler_rate_map_inv(&-near).is_err());
        let ok = Vector3::new(0.0, std::f64::consts::FRAC_PI_2 - 1e-3, 0.0);
        assert!(euler_rate_map(&ok).is_ok());
    }

    /// Finite-difference oracle: ω from Ṙ Rᵀ must match T(Θ) Θ̇ to first
    /// order, with the residual shrinking linearly in h.
    #[test]
    fn euler_rate_map_matches_rotation_derivative() {
        let mut s = 99u64;
        for _ in 0..20 {
            let e = Vector3::new(
                1.0 * splitmix(&mut s),
                1.2 * splitmix(&mut s),
                3.0 * splitmix(&mut s),
            );
            let ed = Vector3::new(splitmix(&mut s), splitmix(&mut s), splitmix(&mut s));
            let omega = euler_rate_map(&e).unwrap() * ed;
            let fd_omega = |h: f64| -> Vector3<f64> {
                let r0 = rotation_zyx(&e);
                let r1 = rotation_zyx(&(e + ed * h));
                let w = (r1 - r0) * r0.transpose() / h;
                Vector3::new(w[(2, 1)] - w[(1, 2)], w[(0, 2)] - w[(2, 0)], w[(1, 0)] - w[(0, 1)])
                    / 2.0
            };
            let err = |h: f64| (fd_omega(h) - omega).norm();
            let e1 = err(1e-4);
            let e2 = err(5e-5);
            assert!(e1 < 1e-3 * omega.norm().max(1.0), "err {e1}");
            // First-order convergence: halving h roughly halves the error.
            assert!(e2 < 0.6 * e1 + 1e-12, "e1 {e1} e2 {e2}");
        }
    }

    #[test]
    fn continuous_matrices_cross_product_row() {
        // Single effective foot 0.5 m under the COM, unit x force:
        // moment (0,0,-0.5) x (1,0,0) = (0,-0.5,0).
        let mut p = RobotParams::default();
        p.inertia = [1.0, 1.0, 1.0];
        let feet = [
            Vector3::new(0.0, 0.0, -0.5),
            Vector3::new(0.0, 0.0, -0.5),
            Vector3::new(0.0, 0.0, -0.5),
            Vector3::new(0.0, 0.0, -0.5),
        ];
        let (a, b) = continuous_matrices(&p, &Vector3::zeros(), &Vector3::zeros(), &feet).unwrap();
        let mut u = InputVector::zeros();
        u[0] = 1.0; // +x on leg 0
        let xdot = b * u;
        assert_relative_eq!(
            Vector3::from(xdot.fixed_rows::<3>(6)),
            Vector3::new(0.0, -0.5, 0.0),
            epsilon = 1e-14
        );
        // A wiring: velocity integrates position, gravity feeds velocity.
        assert_relative_eq!(a.fixed_view::<3, 3>(3, 9).into_owned(), Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(a.fixed_view::<3, 3>(9, 12).into_owned(), Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(a.fixed_view::<3, 3>(0, 6).into_owned(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn free_fall_and_weight_cancellation() {
        let params = RobotParams::default();
        let feet = default_feet();
        let state = RobotState::at_rest(Vector3::new(0.0, 0.0, 0.58));
        let (a, b) =
            continuous_matrices(&params, &Vector3::zeros(), &state.position, &feet).unwrap();
        let x = state.to_vector();
        // No forces: free fall.
        let xdot = a * x;
        assert_relative_eq!(
            Vector3::from(xdot.fixed_rows::<3>(9)),
            gravity_vector(),
            epsilon = 1e-14
        );
        // Four symmetric feet at mg/4: zero linear and angular acceleration.
        let mut u = InputVector::zeros();
        for i in 0..4 {
            u[3 * i + 2] = params.weight() / 4.0;
        }
        let xdot = a * x + b * u;
        assert_relative_eq!(xdot.fixed_rows::<3>(6).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(xdot.fixed_rows::<3>(9).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn continuous_matrices_depend_on_arms_not_absolute_position() {
        let params = RobotParams::default();
        let e = Vector3::new(0.05, -0.1, 0.8);
        let feet = default_feet();
        let shift = Vector3::new(3.0, -2.0, 0.7);
        let shifted: [Vector3<f64>; 4] = std::array::from_fn(|i| feet[i] + shift);
        let (a0, b0) = continuous_matrices(&params, &e, &Vector3::zeros(), &feet).unwrap();
        let (a1, b1) = continuous_matrices(&params, &e, &shift, &shifted).unwrap();
        assert_relative_eq!(a0, a1, epsilon = 1e-13);
        assert_relative_eq!(b0, b1, epsilon = 1e-13);
    }

    #[test]
    fn discretize_identity_when_a_zero() {
        let a = StateMatrix::zeros();
        let mut b = InputMatrix::zeros();
        b[(9, 0)] = 2.0;
        let (ad, bd) = discretize_zoh(&a, &b, 0.3).unwrap();
        assert_relative_eq!(ad, StateMatrix::identity(), epsilon = 1e-14);
        assert_relative_eq!(bd, b * 0.3, epsilon = 1e-14);
    }

    #[test]
    fn discretize_double_integrator_exact() {
        // Velocity-integrates-position block: A nilpotent, closed form
        // A_d = I + A dt, B_d = B dt + A B dt^2 / 2.
        let params = RobotParams::default();
        let feet = default_feet();
        let (a, b) = continuous_matrices(&params, &Vector3::zeros(), &Vector3::zeros(), &feet)
            .unwrap();
        let dt = 0.04;
        let (ad, bd) = discretize_zoh(&a, &b, dt).unwrap();
        let expect_ad = StateMatrix::identity() + a * dt;
        // A^2 has one nonzero block (gravity into position through velocity).
        let expect_ad2 = expect_ad + a * a * dt * dt / 2.0;
        assert_relative_eq!(ad, expect_ad2, epsilon = 1e-12);
        let expect_bd = b * dt + a * b * dt * dt / 2.0;
        assert_relative_eq!(bd, expect_bd, epsilon = 1e-12);
    }

    #[test]
    fn discretize_matches_series_oracle() {
        let mut s = 2024u64;
        for _ in 0..50 {
            // Physically scaled instances: ||A dt|| of order one, so the
            // absolute elementwise tolerance is meaningful while the
            // scaling-and-squaring path still triggers.
            let mut a = StateMatrix::zeros();
            let mut b = InputMatrix::zeros();
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    a[(i, j)] = 0.8 * splitmix(&mut s);
                }
                for j in 0..INPUT_DIM {
                    b[(i, j)] = 0.8 * splitmix(&mut s);
                }
            }
            let dt = 0.02 + 0.13 * (splitmix(&mut s) + 1.0) / 2.0;
            let (ad, bd) = discretize_zoh(&a, &b, dt).unwrap();

            let n = STATE_DIM + INPUT_DIM;
            let mut aug = DMatrix::zeros(n, n);
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    aug[(i, j)] = a[(i, j)] * dt;
                }
                for j in 0..INPUT_DIM {
                    aug[(i, STATE_DIM + j)] = b[(i, j)] * dt;
                }
            }
            let exp = expm_taylor(&aug);
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    assert!((ad[(i, j)] - exp[(i, j)]).abs() < 1e-9, "A_d ({i},{j})");
                }
                for j in 0..INPUT_DIM {
                    assert!(
                        (bd[(i, j)] - exp[(i, STATE_DIM + j)]).abs() < 1e-9,
                        "B_d ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn discretize_rejects_bad_dt() {
        let a = StateMatrix::zeros();
        let b = InputMatrix::zeros();
        assert!(matches!(
            discretize_zoh(&a, &b, 0.0),
            Err(ModelError::BadTimeStep(_))
        ));
        assert!(discretize_zoh(&a, &b, f64::NAN).is_err());
    }

    fn random_ltv(s: &mut u64, n: usize) -> DiscreteLtv {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            // Near-identity step matrices like a real discretization, so
            // products stay O(1) and absolute tolerances stay sharp.
            let mut ak = StateMatrix::identity();
            let mut bk = InputMatrix::zeros();
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    ak[(i, j)] += 0.08 * splitmix(s);
                }
                for j in 0..INPUT_DIM {
                    bk[(i, j)] = 0.5 * splitmix(s);
                }
            }
            a.push(ak);
            b.push(bk);
        }
        DiscreteLtv { a, b, dt: 0.05 }
    }

    #[test]
    fn condense_single_step() {
        let mut s = 5u64;
        let ltv = random_ltv(&mut s, 1);
        let c = condense(&ltv, &[StateVector::zeros()]).unwrap();
        assert_relative_eq!(
            c.a_bar,
            DMatrix::from_iterator(15, 15, ltv.a[0].iter().cloned()),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            c.b_bar,
            DMatrix::from_iterator(15, 12, ltv.b[0].iter().cloned()),
            epsilon = 1e-15
        );
    }

    /// Oracle: propagate the recursion x[k+1] = A_d[k] x[k] + B_d[k] u[k]
    /// directly and compare against the stacked form.
    #[test]
    fn condense_matches_recursion_oracle() {
        let mut s = 31u64;
        for trial in 0..20 {
            let n = 2 + (trial % 7);
            let ltv = random_ltv(&mut s, n);
            let xref = vec![StateVector::zeros(); n];
            let c = condense(&ltv, &xref).unwrap();

            let mut x0 = StateVector::zeros();
            for i in 0..STATE_DIM {
                x0[i] = splitmix(&mut s);
            }
            let mut us = Vec::new();
            let mut u_stacked = DVector::zeros(INPUT_DIM * n);
            for k in 0..n {
                let mut u = InputVector::zeros();
                for i in 0..INPUT_DIM {
                    u[i] = splitmix(&mut s);
                }
                u_stacked.rows_mut(INPUT_DIM * k, INPUT_DIM).copy_from(&u);
                us.push(u);
            }

            let mut x = x0;
            let mut expected = DVector::zeros(STATE_DIM * n);
            for k in 0..n {
                x = ltv.a[k] * x + ltv.b[k] * us[k];
                expected.rows_mut(STATE_DIM * k, STATE_DIM).copy_from(&x);
            }
            let x0_d = DVector::from_iterator(STATE_DIM, x0.iter().cloned());
            let got = &c.a_bar * &x0_d + &c.b_bar * &u_stacked;
            let err = (&got - &expected).amax();
            assert!(err < 1e-10, "n = {n}, err = {err}");

            // Zero input reduces to the A-chain alone.
            let free = &c.a_bar * &x0_d;
            let mut x = x0;
            for k in 0..n {
                x = ltv.a[k] * x;
                let blk = free.rows(STATE_DIM * k, STATE_DIM);
                assert!((blk - x).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn condense_rejects_mismatched_lengths() {
        let mut s = 1u64;
        let ltv = random_ltv(&mut s, 3);
        assert!(condense(&ltv, &[StateVector::zeros(); 2]).is_err());
        let empty = DiscreteLtv {
            a: vec![],
            b: vec![],
            dt: 0.05,
        };
        assert!(condense(&empty, &[]).is_err());
    }

    /// Nonlinear-vs-linearized single step: at the linearization point the
    /// discretization error is O(dt^2), so halving dt cuts the defect by
    /// about 4.
    #[test]
    fn linearization_error_shrinks_quadratically() {
        let params = RobotParams::default();
        let feet = default_feet();
        let euler_ref = Vector3::new(0.08, -0.05, 0.4);
        let com = Vector3::new(0.0, 0.0, 0.58);
        let state = RobotState {
            euler: euler_ref,
            position: com,
            omega: Vector3::new(0.3, -0.2, 0.5),
            velocity: Vector3::new(0.4, 0.1, -0.2),
        };
        let mut u = InputVector::zeros();
        for i in 0..4 {
            u[3 * i] = 20.0;
            u[3 * i + 2] = params.weight() / 4.0 + 30.0 * (i as f64 - 1.5);
        }

        // Reference nonlinear flow: T depends on the instantaneous angles,
        // arms on the instantaneous COM; gyroscopic term still omitted to
        // isolate the time-discretization error.
        let nonlinear = |x: &StateVector, h: f64| -> StateVector {
            let steps = 2000;
            let dt = h / steps as f64;
            let mut x = *x;
            for _ in 0..steps {
                let st = RobotState::from_vector(&x);
                let rot = rotation_zyx(&st.euler);
                let iw = rot * params.inertia_matrix() * rot.transpose();
                let mut torque = Vector3::zeros();
                let mut force = gravity_vector() * params.mass;
                for (i, p) in feet.iter().enumerate() {
                    let f = Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]);
                    torque += (p - st.position).cross(&f);
                    force += f;
                }
                let mut dx = StateVector::zeros();
                dx.fixed_rows_mut::<3>(0)
                    .copy_from(&(euler_rate_map_inv(&st.euler).unwrap() * st.omega));
                dx.fixed_rows_mut::<3>(3).copy_from(&st.velocity);
                dx.fixed_rows_mut::<3>(6)
                    .copy_from(&(iw.try_inverse().unwrap() * torque));
                dx.fixed_rows_mut::<3>(9).copy_from(&(force / params.mass));
                x += dx * dt;
            }
            x
        };

        let defect = |h: f64| -> f64 {
            let (a, b) = continuous_matrices(&params, &euler_ref, &com, &feet).unwrap();
            let (ad, bd) = discretize_zoh(&a, &b, h).unwrap();
            let lin = ad * state.to_vector() + bd * u;
            (lin - nonlinear(&state.to_vector(), h)).amax()
        };

        let e1 = defect(0.02);
        let e2 = defect(0.01);
        assert!(e1 > 0.0);
        assert!(e2 < e1 / 3.5, "e1 = {e1}, e2 = {e2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn gravity_state_is_invariant(dt in 0.01f64..0.2, yaw in -3.0f64..3.0) {
            let params = RobotParams::default();
            let feet = [
                Vector3::new(0.4, 0.3, 0.0),
                Vector3::new(0.4, -0.3, 0.0),
                Vector3::new(-0.4, 0.3, 0.0),
                Vector3::new(-0.4, -0.3, 0.0),
            ];
            let e = Vector3::new(0.0, 0.0, yaw);
            let (a, b) = continuous_matrices(&params, &e, &Vector3::new(0.0, 0.0, 0.58), &feet).unwrap();
            let (ad, _bd) = discretize_zoh(&a, &b, dt).unwrap();
            // Gravity rows propagate unchanged: bottom block is identity.
            for i in 12..15 {
                for j in 0..15 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((ad[(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }
}
