//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! min  1/2 xᵀ H x + fᵀ x
//! s.t. A_eq x = b_eq,   A_in x ≥ b_in
//! ```
//!
//! with the Goldfarb-Idnani dual active-set method: start at the
//! unconstrained minimum, repeatedly pick a violated constraint, and take
//! primal/dual steps that keep the working set optimal, adding the
//! constraint on a full step and dropping a blocking one on a partial step.
//! Equality constraints are forced into the working set first and never
//! leave it. The factorization is a Cholesky of `H` plus a QR of the active
//! normals updated by Givens rotations, so each change of working set costs
//! `O(d^2)`.
//!
//! The solver is exact in exact arithmetic; the `tol` argument only sets the
//! violation threshold and the KKT guarantees of the result. Every solve is
//! deterministic: identical inputs produce bitwise-identical iterates.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("problem is malformed: {0}")]
    BadProblem(String),
    #[error("equality constraints are linearly dependent or inconsistent")]
    DegenerateEqualities,
    #[error("problem is infeasible (first detected at inequality {constraint})")]
    Infeasible { constraint: usize },
    #[error("iteration limit {0} exceeded")]
    IterationLimit(usize),
    #[error("Hessian is not positive definite even after regularization")]
    NotPositiveDefinite,
}

/// Eigenvalue floor below which `H` gets `+1e-10 I` before factorization.
pub const REGULARIZATION_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let d = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            b_in: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        if self.h.nrows() != d || self.h.ncols() != d {
            return Err(QpError::BadProblem(format!(
                "H is {}x{}, expected {d}x{d}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_eq.ncols() != d && self.a_eq.nrows() > 0 {
            return Err(QpError::BadProblem("A_eq column count".into()));
        }
        if self.a_in.ncols() != d && self.a_in.nrows() > 0 {
            return Err(QpError::BadProblem("A_in column count".into()));
        }
        if self.a_eq.nrows() != self.b_eq.len() || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::BadProblem("constraint row/rhs mismatch".into()));
        }
        let scale = self.h.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-9 * scale {
                    return Err(QpError::BadProblem(format!(
                        "H not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain-text dump for debugging solver inputs.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let mut mat = |name: &str, m: &DMatrix<f64>| {
            let _ = writeln!(s, "{name} {}x{}", m.nrows(), m.ncols());
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.9e}", m[(i, j)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        mat("H", &self.h);
        mat("A_eq", &self.a_eq);
        mat("A_in", &self.a_in);
        let vec_line = |name: &str, v: &DVector<f64>| {
            let row: Vec<String> = v.iter().map(|x| format!("{x:.9e}")).collect();
            format!("{name} {}\n{}\n", v.len(), row.join(" "))
        };
        s.push_str(&vec_line("f", &self.f));
        s.push_str(&vec_line("b_eq", &self.b_eq));
        s.push_str(&vec_line("b_in", &self.b_in));
        s
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Objective of the problem as given (regularization not included).
    pub objective: f64,
    /// Indices of inequality rows active at the solution.
    pub active_set: Vec<usize>,
    pub eq_multipliers: DVector<f64>,
    /// One entry per inequality row; zero when inactive.
    pub in_multipliers: DVector<f64>,
    pub iterations: usize,
    /// True when `H` needed the `+1e-10 I` floor.
    pub regularized: bool,
}

/// Max-norm KKT residuals of a solution against its problem.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// ‖H x + f − A_eqᵀ λ − A_inᵀ μ‖∞
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_in: f64,
    pub complementarity: f64,
    /// Most negative inequality multiplier, clamped at 0.
    pub dual_feasibility: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.complementarity)
            .max(self.dual_feasibility)
    }
}

pub fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> KktReport {
    let mut grad = &p.h * &s.x + &p.f;
    if p.a_eq.nrows() > 0 {
        grad -= p.a_eq.transpose() * &s.eq_multipliers;
    }
    if p.a_in.nrows() > 0 {
        grad -= p.a_in.transpose() * &s.in_multipliers;
    }
    let primal_eq = if p.a_eq.nrows() > 0 {
        (&p.a_eq * &s.x - &p.b_eq).amax()
    } else {
        0.0
    };
    let mut primal_in = 0.0f64;
    let mut complementarity = 0.0f64;
    let mut dual = 0.0f64;
    for i in 0..p.a_in.nrows() {
        let slack = p.a_in.row(i).transpose().dot(&s.x) - p.b_in[i];
        primal_in = primal_in.max(-slack);
        complementarity = complementarity.max((s.in_multipliers[i] * slack).abs());
        dual = dual.max(-s.in_multipliers[i]);
    }
    KktReport {
        stationarity: if grad.is_empty() { 0.0 } else { grad.amax() },
        primal_eq,
        primal_in,
        complementarity,
        dual_feasibility: dual,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Con {
    Eq(usize),
    In(usize),
}

struct Workspace<'a> {
    p: &'a QpProblem,
    x: DVector<f64>,
    /// J = L⁻ᵀ Q; first q columns span the active normals in the H-metric.
    j: DMatrix<f64>,
    /// Upper-triangular factor of the active normals, q x q in the top left.
    r: DMatrix<f64>,
    active: Vec<(Con, f64)>,
    u: Vec<f64>,
    iterations: usize,
    limit: usize,
}

impl<'a> Workspace<'a> {
    fn q(&self) -> usize {
        self.active.len()
    }

    fn normal(&self, c: Con, sign: f64) -> DVector<f64> {
        match c {
            Con::Eq(i) => self.p.a_eq.row(i).transpose() * sign,
            Con::In(i) => self.p.a_in.row(i).transpose() * sign,
        }
    }

    fn rhs(&self, c: Con, sign: f64) -> f64 {
        match c {
            Con::Eq(i) => self.p.b_eq[i] * sign,
            Con::In(i) => self.p.b_in[i] * sign,
        }
    }

    /// Dual iteration admitting one constraint, dropping blockers as needed.
    fn admit(&mut self, c: Con, sign: f64) -> Result<(), QpError> {
        let d = self.x.len();
        let n_plus = self.normal(c, sign);
        let b_plus = self.rhs(c, sign);
        let mut u_plus = 0.0;
        loop {
            self.iterations += 1;
            if self.iterations > self.limit {
                return Err(QpError::IterationLimit(self.limit));
            }
            let q = self.q();
            let slack = n_plus.dot(&self.x) - b_plus;
            let dv = self.j.transpose() * &n_plus;

            // Primal step direction; zᵀ n⁺ equals ‖dv₂‖², so the direction
            // degenerates exactly when n⁺ lies in the span of the active
            // normals.
            let dv2_sq: f64 = (q..d).map(|i| dv[i] * dv[i]).sum();
            let dv_sq: f64 = dv.norm_squared();
            let z_ok = dv2_sq > 1e-24 * dv_sq.max(1e-300);

            // Dual step bound: first active inequality whose multiplier
            // would cross zero. Equalities never leave.
            let mut t1 = f64::INFINITY;
            let mut idel = None;
            if q > 0 {
                let r_vec = back_substitute(&self.r, &dv, q);
                for k in 0..q {
                    if matches!(self.active[k].0, Con::In(_)) && r_vec[k] > 1e-14 {
                        let t = self.u[k] / r_vec[k];
                        if t < t1 {
                            t1 = t;
                            idel = Some(k);
                        }
                    }
                }
                if z_ok {
                    let t2 = -slack / dv2_sq;
                    if t2 <= t1 {
                        // Full step: feasible now, admit the constraint.
                        let mut z = DVector::zeros(d);
                        for i in q..d {
                            z += self.j.column(i) * dv[i];
                        }
                        self.x += z * t2;
                        for k in 0..q {
                            self.u[k] -= t2 * r_vec[k];
                        }
                        u_plus += t2;
                        self.insert(dv);
                        self.active.push((c, sign));
                        self.u.push(u_plus);
                        return Ok(());
                    }
                }
                if t1.is_infinite() {
                    return match c {
                        Con::Eq(_) => Err(QpError::DegenerateEqualities),
                        Con::In(i) => Err(QpError::Infeasible { constraint: i }),
                    };
                }
                // Partial step of length t1, then drop the blocker.
                if z_ok {
                    let mut z = DVector::zeros(d);
                    for i in q..d {
                        z += self.j.column(i) * dv[i];
                    }
                    self.x += z * t1;
                }
                for k in 0..q {
                    self.u[k] -= t1 * r_vec[k];
                }
                u_plus += t1;
                self.delete(idel.expect("finite t1 has a blocker"));
                continue;
            }

            // Empty working set: the step is purely primal.
            if !z_ok {
                return match c {
                    Con::Eq(_) => Err(QpError::DegenerateEqualities),
                    Con::In(i) => Err(QpError::Infeasible { constraint: i }),
                };
            }
            let t2 = -slack / dv2_sq;
            let mut z = DVector::zeros(d);
            for i in 0..d {
                z += self.j.column(i) * dv[i];
            }
            self.x += z * t2;
            u_plus += t2;
            self.insert(dv);
            self.active.push((c, sign));
            self.u.push(u_plus);
            return Ok(());
        }
    }

    /// Appends the rotated normal as column q of R, zeroing its tail and
    /// carrying the rotations into J.
    fn insert(&mut self, mut dv: DVector<f64>) {
        let d = self.x.len();
        let q = self.q();
        for i in ((q + 1)..d).rev() {
            let (a, b) = (dv[i - 1], dv[i]);
            if b == 0.0 {
                continue;
            }
            let (cos, sin, rho) = givens(a, b);
            dv[i - 1] = rho;
            dv[i] = 0.0;
            for k in 0..d {
                let (x, y) = (self.j[(k, i - 1)], self.j[(k, i)]);
                self.j[(k, i - 1)] = cos * x + sin * y;
                self.j[(k, i)] = -sin * x + cos * y;
            }
        }
        for i in 0..=q.min(d - 1) {
            self.r[(i, q)] = dv[i];
        }
    }

    /// Removes working-set entry k, restoring R to triangular form.
    fn delete(&mut self, k: usize) {
        let d = self.x.len();
        let q = self.q();
        self.active.remove(k);
        self.u.remove(k);
        for col in k..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        // Knock out the subdiagonal left by the shift.
        for jcol in k..q - 1 {
            let (a, b) = (self.r[(jcol, jcol)], self.r[(jcol + 1, jcol)]);
            if b == 0.0 {
                continue;
            }
            let (cos, sin, rho) = givens(a, b);
            self.r[(jcol, jcol)] = rho;
            self.r[(jcol + 1, jcol)] = 0.0;
            for col in (jcol + 1)..q - 1 {
                let (x, y) = (self.r[(jcol, col)], self.r[(jcol + 1, col)]);
                self.r[(jcol, col)] = cos * x + sin * y;
                self.r[(jcol + 1, col)] = -sin * x + cos * y;
            }
            for row in 0..d {
                let (x, y) = (self.j[(row, jcol)], self.j[(row, jcol + 1)]);
                self.j[(row, jcol)] = cos * x + sin * y;
                self.j[(row, jcol + 1)] = -sin * x + cos * y;
            }
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let rho = a.hypot(b);
    if rho == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / rho, b / rho, rho)
    }
}

/// Solves R y = v over the leading q x q block.
fn back_substitute(r: &DMatrix<f64>, v: &DVector<f64>, q: usize) -> Vec<f64> {
    let mut y = vec![0.0; q];
    for i in (0..q).rev() {
        let mut s = v[i];
        for j in (i + 1)..q {
            s -= r[(i, j)] * y[j];
        }
        y[i] = s / r[(i, i)];
    }
    y
}

/// Lower-triangular inverse transpose: J0 = (L⁻¹)ᵀ column by column.
fn inverse_transpose_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let mut j = DMatrix::zeros(d, d);
    for col in 0..d {
        // Solve L y = e_col by forward substitution; y fills row `col` of J.
        let mut y = vec![0.0; d];
        for i in col..d {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in col..d {
            j[(col, i)] = y[i];
        }
    }
    j
}

pub fn solve(p: &QpProblem, tol: f64) -> Result<QpSolution, QpError> {
    solve_hinted(p, tol, &[])
}

/// Like [`solve`], with a warm-start hint: inequality rows to try admitting
/// first. The hint can only change the path taken, never the minimizer.
pub fn solve_hinted(p: &QpProblem, tol: f64, hint: &[usize]) -> Result<QpSolution, QpError> {
    p.validate()?;
    let d = p.dim();
    let m_eq = p.a_eq.nrows();
    let m_in = p.a_in.nrows();

    if m_eq > 0 {
        if m_eq > d {
            return Err(QpError::DegenerateEqualities);
        }
        let qr = p.a_eq.transpose().col_piv_qr();
        let rdiag = qr.r();
        let scale = rdiag[(0, 0)].abs().max(1e-280);
        for i in 0..m_eq {
            if rdiag[(i, i)].abs() < 1e-12 * scale {
                return Err(QpError::DegenerateEqualities);
            }
        }
    }

    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        for jx in 0..d {
            h[(i, jx)] = 0.5 * (p.h[(i, jx)] + p.h[(jx, i)]);
        }
    }
    let min_eig = h
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let regularized = min_eig < REGULARIZATION_FLOOR;
    if regularized {
        for i in 0..d {
            h[(i, i)] += REGULARIZATION_FLOOR;
        }
    }
    let chol = h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut x0 = -chol.solve(&p.f);
    // One refinement pass: the input penalty is tiny against the squared
    // horizon gains, so H is ill conditioned and the raw solve leaves a
    // noticeable residual.
    for _ in 0..2 {
        let r = -&p.f - &h * &x0;
        x0 += chol.solve(&r);
    }
    let j0 = inverse_transpose_lower(chol.l_dirty());

    let mut ws = Workspace {
        p,
        x: x0,
        j: j0,
        r: DMatrix::zeros(d, d),
        active: Vec::new(),
        u: Vec::new(),
        iterations: 0,
        limit: 10 * (d + m_eq + m_in),
    };

    for i in 0..m_eq {
        let slack = p.a_eq.row(i).transpose().dot(&ws.x) - p.b_eq[i];
        let sign = if slack > 0.0 { -1.0 } else { 1.0 };
        ws.admit(Con::Eq(i), sign)?;
    }

    // Row scales make the violation threshold meaningful across mixed units.
    let row_scale: Vec<f64> = (0..m_in)
        .map(|i| p.a_in.row(i).amax().max(1.0))
        .collect();
    let scaled_violation = |i: usize, ws: &Workspace| -> Option<f64> {
        if ws.active.iter().any(|(c, _)| *c == Con::In(i)) {
            return None;
        }
        let slack = p.a_in.row(i).transpose().dot(&ws.x) - p.b_in[i];
        let v = slack / row_scale[i];
        (v < -tol).then_some(v)
    };
    loop {
        let mut worst: Option<(usize, f64)> = None;
        for &i in hint.iter().filter(|&&i| i < m_in) {
            if let Some(v) = scaled_violation(i, &ws) {
                if worst.map_or(true, |(_, w)| v < w) {
                    worst = Some((i, v));
                }
            }
        }
        if worst.is_none() {
            for i in 0..m_in {
                if let Some(v) = scaled_violation(i, &ws) {
                    if worst.map_or(true, |(_, w)| v < w) {
                        worst = Some((i, v));
                    }
                }
            }
        }
        let Some((i, _)) = worst else { break };
        ws.admit(Con::In(i), 1.0)?;
    }

    let mut eq_multipliers = DVector::zeros(m_eq);
    let mut in_multipliers = DVector::zeros(m_in);
    let mut active_set = Vec::new();
    for (k, (c, sign)) in ws.active.iter().enumerate() {
        match c {
            Con::Eq(i) => eq_multipliers[*i] = sign * ws.u[k],
            Con::In(i) => {
                in_multipliers[*i] = ws.u[k];
                active_set.push(*i);
            }
        }
    }
    active_set.sort_unstable();
    let objective = 0.5 * (&p.h * &ws.x).dot(&ws.x) + p.f.dot(&ws.x);
    Ok(QpSolution {
        x: ws.x,
        objective,
        active_set,
        eq_multipliers,
        in_multipliers,
        iterations: ws.iterations,
        regularized,
    })
}
