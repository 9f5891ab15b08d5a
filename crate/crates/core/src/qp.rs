//! Constrained-space quadratic program: minimal-norm constraint-space torque
//! subject to the constrained-space dynamics equality, joint torque bounds
//! and 4-edge friction pyramids, plus the final torque composition.
//!
//! The physical decision variables are the actuated joint-torque adjustment
//! (n entries) and the stacked contact forces (3 per contact, inertia
//! frame). The builder eliminates the dynamics equality analytically, so the
//! solver itself runs on the adjustment plus the force null-space
//! coordinates; [`ConstrainedQp`] maps solutions back to physical forces.

use nalgebra::{DMatrix, DVector};

use crate::projection::{ContactPoint, ContactSet};
use crate::scalar::{real, to_f64, Real};

/// Tikhonov term added to the Hessian so the solver sees a strictly convex
/// problem; the contact-force block otherwise has no objective at all.
pub const QP_REGULARIZATION: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch building the QP: {0}")]
    Dimension(String),
    #[error("torque limits violate tau_min <= tau_max at joint {0}")]
    BadLimits(usize),
    #[error("QP reported infeasible")]
    Infeasible,
}

/// Elementwise actuated joint torque bounds, N m.
#[derive(Clone, Debug)]
pub struct TorqueLimits<T: Real> {
    pub tau_min: DVector<T>,
    pub tau_max: DVector<T>,
}

impl<T: Real> TorqueLimits<T> {
    pub fn symmetric(n: usize, bound: T) -> Self {
        TorqueLimits {
            tau_min: DVector::from_element(n, -bound),
            tau_max: DVector::from_element(n, bound),
        }
    }

    pub fn validate(&self) -> Result<(), QpError> {
        if self.tau_min.len() != self.tau_max.len() {
            return Err(QpError::Dimension("torque limit vectors differ in length".into()));
        }
        for i in 0..self.tau_min.len() {
            if self.tau_min[i] > self.tau_max[i] {
                return Err(QpError::BadLimits(i));
            }
        }
        Ok(())
    }
}

/// Dense QP `min 1/2 z'Hz + g'z  s.t.  A_eq z = b_eq, A_in z <= b_in`.
#[derive(Clone, Debug)]
pub struct QpProblem<T: Real> {
    pub hessian: DMatrix<T>,
    pub gradient: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub a_in: DMatrix<T>,
    pub b_in: DVector<T>,
    /// Leading joint-torque block size.
    pub n_torque: usize,
    /// Size of the trailing block (contact-force or null-space variables).
    pub aux_dim: usize,
}

impl<T: Real> QpProblem<T> {
    pub fn dim(&self) -> usize {
        self.n_torque + self.aux_dim
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let m = self.dim();
        if self.hessian.shape() != (m, m) {
            return Err(QpError::Dimension(format!(
                "hessian {:?}, expected ({m}, {m})",
                self.hessian.shape()
            )));
        }
        if self.gradient.len() != m
            || self.a_eq.ncols() != m && self.a_eq.nrows() > 0
            || self.a_in.ncols() != m && self.a_in.nrows() > 0
            || self.a_eq.nrows() != self.b_eq.len()
            || self.a_in.nrows() != self.b_in.len()
        {
            return Err(QpError::Dimension("row or column counts inconsistent".into()));
        }
        let asym = (&self.hessian - self.hessian.transpose()).abs().max();
        if to_f64(asym) > 1e-10 {
            return Err(QpError::Dimension("hessian not symmetric".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution<T: Real> {
    pub joint_torque_adjustment: DVector<T>,
    pub contact_forces: DVector<T>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: T,
    /// Active inequality rows at the solution, for warm starting.
    pub active_set: Vec<usize>,
}

/// Five pyramid rows for one contact, acting on that contact's inertia-frame
/// force block: unilateral normal plus the 4-edge friction pyramid
/// `|f_x| <= (sqrt(2)/2) mu f_z`, `|f_y| <= (sqrt(2)/2) mu f_z` in surface
/// coordinates. Rows are pre-rotated so they apply to inertia-frame forces;
/// all right-hand sides are zero.
pub fn friction_pyramid_rows<T: Real>(contact: &ContactPoint<T>) -> DMatrix<T> {
    let c = real::<T>(std::f64::consts::FRAC_1_SQRT_2) * contact.friction_mu;
    let one = T::one();
    let mut rows = DMatrix::zeros(5, 3);
    // Surface-frame rows, each meaning row * f_surface <= 0.
    let surface = [
        [T::zero(), T::zero(), -one],
        [one, T::zero(), -c],
        [-one, T::zero(), -c],
        [T::zero(), one, -c],
        [T::zero(), -one, -c],
    ];
    let r_t = contact
        .surface_rotation
        .to_rotation_matrix()
        .matrix()
        .transpose();
    for (i, row) in surface.iter().enumerate() {
        for j in 0..3 {
            let mut v = T::zero();
            for k in 0..3 {
                v += row[k] * r_t[(k, j)];
            }
            rows[(i, j)] = v;
        }
    }
    rows
}

/// Constrained-space QP with the bookkeeping needed to recover the physical
/// contact forces from the reduced decision variables.
///
/// The dynamics equality `U_r' (Q delta + Jc' lambda) = U_r' c` (its
/// independent rows through an orthonormal basis `U_r` of range(I - P)) is
/// eliminated by the parametrization
/// `lambda = lambda_particular + lambda_from_delta * delta + lambda_from_xi * xi`,
/// where `xi` spans the null space of the reduced force map. The solver then
/// works on a well-conditioned problem in `[delta; xi]` and the minimal-norm
/// character of the solution is exact instead of regularization-limited.
#[derive(Clone, Debug)]
pub struct ConstrainedQp<T: Real> {
    pub problem: QpProblem<T>,
    /// Rank of (I - P), the number of independent equality rows eliminated.
    pub rank: usize,
    pub n_contacts: usize,
    lambda_particular: DVector<T>,
    lambda_from_delta: DMatrix<T>,
    lambda_from_xi: DMatrix<T>,
}

impl<T: Real> ConstrainedQp<T> {
    /// Contact forces for a reduced-variable solution.
    pub fn recover_forces(&self, delta: &DVector<T>, xi: &DVector<T>) -> DVector<T> {
        &self.lambda_particular
            + &self.lambda_from_delta * delta
            + &self.lambda_from_xi * xi
    }

    /// Solve and translate the trailing null-space block back into the
    /// stacked contact forces.
    pub fn solve(&self, solver: &mut QpSolver<T>) -> Result<QpSolution<T>, QpError> {
        let mut sol = solver.solve(&self.problem)?;
        sol.contact_forces =
            self.recover_forces(&sol.joint_torque_adjustment, &sol.contact_forces);
        Ok(sol)
    }
}

/// Assemble the constrained-space QP for one control cycle.
///
/// `tau_m` is the full generalized motion torque (floating-base rows zero),
/// `pdot_u` the projector-derivative velocity product.
#[allow(clippy::too_many_arguments)]
pub fn build_constrained_space_problem<T: Real>(
    p: &DMatrix<T>,
    m: &DMatrix<T>,
    m_c_inv: &DMatrix<T>,
    h: &DVector<T>,
    pdot_u: &DVector<T>,
    j_c: &DMatrix<T>,
    tau_m: &DVector<T>,
    limits: &TorqueLimits<T>,
    contacts: &ContactSet<T>,
) -> Result<ConstrainedQp<T>, QpError> {
    let nv = p.nrows();
    let n = nv - 6;
    let k = contacts.len();
    if m.shape() != (nv, nv) || m_c_inv.shape() != (nv, nv) {
        return Err(QpError::Dimension("inertia matrix shape".into()));
    }
    if h.len() != nv || pdot_u.len() != nv || tau_m.len() != nv {
        return Err(QpError::Dimension("generalized vector length".into()));
    }
    if j_c.nrows() != 3 * k || (k > 0 && j_c.ncols() != nv) {
        return Err(QpError::Dimension("constraint Jacobian shape".into()));
    }
    limits.validate()?;
    if limits.tau_min.len() != n {
        return Err(QpError::Dimension("torque limit length".into()));
    }

    let i_minus_p = DMatrix::identity(nv, nv) - p;

    // Orthonormal basis of range(I - P). The matrix is an orthogonal
    // projector, so eigenvalues cluster at 0 and 1.
    let eig = nalgebra::SymmetricEigen::new(i_minus_p.clone());
    let mut basis_cols = Vec::new();
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > real(0.5) {
            basis_cols.push(i);
        }
    }
    let r = basis_cols.len();
    let mut u_r = DMatrix::zeros(nv, r);
    for (j, &col) in basis_cols.iter().enumerate() {
        u_r.set_column(j, &eig.eigenvectors.column(col));
    }

    // (I - P) restricted to the actuated columns.
    let q_act = i_minus_p.columns(6, n).into_owned();

    // Constrained-space forward dynamics under the motion torque alone.
    let qdd = m_c_inv * (p * tau_m - p * h + pdot_u);
    let c_vec = &i_minus_p * (m * qdd + h) - &i_minus_p * tau_m;

    // The adjustment also moves the system: the acceleration responds to it
    // through the constrained forward dynamics, so the force map carries the
    // induced-motion term next to the direct actuation term. Dropping it
    // mispredicts the forces whenever the adjustment is nonzero.
    let coupling = &i_minus_p * (m * (m_c_inv * p.columns(6, n)));

    // Reduced equality U_r' Q delta + A_lambda lambda = b_r, full row rank r.
    let a_delta = u_r.transpose() * (&q_act - &coupling);
    let a_lambda = u_r.transpose() * j_c.transpose();
    let b_r = u_r.transpose() * c_vec;

    // Particular + null-space parametrization of the forces.
    let a_lambda_pinv =
        crate::projection::svd_pseudoinverse(&a_lambda, crate::scalar::scaled_tol(1e-10, 2e2));
    let lambda_particular = &a_lambda_pinv * &b_r;
    let lambda_from_delta = -(&a_lambda_pinv * &a_delta);
    let null_dim = 3 * k - r;
    let mut lambda_from_xi = DMatrix::zeros(3 * k, null_dim);
    if null_dim > 0 {
        // Orthonormal null basis of A_lambda from the eigenvectors of the
        // Gram matrix belonging to its vanishing eigenvalues.
        let gram = a_lambda.transpose() * &a_lambda;
        let geig = nalgebra::SymmetricEigen::new(gram);
        let ev_max = geig.eigenvalues.iter().fold(T::zero(), |a, &b| a.max(b));
        let mut order: Vec<usize> = (0..geig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| {
            geig.eigenvalues[a].partial_cmp(&geig.eigenvalues[b]).expect("finite eigenvalue")
        });
        for (col, &i) in order.iter().take(null_dim).enumerate() {
            if geig.eigenvalues[i] > crate::scalar::scaled_tol::<T>(1e-12, 1e2) * ev_max {
                return Err(QpError::Dimension("force null-space basis deficient".into()));
            }
            lambda_from_xi.set_column(col, &geig.eigenvectors.column(i));
        }
    }

    let dim = n + null_dim;
    let mut hessian = DMatrix::identity(dim, dim) * real::<T>(QP_REGULARIZATION);
    hessian
        .view_mut((0, 0), (n, n))
        .add_assign(q_act.transpose() * &q_act);

    // Bounds as inequality rows, then pyramid rows per contact mapped onto
    // the reduced variables.
    let n_in = 2 * n + 5 * k;
    let mut a_in = DMatrix::zeros(n_in, dim);
    let mut b_in = DVector::zeros(n_in);
    for i in 0..n {
        a_in[(i, i)] = T::one();
        b_in[i] = limits.tau_max[i] - tau_m[6 + i];
        a_in[(n + i, i)] = -T::one();
        b_in[n + i] = tau_m[6 + i] - limits.tau_min[i];
    }
    for (ci, contact) in contacts.iter().enumerate() {
        let rows = friction_pyramid_rows(contact);
        let mut g_full = DMatrix::zeros(5, 3 * k);
        g_full.view_mut((0, 3 * ci), (5, 3)).copy_from(&rows);
        let row0 = 2 * n + 5 * ci;
        a_in.view_mut((row0, 0), (5, n))
            .copy_from(&(&g_full * &lambda_from_delta));
        if null_dim > 0 {
            a_in.view_mut((row0, n), (5, null_dim))
                .copy_from(&(&g_full * &lambda_from_xi));
        }
        b_in.rows_mut(row0, 5)
            .copy_from(&(-(&g_full * &lambda_particular)));
    }

    let problem = QpProblem {
        hessian,
        gradient: DVector::zeros(dim),
        a_eq: DMatrix::zeros(0, dim),
        b_eq: DVector::zeros(0),
        a_in,
        b_in,
        n_torque: n,
        aux_dim: null_dim,
    };
    problem.validate()?;
    Ok(ConstrainedQp {
        problem,
        rank: r,
        n_contacts: k,
        lambda_particular,
        lambda_from_delta,
        lambda_from_xi,
    })
}

/// Dual active-set solver for dense strictly convex QPs.
///
/// Keeps the active inequality set from the previous solve and prefers those
/// rows when selecting violated constraints, which reproduces the optimal
/// basis in one pass on slowly varying problems.
#[derive(Clone, Debug)]
pub struct QpSolver<T: Real> {
    pub tol: T,
    pub max_iter: usize,
    warm_active: Vec<usize>,
}

impl<T: Real> Default for QpSolver<T> {
    fn default() -> Self {
        QpSolver { tol: real(1e-8), max_iter: 200, warm_active: Vec::new() }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ActiveKind {
    Equality(usize),
    Inequality(usize),
}

impl<T: Real> QpSolver<T> {
    pub fn new(tol: T, max_iter: usize) -> Self {
        QpSolver { tol, max_iter, warm_active: Vec::new() }
    }

    pub fn clear_warm_start(&mut self) {
        self.warm_active.clear();
    }

    pub fn solve(&mut self, problem: &QpProblem<T>) -> Result<QpSolution<T>, QpError> {
        problem.validate()?;
        let dim = problem.dim();
        let chol = problem
            .hessian
            .clone()
            .cholesky()
            .ok_or_else(|| QpError::Dimension("hessian not positive definite".into()))?;

        let mut z = -chol.solve(&problem.gradient);
        let mut active: Vec<ActiveKind> = Vec::new();
        let mut mult: Vec<T> = Vec::new();
        let mut iterations = 0usize;
        let mut status = QpStatus::Optimal;

        // Equalities first, in order; then violated inequalities.
        let mut pending_eq: Vec<usize> = (0..problem.a_eq.nrows()).collect();
        pending_eq.reverse();

        loop {
            if iterations >= self.max_iter {
                status = QpStatus::MaxIterations;
                break;
            }

            let target = if let Some(i) = pending_eq.pop() {
                ActiveKind::Equality(i)
            } else {
                match self.select_violated(problem, &z) {
                    Some(i) => ActiveKind::Inequality(i),
                    None => break,
                }
            };
            let (np, bp) = constraint_row(problem, target);
            let is_equality = matches!(target, ActiveKind::Equality(_));

            // Drive constraint `target` to activity, dropping blocking
            // constraints along the way. `u_plus` accumulates the incoming
            // constraint's multiplier across partial steps.
            let mut u_plus = T::zero();
            loop {
                iterations += 1;
                if iterations > self.max_iter {
                    status = QpStatus::MaxIterations;
                    break;
                }
                let na = active.len();
                let hi_np = chol.solve(&np);
                let (dz, rvec) = if na == 0 {
                    (hi_np.clone(), DVector::zeros(0))
                } else {
                    let mut n_mat = DMatrix::zeros(na, dim);
                    for (i, &a) in active.iter().enumerate() {
                        let (row, _) = constraint_row(problem, a);
                        n_mat.row_mut(i).copy_from(&row.transpose());
                    }
                    let hi_nt = chol.solve(&n_mat.transpose());
                    let s = &n_mat * &hi_nt;
                    let s_inv = s.lu();
                    let r = s_inv
                        .solve(&(&n_mat * &hi_np))
                        .ok_or(QpError::Infeasible)?;
                    let dz = &hi_np - &hi_nt * &r;
                    (dz, r)
                };

                // Dual step bound from active inequalities losing positivity.
                let mut t1 = T::max_value().unwrap_or_else(T::one);
                let mut blocking: Option<usize> = None;
                for (i, a) in active.iter().enumerate() {
                    if let ActiveKind::Inequality(_) = a {
                        if rvec[i] > self.tol {
                            let ratio = mult[i] / rvec[i];
                            if ratio < t1 {
                                t1 = ratio;
                                blocking = Some(i);
                            }
                        }
                    }
                }

                let np_dz = np.dot(&dz);
                let violation = np.dot(&z) - bp;
                if violation.abs() <= self.tol && !active.contains(&target) && is_equality {
                    // Equality already satisfied; register it with a zero
                    // multiplier so it is enforced from now on.
                    active.push(target);
                    mult.push(u_plus);
                    break;
                }
                // The Schur complement np' dz is compared against the
                // unprojected curvature np' H^-1 np: a vanishing ratio means
                // np is linearly dependent on the active rows.
                let curvature = np.dot(&hi_np);
                if np_dz <= real::<T>(1e-10) * curvature {
                    // No primal progress possible on this constraint.
                    match blocking {
                        Some(ib) => {
                            u_plus += t1;
                            for i in 0..mult.len() {
                                mult[i] -= t1 * rvec[i];
                            }
                            active.remove(ib);
                            mult.remove(ib);
                            continue;
                        }
                        None => {
                            status = QpStatus::Infeasible;
                            break;
                        }
                    }
                }

                // Full primal step length to reach the constraint surface.
                // Equalities are processed while no inequality is active, so
                // a negative step toward the surface is safe there.
                let t2 = -violation / np_dz;
                let t = if is_equality || t2 < t1 { t2 } else { t1 };
                z += &dz * t;
                u_plus += t;
                for i in 0..mult.len() {
                    mult[i] -= t * rvec[i];
                }
                if is_equality || t2 <= t1 {
                    active.push(target);
                    mult.push(u_plus);
                    break;
                } else {
                    let ib = blocking.expect("finite t1 has a blocking index");
                    active.remove(ib);
                    mult.remove(ib);
                }
            }

            if status != QpStatus::Optimal {
                break;
            }
        }

        let active_set: Vec<usize> = active
            .iter()
            .filter_map(|a| match a {
                ActiveKind::Inequality(i) => Some(*i),
                ActiveKind::Equality(_) => None,
            })
            .collect();
        self.warm_active = active_set.clone();

        let kkt = kkt_residual(problem, &z, &active, &mult);
        Ok(QpSolution {
            joint_torque_adjustment: z.rows(0, problem.n_torque).into_owned(),
            contact_forces: z.rows(problem.n_torque, problem.aux_dim).into_owned(),
            status,
            iterations,
            kkt_residual: kkt,
            active_set,
        })
    }

    /// Most violated inequality, preferring rows active in the last solve.
    fn select_violated(&self, problem: &QpProblem<T>, z: &DVector<T>) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        let mut best_warm: Option<(usize, T)> = None;
        for i in 0..problem.a_in.nrows() {
            let v = problem.a_in.row(i).transpose().dot(z) - problem.b_in[i];
            if v > self.tol {
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((i, v));
                }
                if self.warm_active.contains(&i) && best_warm.map_or(true, |(_, bv)| v > bv) {
                    best_warm = Some((i, v));
                }
            }
        }
        best_warm.or(best).map(|(i, _)| i)
    }
}

/// Constraint `target` in the solver's `n' z >= b` orientation.
fn constraint_row<T: Real>(
    problem: &QpProblem<T>,
    target: ActiveKind,
) -> (DVector<T>, T) {
    match target {
        ActiveKind::Equality(i) => {
            (problem.a_eq.row(i).transpose().into_owned(), problem.b_eq[i])
        }
        // A_in z <= b flips to -A_in z >= -b.
        ActiveKind::Inequality(i) => {
            (-problem.a_in.row(i).transpose().into_owned(), -problem.b_in[i])
        }
    }
}

fn kkt_residual<T: Real>(
    problem: &QpProblem<T>,
    z: &DVector<T>,
    active: &[ActiveKind],
    mult: &[T],
) -> T {
    let mut grad_l = &problem.hessian * z + &problem.gradient;
    for (a, &u) in active.iter().zip(mult) {
        let (row, _) = constraint_row(problem, *a);
        grad_l -= row * u;
    }
    let mut res = grad_l.abs().max();
    for i in 0..problem.a_eq.nrows() {
        let e = (problem.a_eq.row(i).transpose().dot(z) - problem.b_eq[i]).abs();
        res = res.max(e);
    }
    for i in 0..problem.a_in.nrows() {
        let v = problem.a_in.row(i).transpose().dot(z) - problem.b_in[i];
        res = res.max(v.max(T::zero()));
    }
    for (a, &u) in active.iter().zip(mult) {
        if let ActiveKind::Inequality(i) = a {
            res = res.max((-u).max(T::zero()));
            let slack = problem.a_in.row(*i).transpose().dot(z) - problem.b_in[*i];
            res = res.max((u * slack).abs());
        }
    }
    res
}

/// Final actuated torque: motion torque plus the QP adjustment.
pub fn compose_torque<T: Real>(
    tau_m: &DVector<T>,
    sol: &QpSolution<T>,
) -> Result<DVector<T>, QpError> {
    if sol.status == QpStatus::Infeasible {
        return Err(QpError::Infeasible);
    }
    let n = sol.joint_torque_adjustment.len();
    if tau_m.len() != n + 6 {
        return Err(QpError::Dimension("tau_m length".into()));
    }
    Ok(tau_m.rows(6, n) + &sol.joint_torque_adjustment)
}

use std::ops::AddAssign;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{bias_forces_at, mass_matrix_at, standard_gravity};
    use crate::kinematics::KinematicsCache;
    use crate::model::default_quadruped;
    use crate::projection::{
        all_feet, projector, stack_constraint_jacobian, svd_pseudoinverse,
        two_prongs_and_hind_feet, DEFAULT_SVD_REL_TOL,
    };
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn objective(p: &QpProblem<f64>, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&p.hessian * z)) + p.gradient.dot(z)
    }

    fn feasible(p: &QpProblem<f64>, z: &DVector<f64>, tol: f64) -> bool {
        for i in 0..p.a_eq.nrows() {
            if (p.a_eq.row(i).transpose().dot(z) - p.b_eq[i]).abs() > tol {
                return false;
            }
        }
        for i in 0..p.a_in.nrows() {
            if p.a_in.row(i).transpose().dot(z) - p.b_in[i] > tol {
                return false;
            }
        }
        true
    }

    /// Exhaustive active-set enumeration for small problems: try every
    /// subset of inequality rows as active, solve the KKT system, keep the
    /// best point that is primal feasible with non-negative multipliers.
    fn brute_force(p: &QpProblem<f64>) -> Option<DVector<f64>> {
        let dim = p.dim();
        let me = p.a_eq.nrows();
        let mi = p.a_in.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1u32 << mi) {
            let act: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
            let na = me + act.len();
            let mut kkt = DMatrix::zeros(dim + na, dim + na);
            let mut rhs = DVector::zeros(dim + na);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&p.hessian);
            rhs.rows_mut(0, dim).copy_from(&(-&p.gradient));
            for r in 0..me {
                let row = p.a_eq.row(r).transpose();
                kkt.view_mut((dim + r, 0), (1, dim)).copy_from(&row.transpose());
                kkt.view_mut((0, dim + r), (dim, 1)).copy_from(&row);
                rhs[dim + r] = p.b_eq[r];
            }
            for (j, &r) in act.iter().enumerate() {
                let row = p.a_in.row(r).transpose();
                kkt.view_mut((dim + me + j, 0), (1, dim)).copy_from(&row.transpose());
                kkt.view_mut((0, dim + me + j), (dim, 1)).copy_from(&row);
                rhs[dim + me + j] = p.b_in[r];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let z = sol.rows(0, dim).into_owned();
            // Stationarity of the assembled system is Hz + g + A' s = 0, so
            // the inequality multipliers s must be non-negative.
            let mut ok = feasible(p, &z, 1e-7);
            for j in 0..act.len() {
                if sol[dim + me + j] < -1e-9 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let f = objective(p, &z);
            if best.as_ref().map_or(true, |(bf, _)| f < bf - 1e-12) {
                best = Some((f, z));
            }
        }
        best.map(|(_, z)| z)
    }

    fn tiny_problem(dim: usize, rng: &mut impl Rng, me: usize, mi: usize) -> QpProblem<f64> {
        let hessian = random_spd(dim, rng);
        let gradient = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
        let a_eq = DMatrix::from_fn(me, dim, |_, _| rng.gen_range(-1.0..1.0));
        let b_eq = DVector::from_fn(me, |_, _| rng.gen_range(-1.0..1.0));
        let a_in = DMatrix::from_fn(mi, dim, |_, _| rng.gen_range(-1.0..1.0));
        let b_in = DVector::from_fn(mi, |_, _| rng.gen_range(-0.2..1.0));
        QpProblem {
            hessian,
            gradient,
            a_eq,
            b_eq,
            a_in,
            b_in,
            n_torque: dim,
            aux_dim: 0,
        }
    }

    #[test]
    fn single_equality_projection() {
        let dim = 4;
        let mut problem = QpProblem::<f64> {
            hessian: DMatrix::identity(dim, dim),
            gradient: DVector::zeros(dim),
            a_eq: DMatrix::zeros(1, dim),
            b_eq: DVector::from_vec(vec![2.0]),
            a_in: DMatrix::zeros(0, dim),
            b_in: DVector::zeros(0),
            n_torque: dim,
            aux_dim: 0,
        };
        problem.a_eq[(0, 0)] = 1.0;
        let mut solver = QpSolver::default();
        let sol = solver.solve(&problem).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.joint_torque_adjustment[0], 2.0, epsilon = 1e-10);
        for i in 1..dim {
            assert!(sol.joint_torque_adjustment[i].abs() < 1e-10);
        }
    }

    #[test]
    fn equality_only_matches_dense_kkt_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let dim = rng.gen_range(2..7);
            let me = rng.gen_range(1..dim);
            let p = tiny_problem(dim, &mut rng, me, 0);
            let mut solver = QpSolver::default();
            let sol = solver.solve(&p).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);

            let na = me;
            let mut kkt = DMatrix::zeros(dim + na, dim + na);
            let mut rhs = DVector::zeros(dim + na);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&p.hessian);
            kkt.view_mut((dim, 0), (na, dim)).copy_from(&p.a_eq);
            kkt.view_mut((0, dim), (dim, na)).copy_from(&p.a_eq.transpose());
            rhs.rows_mut(0, dim).copy_from(&(-&p.gradient));
            rhs.rows_mut(dim, na).copy_from(&p.b_eq);
            let direct = kkt.lu().solve(&rhs).unwrap().rows(0, dim).into_owned();
            assert_relative_eq!(sol.joint_torque_adjustment, direct, epsilon = 1e-8);
        }
    }

    #[test]
    fn random_problems_match_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut solved = 0;
        for _ in 0..60 {
            let dim = rng.gen_range(2..5);
            let me = rng.gen_range(0..dim.min(2));
            let mi = rng.gen_range(1..7);
            let p = tiny_problem(dim, &mut rng, me, mi);
            let Some(oracle) = brute_force(&p) else { continue };
            let mut solver = QpSolver::default();
            let sol = solver.solve(&p).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "problem should be solvable");
            let z = {
                let mut z = DVector::zeros(dim);
                z.rows_mut(0, dim).copy_from(&sol.joint_torque_adjustment);
                z
            };
            assert!(feasible(&p, &z, 1e-7));
            assert!(
                (objective(&p, &z) - objective(&p, &oracle)).abs() < 1e-7,
                "objective {} vs oracle {}",
                objective(&p, &z),
                objective(&p, &oracle)
            );
            assert!(sol.kkt_residual < 1e-7);
            solved += 1;
        }
        assert!(solved > 30, "only {solved} enumerable problems");
    }

    #[test]
    fn active_pyramid_row_lands_on_facet() {
        // One contact, objective pulls the tangential force past the cone.
        let dim = 3;
        let mut gradient = DVector::zeros(dim);
        gradient[0] = -10.0; // favors f_x = 10
        let contact = ContactPoint::flat("c", 0.1);
        let rows = friction_pyramid_rows(&contact);
        let mut a_in = DMatrix::zeros(5, dim);
        a_in.copy_from(&rows);
        let mut hessian = DMatrix::identity(dim, dim);
        hessian[(2, 2)] = 1.0;
        let mut g2 = gradient.clone();
        g2[2] = -100.0; // favors f_z = 100
        let p = QpProblem {
            hessian,
            gradient: g2,
            a_eq: DMatrix::zeros(0, dim),
            b_eq: DVector::zeros(0),
            a_in,
            b_in: DVector::zeros(5),
            n_torque: 0,
            aux_dim: 3,
        };
        let mut solver = QpSolver::default();
        let sol = solver.solve(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let f = &sol.contact_forces;
        let c = std::f64::consts::FRAC_1_SQRT_2 * 0.1;
        // Unconstrained optimum (10, 0, 100) violates f_x <= c f_z; the
        // solution must sit exactly on that facet.
        assert!(f[0] > 1.0);
        assert_relative_eq!(f[0], c * f[2], epsilon = 1e-8);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn pyramid_rows_examples() {
        let contact = ContactPoint::flat("c", 0.2);
        let rows = friction_pyramid_rows(&contact);
        let ok = Vector3::new(0.0, 0.0, 100.0);
        for i in 0..5 {
            assert!(rows.row(i).transpose().dot(&ok.clone_owned().into()) <= 0.0);
        }
        let pulling = DVector::from_vec(vec![0.0, 0.0, -1.0]);
        assert!(rows.row(0).transpose().dot(&pulling) > 0.0);
        let sliding = DVector::from_vec(vec![15.0, 0.0, 100.0]);
        // 15 > 0.7071 * 0.2 * 100 = 14.14
        assert!(rows.row(1).transpose().dot(&sliding) > 0.0);
        let holding = DVector::from_vec(vec![14.0, 0.0, 100.0]);
        assert!(rows.row(1).transpose().dot(&holding) < 0.0);
    }

    #[test]
    fn pyramid_rows_rotate_with_surface() {
        let tilt = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.349);
        let contact = ContactPoint {
            frame: "c".into(),
            surface_rotation: tilt,
            friction_mu: 0.5,
        };
        let rows = friction_pyramid_rows(&contact);
        // A force along the tilted normal satisfies every row.
        let normal = tilt * Vector3::new(0.0, 0.0, 80.0);
        let f = DVector::from_vec(vec![normal.x, normal.y, normal.z]);
        for i in 0..5 {
            assert!(rows.row(i).transpose().dot(&f) < 1e-9);
        }
        // Straight-down world normal now has a tangential component that a
        // tight cone rejects.
        let tight = ContactPoint {
            frame: "c".into(),
            surface_rotation: tilt,
            friction_mu: 0.2,
        };
        let tight_rows = friction_pyramid_rows(&tight);
        let world_up = DVector::from_vec(vec![0.0, 0.0, 80.0]);
        let mut violated = false;
        for i in 0..5 {
            if tight_rows.row(i).transpose().dot(&world_up) > 1e-9 {
                violated = true;
            }
        }
        assert!(violated);
    }

    use crate::test_util::standing_state;

    fn stance_problem(
        contacts: &ContactSet<f64>,
        mu_override: Option<f64>,
    ) -> (ConstrainedQp<f64>, usize) {
        let model = default_quadruped::<f64>();
        let state = standing_state(&model);
        let cache = KinematicsCache::new(&model, &state);
        let mut contacts = contacts.clone();
        if let Some(mu) = mu_override {
            contacts.set_friction(mu).unwrap();
        }
        let j_c = stack_constraint_jacobian(&cache, &contacts).unwrap();
        let proj = projector(&j_c, DEFAULT_SVD_REL_TOL);
        let m = mass_matrix_at(&model, &state);
        let h = bias_forces_at(&model, &state, &standard_gravity());
        let m_c = crate::projection::constrained_inertia(&proj.p, &m).unwrap();
        let m_c_inv = m_c.try_inverse().unwrap();
        let pdot_u = DVector::zeros(model.nv());

        // Gravity compensation in the constraint-free space.
        let pb = &proj.p * crate::dynamics::selection_matrix::<f64>(model.dof());
        let tau_m = svd_pseudoinverse(&pb, 1e-8) * (&proj.p * &h);
        let limits = TorqueLimits::symmetric(model.dof(), 200.0);
        let cqp = build_constrained_space_problem(
            &proj.p, &m, &m_c_inv, &h, &pdot_u, &j_c, &tau_m, &limits, &contacts,
        )
        .unwrap();
        (cqp, proj.rank)
    }

    #[test]
    fn symmetric_stance_normals_share_the_weight() {
        let (cqp, _) = stance_problem(&all_feet(0.6), None);
        let mut solver = QpSolver::default();
        let sol = cqp.solve(&mut solver).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let model = default_quadruped::<f64>();
        let weight = model.total_mass() * 9.81;
        for foot in 0..4 {
            let fz = sol.contact_forces[3 * foot + 2];
            assert_relative_eq!(fz, weight / 4.0, max_relative = 0.02);
        }
        // Adjustment stays negligible: the motion torque already balances.
        assert!(sol.joint_torque_adjustment.abs().max() < 1.0);
    }

    #[test]
    fn two_prong_stance_reduces_to_eleven_equality_rows() {
        let (cqp, rank) = stance_problem(&two_prongs_and_hind_feet(0.6), None);
        assert_eq!(rank, 11);
        assert_eq!(cqp.rank, 11);
        // Twelve force components minus eleven independent equality rows
        // leave one null-space variable.
        assert_eq!(cqp.problem.aux_dim, 1);
        let mut solver = QpSolver::default();
        let sol = cqp.solve(&mut solver).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(sol.contact_forces.len(), 12);
        assert!(sol.kkt_residual < 1e-6);
    }

    #[test]
    fn no_contacts_gives_empty_equality_and_zero_adjustment() {
        let model = default_quadruped::<f64>();
        let state = standing_state(&model);
        let m = mass_matrix_at(&model, &state);
        let h = bias_forces_at(&model, &state, &standard_gravity());
        let nv = model.nv();
        let p = DMatrix::identity(nv, nv);
        let m_c_inv = m.clone().try_inverse().unwrap();
        let cqp = build_constrained_space_problem(
            &p,
            &m,
            &m_c_inv,
            &h,
            &DVector::zeros(nv),
            &DMatrix::zeros(0, nv),
            &DVector::zeros(nv),
            &TorqueLimits::symmetric(model.dof(), 80.0),
            &ContactSet::empty(),
        )
        .unwrap();
        assert_eq!(cqp.rank, 0);
        assert_eq!(cqp.problem.dim(), model.dof());
        let mut solver = QpSolver::default();
        let sol = cqp.solve(&mut solver).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.joint_torque_adjustment.abs().max() < 1e-12);
        assert_eq!(sol.contact_forces.len(), 0);
    }

    #[test]
    fn full_row_equality_holds_after_reduction() {
        // Substituting the solution back into the unreduced (n+6)-row form
        // must close the constrained-space dynamics.
        let model = default_quadruped::<f64>();
        let state = standing_state(&model);
        let cache = KinematicsCache::new(&model, &state);
        let contacts = all_feet(0.6);
        let j_c = stack_constraint_jacobian(&cache, &contacts).unwrap();
        let proj = projector(&j_c, DEFAULT_SVD_REL_TOL);
        let m = mass_matrix_at(&model, &state);
        let h = bias_forces_at(&model, &state, &standard_gravity());
        let m_c = crate::projection::constrained_inertia(&proj.p, &m).unwrap();
        let m_c_inv = m_c.try_inverse().unwrap();
        let pdot_u = DVector::zeros(model.nv());
        let pb = &proj.p * crate::dynamics::selection_matrix::<f64>(model.dof());
        let tau_m = svd_pseudoinverse(&pb, 1e-8) * (&proj.p * &h);
        let limits = TorqueLimits::symmetric(model.dof(), 200.0);
        let cqp = build_constrained_space_problem(
            &proj.p, &m, &m_c_inv, &h, &pdot_u, &j_c, &tau_m, &limits, &contacts,
        )
        .unwrap();
        let mut solver = QpSolver::default();
        let sol = cqp.solve(&mut solver).unwrap();

        let nv = model.nv();
        let i_minus_p = DMatrix::identity(nv, nv) - &proj.p;
        let mut tau_total = tau_m.clone();
        tau_total
            .rows_mut(6, model.dof())
            .add_assign(&sol.joint_torque_adjustment);
        let qdd = &m_c_inv * (&proj.p * &tau_total - &proj.p * &h);
        let lhs = &i_minus_p * (&m * qdd + &h) - &i_minus_p * &tau_total;
        let rhs = j_c.transpose() * &sol.contact_forces;
        assert!((lhs - rhs).abs().max() < 1e-6);
    }

    #[test]
    fn infinite_friction_recovers_pseudo_inverse_forces() {
        // With nothing active the QP reduces to minimal constraint-space
        // torque: zero adjustment and the pseudo-inverse contact forces.
        let model = default_quadruped::<f64>();
        let state = standing_state(&model);
        let cache = KinematicsCache::new(&model, &state);
        let contacts = all_feet(1e12);
        let j_c = stack_constraint_jacobian(&cache, &contacts).unwrap();
        let proj = projector(&j_c, DEFAULT_SVD_REL_TOL);
        let m = mass_matrix_at(&model, &state);
        let h = bias_forces_at(&model, &state, &standard_gravity());
        let m_c = crate::projection::constrained_inertia(&proj.p, &m).unwrap();
        let m_c_inv = m_c.try_inverse().unwrap();
        let pb = &proj.p * crate::dynamics::selection_matrix::<f64>(model.dof());
        let tau_m = svd_pseudoinverse(&pb, 1e-8) * (&proj.p * &h);
        let cqp = build_constrained_space_problem(
            &proj.p,
            &m,
            &m_c_inv,
            &h,
            &DVector::zeros(model.nv()),
            &j_c,
            &tau_m,
            &TorqueLimits::symmetric(model.dof(), 200.0),
            &contacts,
        )
        .unwrap();
        let mut solver = QpSolver::default();
        let sol = cqp.solve(&mut solver).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.active_set.is_empty(), "bounds or pyramid unexpectedly active");

        // Independent oracle: the minimum-norm forces closing the full-row
        // constrained-space equality with zero adjustment.
        let nv = model.nv();
        let i_minus_p = DMatrix::identity(nv, nv) - &proj.p;
        let qdd = &m_c_inv * (&proj.p * &tau_m - &proj.p * &h);
        let c_vec = &i_minus_p * (&m * qdd + &h) - &i_minus_p * &tau_m;
        let oracle = svd_pseudoinverse(&j_c.transpose(), 1e-10) * c_vec;
        assert!(sol.joint_torque_adjustment.abs().max() < 1e-8);
        assert!((sol.contact_forces - oracle).abs().max() < 1e-8);
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..20 {
            let dim = rng.gen_range(2..5);
            let p = tiny_problem(dim, &mut rng, 1, 5);
            let mut cold = QpSolver::default();
            let Ok(a) = cold.solve(&p) else { continue };
            if a.status != QpStatus::Optimal {
                continue;
            }
            // Re-solve with the warm set carried over.
            let b = cold.solve(&p).unwrap();
            let za = {
                let mut z = a.joint_torque_adjustment.clone();
                z.extend(a.contact_forces.iter().copied());
                z
            };
            let zb = {
                let mut z = b.joint_torque_adjustment.clone();
                z.extend(b.contact_forces.iter().copied());
                z
            };
            assert!((objective(&p, &za) - objective(&p, &zb)).abs() < 1e-8);
        }
    }

    #[test]
    fn bound_activation_lands_on_torque_limit() {
        // Force a tiny limit so the adjustment saturates, then compose.
        let (mut cqp, _) = stance_problem(&all_feet(0.2), None);
        // Shrink the first joint's upper bound below the unconstrained
        // adjustment by tightening b_in row 0 to a negative margin.
        cqp.problem.b_in[0] = -0.5;
        let mut solver = QpSolver::default();
        let sol = cqp.solve(&mut solver).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.joint_torque_adjustment[0], -0.5, epsilon = 1e-7);
    }

    #[test]
    fn compose_torque_respects_status() {
        let sol = QpSolution::<f64> {
            joint_torque_adjustment: DVector::from_vec(vec![1.0, -2.0]),
            contact_forces: DVector::zeros(0),
            status: QpStatus::Optimal,
            iterations: 1,
            kkt_residual: 0.0,
            active_set: vec![],
        };
        let tau_m = DVector::from_vec(vec![0.0; 6].into_iter().chain([3.0, 4.0]).collect());
        let tau = compose_torque(&tau_m, &sol).unwrap();
        assert_relative_eq!(tau, DVector::from_vec(vec![4.0, 2.0]));
        let mut bad = sol.clone();
        bad.status = QpStatus::Infeasible;
        assert!(compose_torque(&tau_m, &bad).is_err());
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // x <= -1 and -x <= -1 cannot hold together.
        let dim = 1;
        let p = QpProblem {
            hessian: DMatrix::identity(dim, dim),
            gradient: DVector::zeros(dim),
            a_eq: DMatrix::zeros(0, dim),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            b_in: DVector::from_vec(vec![-1.0, -1.0]),
            n_torque: dim,
            aux_dim: 0,
        };
        let mut solver = QpSolver::default();
        let sol = solver.solve(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }
}
