//! Constraint Jacobian stacking, SVD pseudo-inverse, the orthogonal
//! projector onto the constraint-free space and the constrained inertia.

use nalgebra::{DMatrix, UnitQuaternion};

use crate::kinematics::{DimMask, KinematicsCache, KinematicsError};
use crate::scalar::{real, Real};

/// Default relative singular-value cutoff for pseudo-inverses.
pub const DEFAULT_SVD_REL_TOL: f64 = 1e-8;

/// Condition-number limit above which the constrained inertia is rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, thiserror::Error)]
pub enum ProjectionError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("contact frame `{0}` appears more than once")]
    DuplicateContact(String),
    #[error("matrix shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("constrained inertia condition number {0:.3e} exceeds limit")]
    SingularInertia(f64),
    #[error("friction coefficient must be non-negative")]
    NegativeFriction,
}

/// A 3-DOF point contact with its surface frame and friction coefficient.
#[derive(Clone, Debug)]
pub struct ContactPoint<T: Real> {
    pub frame: String,
    /// Rotation mapping contact-surface coordinates to the inertia frame;
    /// the surface normal is the rotated +z axis.
    pub surface_rotation: UnitQuaternion<T>,
    pub friction_mu: T,
}

impl<T: Real> ContactPoint<T> {
    /// Flat-ground contact (surface normal +z) with the given friction.
    pub fn flat(frame: impl Into<String>, friction_mu: T) -> Self {
        ContactPoint {
            frame: frame.into(),
            surface_rotation: UnitQuaternion::identity(),
            friction_mu,
        }
    }
}

/// Ordered list of active contacts. The order fixes the block layout of the
/// stacked constraint Jacobian and of every contact-force vector downstream.
#[derive(Clone, Debug, Default)]
pub struct ContactSet<T: Real> {
    points: Vec<ContactPoint<T>>,
}

impl<T: Real> ContactSet<T> {
    pub fn new(points: Vec<ContactPoint<T>>) -> Result<Self, ProjectionError> {
        let mut seen = std::collections::HashSet::new();
        for p in &points {
            if p.friction_mu < T::zero() {
                return Err(ProjectionError::NegativeFriction);
            }
            if !seen.insert(p.frame.clone()) {
                return Err(ProjectionError::DuplicateContact(p.frame.clone()));
            }
        }
        Ok(ContactSet { points })
    }

    pub fn empty() -> Self {
        ContactSet { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ContactPoint<T>> {
        self.points.iter()
    }

    pub fn contains(&self, frame: &str) -> bool {
        self.points.iter().any(|p| p.frame == frame)
    }

    pub fn set_friction(&mut self, mu: T) -> Result<(), ProjectionError> {
        if mu < T::zero() {
            return Err(ProjectionError::NegativeFriction);
        }
        for p in &mut self.points {
            p.friction_mu = mu;
        }
        Ok(())
    }
}

/// Constraint Jacobian, its pseudo-inverse and the projector P = I - Jc+ Jc.
#[derive(Clone, Debug)]
pub struct ProjectionResult<T: Real> {
    pub j_c: DMatrix<T>,
    pub j_c_pinv: DMatrix<T>,
    pub p: DMatrix<T>,
    pub rank: usize,
    pub singular_values: Vec<T>,
}

/// Vertical stack of 3-row position Jacobians, one block per contact, in
/// `ContactSet` order. An empty set yields a 0 x (n+6) matrix.
pub fn stack_constraint_jacobian<T: Real>(
    cache: &KinematicsCache<T>,
    contacts: &ContactSet<T>,
) -> Result<DMatrix<T>, ProjectionError> {
    let nv = cache.model.nv();
    let mut j_c = DMatrix::zeros(3 * contacts.len(), nv);
    for (i, cp) in contacts.iter().enumerate() {
        let frame = cache.model.frame(&cp.frame).map_err(KinematicsError::Model)?;
        let block = cache.frame_jacobian(frame, DimMask::POSITION)?;
        j_c.rows_mut(3 * i, 3).copy_from(&block);
    }
    Ok(j_c)
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_tol * sigma_max` treated as zero.
pub fn svd_pseudoinverse<T: Real>(a: &DMatrix<T>, rel_tol: T) -> DMatrix<T> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    if sigma_max <= T::zero() {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let cutoff = rel_tol * sigma_max;
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let mut sigma_inv = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            sigma_inv[(i, i)] = T::one() / s;
        }
    }
    v_t.transpose() * sigma_inv * u.transpose()
}

/// Numerical rank with the same relative cutoff as [`svd_pseudoinverse`].
pub fn svd_rank<T: Real>(a: &DMatrix<T>, rel_tol: T) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let sigma_max = sv.max();
    if sigma_max <= T::zero() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * sigma_max).count()
}

/// Build P = I - Jc+ Jc together with rank diagnostics.
pub fn projector<T: Real>(j_c: &DMatrix<T>, rel_tol: T) -> ProjectionResult<T> {
    let nv = j_c.ncols();
    if j_c.nrows() == 0 {
        return ProjectionResult {
            j_c: j_c.clone(),
            j_c_pinv: DMatrix::zeros(nv, 0),
            p: DMatrix::identity(nv, nv),
            rank: 0,
            singular_values: Vec::new(),
        };
    }
    let svd = j_c.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = rel_tol * sigma_max;
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let u = svd.u.as_ref().expect("svd with u");

    let mut rank = 0;
    let mut sigma_inv = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if sigma_max > T::zero() && s > cutoff {
            sigma_inv[(i, i)] = T::one() / s;
            rank += 1;
        }
    }
    let j_c_pinv = v_t.transpose() * &sigma_inv * u.transpose();

    // P = I - V_r V_r^T from the retained right singular vectors; this is
    // algebraically I - Jc+ Jc but symmetric to machine precision.
    let mut p = DMatrix::identity(nv, nv);
    for i in 0..rank {
        let v_row = v_t.row(i);
        for r in 0..nv {
            for c in 0..nv {
                p[(r, c)] -= v_row[r] * v_row[c];
            }
        }
    }

    ProjectionResult {
        j_c: j_c.clone(),
        j_c_pinv,
        p,
        rank,
        singular_values: svd.singular_values.iter().copied().collect(),
    }
}

/// Backward-difference time derivative of the projector. The first control
/// cycle, with no previous sample, uses the zero matrix.
pub fn projector_derivative<T: Real>(
    p_prev: Option<&DMatrix<T>>,
    p_curr: &DMatrix<T>,
    dt: T,
) -> Result<DMatrix<T>, ProjectionError> {
    assert!(dt > T::zero(), "dt must be positive");
    match p_prev {
        None => Ok(DMatrix::zeros(p_curr.nrows(), p_curr.ncols())),
        Some(prev) => {
            if prev.shape() != p_curr.shape() {
                return Err(ProjectionError::ShapeMismatch {
                    expected: format!("{:?}", p_curr.shape()),
                    got: format!("{:?}", prev.shape()),
                });
            }
            Ok((p_curr - prev) / dt)
        }
    }
}

/// Constrained inertia Mc = P M + I - P; invertible whenever M is SPD.
pub fn constrained_inertia<T: Real>(
    p: &DMatrix<T>,
    m: &DMatrix<T>,
) -> Result<DMatrix<T>, ProjectionError> {
    if p.shape() != m.shape() {
        return Err(ProjectionError::ShapeMismatch {
            expected: format!("{:?}", m.shape()),
            got: format!("{:?}", p.shape()),
        });
    }
    let nv = p.nrows();
    let m_c = p * m + DMatrix::identity(nv, nv) - p;
    let sv = m_c.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smin <= T::zero() || smax / smin > real(CONDITION_LIMIT) {
        let cond = if smin <= T::zero() {
            f64::INFINITY
        } else {
            crate::scalar::to_f64(smax / smin)
        };
        return Err(ProjectionError::SingularInertia(cond));
    }
    Ok(m_c)
}

/// The four standard body-contact sets used by the evaluations.
pub fn prong_and_hind_feet<T: Real>(mu: T) -> ContactSet<T> {
    ContactSet::new(vec![
        ContactPoint::flat("PRONG_L", mu),
        ContactPoint::flat("RH_FOOT", mu),
        ContactPoint::flat("LH_FOOT", mu),
    ])
    .expect("distinct frames")
}

pub fn two_prongs_and_hind_feet<T: Real>(mu: T) -> ContactSet<T> {
    ContactSet::new(vec![
        ContactPoint::flat("PRONG_L", mu),
        ContactPoint::flat("PRONG_R", mu),
        ContactPoint::flat("RH_FOOT", mu),
        ContactPoint::flat("LH_FOOT", mu),
    ])
    .expect("distinct frames")
}

pub fn all_feet<T: Real>(mu: T) -> ContactSet<T> {
    ContactSet::new(
        crate::model::LEGS
            .iter()
            .map(|leg| ContactPoint::flat(format!("{leg}_FOOT"), mu))
            .collect(),
    )
    .expect("distinct frames")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::mass_matrix_at;
    use crate::kinematics::KinematicsCache;
    use crate::model::default_quadruped;
    use crate::test_util::random_state;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-8;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pinv_inverts_full_rank_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 6, 6) + DMatrix::identity(6, 6) * 3.0;
        let pinv = svd_pseudoinverse(&a, TOL);
        assert_relative_eq!(pinv, a.try_inverse().unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn pinv_satisfies_moore_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(4, 7), (7, 4), (5, 5), (3, 9)] {
            let a = random_matrix(&mut rng, r, c);
            let ap = svd_pseudoinverse(&a, TOL);
            assert_relative_eq!(&a * &ap * &a, a, epsilon = 1e-9);
            assert_relative_eq!(&ap * &a * &ap, ap, epsilon = 1e-9);
            let aap = &a * &ap;
            let apa = &ap * &a;
            assert_relative_eq!(aap.transpose(), aap, epsilon = 1e-9);
            assert_relative_eq!(apa.transpose(), apa, epsilon = 1e-9);
        }
    }

    #[test]
    fn pinv_of_zero_matrix_is_zero() {
        let a = DMatrix::<f64>::zeros(3, 5);
        let pinv = svd_pseudoinverse(&a, TOL);
        assert_eq!(pinv.shape(), (5, 3));
        assert_eq!(pinv.abs().max(), 0.0);
    }

    #[test]
    fn stack_dimensions_for_standard_stances() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = random_state(&model, &mut rng);
        let cache = KinematicsCache::new(&model, &state);

        let four = stack_constraint_jacobian(&cache, &all_feet(0.6)).unwrap();
        assert_eq!(four.shape(), (12, 18));

        let prong = stack_constraint_jacobian(&cache, &prong_and_hind_feet(0.6)).unwrap();
        assert_eq!(prong.shape(), (9, 18));

        let two_prong = stack_constraint_jacobian(&cache, &two_prongs_and_hind_feet(0.6)).unwrap();
        assert_eq!(two_prong.shape(), (12, 18));
        assert_eq!(svd_rank(&two_prong, TOL), 11);
    }

    #[test]
    fn two_prong_pinv_has_eleven_unit_eigenvalues() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random_state(&model, &mut rng);
        let cache = KinematicsCache::new(&model, &state);
        let j_c = stack_constraint_jacobian(&cache, &two_prongs_and_hind_feet(0.6)).unwrap();
        let pinv = svd_pseudoinverse(&j_c, TOL);
        // A+ A is an orthogonal projector; its unit eigenvalues count the rank.
        let apa = &pinv * &j_c;
        let eig = nalgebra::SymmetricEigen::new((apa.clone() + apa.transpose()) * 0.5);
        let units = eig.eigenvalues.iter().filter(|&&e| (e - 1.0).abs() < 1e-6).count();
        assert_eq!(units, 11);
    }

    #[test]
    fn projector_invariants_over_standard_contact_sets() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let state = random_state(&model, &mut rng);
            let cache = KinematicsCache::new(&model, &state);
            for contacts in [
                all_feet(0.6),
                prong_and_hind_feet(0.6),
                two_prongs_and_hind_feet(0.6),
                ContactSet::new(vec![ContactPoint::flat("LF_FOOT", 0.6)]).unwrap(),
            ] {
                let j_c = stack_constraint_jacobian(&cache, &contacts).unwrap();
                let res = projector(&j_c, TOL);
                assert!((res.p.clone() - res.p.transpose()).abs().max() < 1e-10);
                assert!((&res.p * &res.p - &res.p).abs().max() < 1e-10);
                assert!((&res.p * res.j_c.transpose()).abs().max() < 1e-9);
                assert_eq!(svd_rank(&res.p, TOL), 18 - res.rank);
            }
        }
    }

    #[test]
    fn projector_edge_cases() {
        // No constraints: P = I.
        let empty = DMatrix::<f64>::zeros(0, 18);
        let res = projector(&empty, TOL);
        assert_eq!(res.rank, 0);
        assert_relative_eq!(res.p, DMatrix::identity(18, 18));

        // Axis-aligned constraint [I3 0]: P = diag(0,0,0,1,...,1).
        let mut j_c = DMatrix::<f64>::zeros(3, 10);
        for i in 0..3 {
            j_c[(i, i)] = 1.0;
        }
        let res = projector(&j_c, TOL);
        let mut expect = DMatrix::identity(10, 10);
        for i in 0..3 {
            expect[(i, i)] = 0.0;
        }
        assert_relative_eq!(res.p, expect, epsilon = 1e-12);
    }

    #[test]
    fn two_prong_projector_rank_is_seven() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = random_state(&model, &mut rng);
        let cache = KinematicsCache::new(&model, &state);
        let j_c = stack_constraint_jacobian(&cache, &two_prongs_and_hind_feet(0.6)).unwrap();
        let res = projector(&j_c, TOL);
        assert_eq!(res.rank, 11);
        assert_eq!(svd_rank(&res.p, TOL), 7);
    }

    #[test]
    fn projector_derivative_basics() {
        let p = DMatrix::<f64>::identity(4, 4);
        // First cycle: zero matrix.
        let d0 = projector_derivative(None, &p, 0.01).unwrap();
        assert_eq!(d0.abs().max(), 0.0);
        // Stationary constraints: zero matrix.
        let d1 = projector_derivative(Some(&p), &p, 0.01).unwrap();
        assert_eq!(d1.abs().max(), 0.0);
        // Shape mismatch is an error.
        let bad = DMatrix::<f64>::identity(3, 3);
        assert!(projector_derivative(Some(&bad), &p, 0.01).is_err());
    }

    #[test]
    fn projector_derivative_matches_fine_finite_difference() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = random_state(&model, &mut rng);
        let u = state.velocity_vector();
        let contacts = all_feet::<f64>(0.6);

        let p_at = |s: &crate::state::GeneralizedState<f64>| {
            let cache = KinematicsCache::new(&model, s);
            let j_c = stack_constraint_jacobian(&cache, &contacts).unwrap();
            projector(&j_c, TOL).p
        };

        let dt = 2.5e-3; // control period
        let p_prev = p_at(&state.displaced(&u, -dt));
        let p_curr = p_at(&state);
        let pdot = projector_derivative(Some(&p_prev), &p_curr, dt).unwrap();

        let fine = 1e-6;
        let pdot_ref = (p_at(&state.displaced(&u, fine)) - p_at(&state.displaced(&u, -fine)))
            / (2.0 * fine);
        let scale = p_curr.norm() / dt;
        assert!((pdot - pdot_ref).norm() < 1e-3 * scale);
    }

    #[test]
    fn constrained_inertia_limits() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state = random_state(&model, &mut rng);
        let m = mass_matrix_at(&model, &state);
        let nv = m.nrows();

        let identity = DMatrix::identity(nv, nv);
        let m_c = constrained_inertia(&identity, &m).unwrap();
        assert_relative_eq!(m_c, m, epsilon = 1e-12);

        let zero = DMatrix::zeros(nv, nv);
        let m_c = constrained_inertia(&zero, &m).unwrap();
        assert_relative_eq!(m_c, identity, epsilon = 1e-12);
    }

    #[test]
    fn constrained_inertia_maps_into_projector_range() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let state = random_state(&model, &mut rng);
            let cache = KinematicsCache::new(&model, &state);
            let m = mass_matrix_at(&model, &state);
            let j_c = stack_constraint_jacobian(&cache, &all_feet(0.6)).unwrap();
            let res = projector(&j_c, TOL);
            let m_c = constrained_inertia(&res.p, &m).unwrap();
            let m_c_inv = m_c.clone().try_inverse().unwrap();
            // P Mc^-1 lands in range(P): (I - P) P Mc^-1 = 0.
            let nv = m.nrows();
            let pm = &res.p * &m_c_inv;
            let residual = (DMatrix::identity(nv, nv) - &res.p) * &pm;
            assert!(residual.abs().max() < 1e-9);
            // Mc^-1 P is symmetric (used by the null-space projector).
            let mp = &m_c_inv * &res.p;
            assert!((mp.clone() - mp.transpose()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn decomposition_identity_is_algebraic() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = crate::dynamics::selection_matrix::<f64>(model.dof());
        for _ in 0..50 {
            let state = random_state(&model, &mut rng);
            let cache = KinematicsCache::new(&model, &state);
            let m = mass_matrix_at(&model, &state);
            let j_c = stack_constraint_jacobian(&cache, &all_feet(0.6)).unwrap();
            let res = projector(&j_c, TOL);
            let nv = m.nrows();
            let h = DMatrix::from_fn(nv, 1, |_, _| rng.gen_range(-1.0..1.0)).column(0).into_owned();
            let qdd = nalgebra::DVector::from_fn(nv, |_, _| rng.gen_range(-1.0..1.0));
            let tau = nalgebra::DVector::from_fn(nv, |_, _| rng.gen_range(-1.0..1.0));
            let lam = nalgebra::DVector::from_fn(j_c.nrows(), |_, _| rng.gen_range(-1.0..1.0));

            let i = DMatrix::identity(nv, nv);
            let eq1 = &m * &qdd + &h - &b * &tau - j_c.transpose() * &lam;
            let eq3 = &res.p * (&m * &qdd) + &res.p * &h - &res.p * (&b * &tau);
            let eq4 = (&i - &res.p) * (&m * &qdd + &h)
                - (&i - &res.p) * (&b * &tau)
                - j_c.transpose() * &lam;
            let residual = (eq3 + eq4 - eq1).abs().max();
            assert!(residual < 1e-12, "residual = {residual:e}");
        }
    }

    #[test]
    fn duplicate_contact_frames_rejected() {
        let set = ContactSet::<f64>::new(vec![
            ContactPoint::flat("LF_FOOT", 0.5),
            ContactPoint::flat("LF_FOOT", 0.5),
        ]);
        assert!(matches!(set, Err(ProjectionError::DuplicateContact(_))));
    }
}
