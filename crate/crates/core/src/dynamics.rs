//! Mass matrix, bias forces and energies of the floating-base system.
//!
//! Quantities satisfy `M(q) qddot + h(q, qdot) = B tau + Jc^T lambda` in the
//! crate-wide velocity convention. The mass matrix is assembled from
//! per-body center-of-mass Jacobians; the bias vector projects the
//! Newton-Euler forces of the zero-acceleration motion through the same
//! Jacobians, so both are consistent with the kinematics module by
//! construction and are validated against energy and finite-difference
//! oracles in the tests.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::kinematics::KinematicsCache;
use crate::model::{FrameRef, RobotModel};
use crate::scalar::{real, Real};
use crate::state::GeneralizedState;

/// Standard gravity, m/s^2, pointing along -z.
pub fn standard_gravity<T: Real>() -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), real(-9.81))
}

/// Actuation selection matrix: block-diagonal [0_6; I_n], (n+6) x (n+6).
pub fn selection_matrix<T: Real>(n: usize) -> DMatrix<T> {
    let mut b = DMatrix::zeros(n + 6, n + 6);
    for i in 0..n {
        b[(6 + i, 6 + i)] = T::one();
    }
    b
}

/// Embed actuated joint torques into a generalized (n+6) vector.
pub fn embed_joint_torques<T: Real>(tau_j: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(tau_j.len() + 6);
    out.rows_mut(6, tau_j.len()).copy_from(tau_j);
    out
}

/// Joint-space inertia matrix M(q), symmetric positive definite.
pub fn mass_matrix<T: Real>(cache: &KinematicsCache<T>) -> DMatrix<T> {
    let model = cache.model;
    let nv = model.nv();
    let mut m = DMatrix::zeros(nv, nv);
    for (i, link) in model.links.iter().enumerate() {
        let jac = cache.full_jacobian(FrameRef { link: i, offset: link.com });
        let jv = jac.rows(0, 3);
        let jw = jac.rows(3, 3);
        let rot = cache.body_rotation(i).matrix().clone_owned();
        let inertia_w = &rot * link.inertia * rot.transpose();
        m += jv.transpose() * jv.clone_owned() * link.mass;
        m += jw.transpose() * inertia_w * jw.clone_owned();
    }
    // Exact symmetry regardless of accumulation order.
    let mt = m.transpose();
    (m + mt) * real::<T>(0.5)
}

/// Bias forces h(qdot, q): Coriolis, centrifugal and gravity.
pub fn bias_forces<T: Real>(cache: &KinematicsCache<T>, gravity: &Vector3<T>) -> DVector<T> {
    let model = cache.model;
    let nv = model.nv();
    let mut h = DVector::zeros(nv);
    for (i, link) in model.links.iter().enumerate() {
        let jac = cache.full_jacobian(FrameRef { link: i, offset: link.com });
        let (_, _, bias_acc) = cache.com_kinematics(i);
        let omega = cache.body_angular_velocity(i);
        let alpha = cache.body_bias_angular_acc(i);
        let rot = cache.body_rotation(i).matrix().clone_owned();
        let inertia_w = &rot * link.inertia * rot.transpose();

        let force = (bias_acc - gravity) * link.mass;
        let torque = &inertia_w * alpha + omega.cross(&(&inertia_w * omega));

        let jv = jac.rows(0, 3);
        let jw = jac.rows(3, 3);
        h += jv.transpose() * force + jw.transpose() * torque;
    }
    h
}

/// Kinetic energy from per-link rigid-body motion.
pub fn kinetic_energy<T: Real>(cache: &KinematicsCache<T>) -> T {
    let model = cache.model;
    let mut e = T::zero();
    let half = real::<T>(0.5);
    for (i, link) in model.links.iter().enumerate() {
        let (_, v, _) = cache.com_kinematics(i);
        let omega = cache.body_angular_velocity(i);
        let rot = cache.body_rotation(i).matrix().clone_owned();
        let inertia_w = &rot * link.inertia * rot.transpose();
        e += half * link.mass * v.norm_squared();
        e += half * omega.dot(&(&inertia_w * omega));
    }
    e
}

/// Gravitational potential energy (zero at the inertia-frame origin).
pub fn potential_energy<T: Real>(cache: &KinematicsCache<T>, gravity: &Vector3<T>) -> T {
    let model = cache.model;
    let mut e = T::zero();
    for (i, link) in model.links.iter().enumerate() {
        let (c, _, _) = cache.com_kinematics(i);
        e -= link.mass * gravity.dot(&c);
    }
    e
}

/// Convenience wrappers working directly on a state.
pub fn mass_matrix_at<T: Real>(model: &RobotModel<T>, state: &GeneralizedState<T>) -> DMatrix<T> {
    mass_matrix(&KinematicsCache::new(model, state))
}

pub fn bias_forces_at<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    gravity: &Vector3<T>,
) -> DVector<T> {
    bias_forces(&KinematicsCache::new(model, state), gravity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_quadruped;
    use crate::test_util::random_state;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_potential_gradient(
        model: &RobotModel<f64>,
        state: &GeneralizedState<f64>,
        gravity: &Vector3<f64>,
    ) -> DVector<f64> {
        let nv = model.nv();
        let eps = 1e-6;
        let mut grad = DVector::zeros(nv);
        for k in 0..nv {
            let mut dir = DVector::zeros(nv);
            dir[k] = 1.0;
            let plus = state.displaced(&dir, eps);
            let minus = state.displaced(&dir, -eps);
            let vp = potential_energy(&KinematicsCache::new(model, &plus), gravity);
            let vm = potential_energy(&KinematicsCache::new(model, &minus), gravity);
            grad[k] = (vp - vm) / (2.0 * eps);
        }
        grad
    }

    #[test]
    fn selection_matrix_shape_and_idempotence() {
        let b = selection_matrix::<f64>(12);
        assert_eq!(b.nrows(), 18);
        assert_eq!(b.rank(1e-12), 12);
        for i in 0..6 {
            assert_eq!(b[(i, i)], 0.0);
        }
        assert_relative_eq!(&b * &b, b, epsilon = 0.0);
        // B tau zeroes exactly the floating-base rows.
        let tau = DVector::from_fn(18, |i, _| i as f64 + 1.0);
        let btau = &b * &tau;
        for i in 0..6 {
            assert_eq!(btau[i], 0.0);
        }
        for i in 6..18 {
            assert_eq!(btau[i], tau[i]);
        }
    }

    #[test]
    fn mass_matrix_is_spd_with_total_mass_block() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let state = random_state(&model, &mut rng);
            let m = mass_matrix_at(&model, &state);
            assert!((m.clone() - m.transpose()).abs().max() < 1e-10);
            let eig = nalgebra::SymmetricEigen::new(m.clone());
            assert!(eig.eigenvalues.min() > 0.0);
            // Floating-base linear rows see the total mass in inertia coordinates.
            let total = model.total_mass();
            for r in 0..3 {
                for c in 0..3 {
                    let expect = if r == c { total } else { 0.0 };
                    assert_relative_eq!(m[(r, c)], expect, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn kinetic_energy_matches_quadratic_form() {
        let model = default_quadruped::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let state = random_state(&model, &mut rng);
            let cache = KinematicsCache::new(&model, &state);
            let m = mass_matrix(&cache);
            let u = state.velocity_vector();
            let quad = 0.5 * u.dot(&(&m * &u));
            let direct = kinetic_energy(&cache);
            assert_relative_eq!(quad, direct, epsilon = 1e-8, max_relative = 1e-10);
        }
    }

    #[test]
    fn zero_velocity_bias_is_pure_gravity() {
        let model = default_quadruped::<f64>();
        let g = standard_gravity::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut state = random_state(&model, &mut rng);
            state.set_velocity_vector(&DVector::zeros(model.nv()));
            let h = bias_forces_at(&model, &state, &g);
            let grad = fd_potential_gradient(&model, &state, &g);
            assert_relative_eq!(h, grad, epsilon = 1e-6);
        }
    }

    #[test]
    fn power_balance_without_gravity() {
        let model = default_quadruped::<f64>();
        let g = Vector3::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let state = random_state(&model, &mut rng);
            let u = state.velocity_vector();
            let h = bias_forces_at(&model, &state, &g);
            // Mdot along the motion, by central finite differences.
            let dt = 1e-5;
            let mp = mass_matrix_at(&model, &state.displaced(&u, dt));
            let mm = mass_matrix_at(&model, &state.displaced(&u, -dt));
            let mdot = (mp - mm) / (2.0 * dt);
            let lhs = u.dot(&h);
            let rhs = 0.5 * u.dot(&(&mdot * &u));
            assert_relative_eq!(lhs, rhs, epsilon = 1e-8, max_relative = 1e-7);
        }
    }

    #[test]
    fn gravity_compensation_holds_joints_still_with_base_clamped() {
        // Base held externally, joint torques from the independent
        // potential-gradient oracle: resulting joint accelerations vanish.
        let model = default_quadruped::<f64>();
        let g = standard_gravity::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut state = random_state(&model, &mut rng);
            state.set_velocity_vector(&DVector::zeros(model.nv()));
            let tau = fd_potential_gradient(&model, &state, &g).rows(6, model.dof()).into_owned();
            let h = bias_forces_at(&model, &state, &g);
            let m = mass_matrix_at(&model, &state);
            let mjj = m.view((6, 6), (model.dof(), model.dof())).into_owned();
            let lu = mjj.lu();
            let h_j = h.rows(6, model.dof()).into_owned();
            let qdd_comp = lu.solve(&(tau - &h_j)).unwrap();
            let qdd_free = lu.solve(&(-&h_j)).unwrap();
            // Oracle torques cancel gravity to within finite-difference noise:
            // residual accelerations at least 1e6 times below the free fall.
            assert!(qdd_comp.abs().max() < 1e-6 * qdd_free.abs().max().max(1.0));
        }
    }
}
