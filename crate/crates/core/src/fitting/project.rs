//! Closest constraint-consistent pose, and quasi-static reaction multipliers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fitting::SolverConfig;
use crate::geometry::{quat_exp, quat_log, PoseSample, Quat, Vec3, WrenchSample};
use crate::models::{eval_raw, ModelId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPose {
    pub r_star: Vec3,
    pub q_star: Quat,
    /// Largest absolute constraint value at the returned pose.
    pub violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ProjectedPose {
    pub fn pose(&self, t: f64) -> PoseSample {
        PoseSample {
            t,
            r: self.r_star,
            q: self.q_star,
        }
    }
}

fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * top.max(1e-300);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let p = svd.pseudo_inverse(tol).expect("both factors computed");
    (p, rank)
}

/// Projects `p` onto the constraint manifold of `id` with flat parameters
/// `alpha`: minimizes `|r* - r|^2 + kappa * angle(q, q*)^2` subject to
/// `phi(r*, q*) = 0`.
///
/// Solved as a sequence of linearized equality-constrained least-squares
/// steps in the right-perturbation tangent space. Exact at the measured pose
/// when it is already feasible.
pub fn project_raw(id: ModelId, alpha: &[f64], p: &PoseSample, cfg: &SolverConfig) -> ProjectedPose {
    let kappa = cfg.kappa;
    let mut r = p.r;
    let mut q = p.q;
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut step_norm = 0.0;

    while iterations < cfg.projection_max_iter {
        let e = eval_raw(id, alpha, &PoseSample { r, q, ..*p });
        violation = e.phi.amax();
        if violation < 1e-13 && step_norm < 1e-10 {
            break;
        }
        iterations += 1;
        let m = e.len();
        let delta = quat_log(&(p.q.inverse() * q));
        let mut y = DVector::zeros(6);
        y.fixed_rows_mut::<3>(0).copy_from(&(r - p.r));
        y.fixed_rows_mut::<3>(3).copy_from(&delta);
        let mut j = DMatrix::zeros(m, 6);
        j.view_mut((0, 0), (m, 3)).copy_from(&e.j_r);
        j.view_mut((0, 3), (m, 3)).copy_from(&e.j_pi);
        let mut winv_jt = j.transpose();
        for row in 3..6 {
            winv_jt.row_mut(row).scale_mut(1.0 / kappa);
        }
        let schur = &j * &winv_jt;
        let (schur_inv, _) = pinv(&schur);
        let mu = schur_inv * (&j * &y - &e.phi);
        let step = -&y + winv_jt * mu;
        r += Vec3::new(step[0], step[1], step[2]);
        q *= quat_exp(&Vec3::new(step[3], step[4], step[5]));
        step_norm = step.norm();
        if step_norm < 1e-13 * (1.0 + r.norm()) || (violation < 1e-13 && step_norm < 1e-10) {
            let e = eval_raw(id, alpha, &PoseSample { r, q, ..*p });
            violation = e.phi.amax();
            break;
        }
    }
    if iterations == cfg.projection_max_iter {
        violation = eval_raw(id, alpha, &PoseSample { r, q, ..*p }).phi.amax();
    }
    ProjectedPose {
        r_star: r,
        q_star: q,
        violation,
        iterations,
        converged: violation < cfg.projection_tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeSolution {
    pub lambda: DVector<f64>,
    pub force_balance_residual: Vec3,
    pub moment_balance_residual: Vec3,
    /// The stacked Jacobian lacked full column rank; `lambda` is the
    /// minimum-norm solution.
    pub rank_deficient: bool,
}

/// Multipliers that best explain the measured wrench as a constraint
/// reaction plus friction: least squares over the stacked force and moment
/// balance, with the moment rows scaled by `c_n`.
pub fn solve_lagrange_raw(
    id: ModelId,
    alpha: &[f64],
    p: &PoseSample,
    wrench: &WrenchSample,
    f_mu: &Vec3,
    n_mu: &Vec3,
    c_n: f64,
) -> LagrangeSolution {
    let e = eval_raw(id, alpha, p);
    let m = e.len();
    let jr_t = e.j_r.transpose();
    let jpi_t = e.j_pi_world(&p.q).transpose();
    let mut b = DMatrix::zeros(6, m);
    b.view_mut((0, 0), (3, m)).copy_from(&jr_t);
    b.view_mut((3, 0), (3, m)).copy_from(&(c_n * &jpi_t));
    let mut rhs = DVector::zeros(6);
    rhs.fixed_rows_mut::<3>(0).copy_from(&-(wrench.f - f_mu));
    rhs.fixed_rows_mut::<3>(3).copy_from(&(-c_n * (wrench.n - n_mu)));
    let (b_pinv, rank) = pinv(&b);
    let lambda = b_pinv * rhs;
    let fr = &jr_t * &lambda;
    let nr = &jpi_t * &lambda;
    LagrangeSolution {
        force_balance_residual: Vec3::new(fr[0], fr[1], fr[2]) - f_mu + wrench.f,
        moment_balance_residual: Vec3::new(nr[0], nr[1], nr[2]) - n_mu + wrench.n,
        lambda,
        rank_deficient: rank < m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, ExpCoords};
    use crate::models::{AxialParams, BaseArticulation, ModelParams, OrientationMode};
    use approx::assert_relative_eq;

    fn unit_circle() -> (ModelId, Vec<f64>) {
        let id = ModelId::new(BaseArticulation::Axial, OrientationMode::Free);
        let p = ModelParams::Axial(AxialParams {
            w: ExpCoords::ZERO,
            d: Vec3::zeros(),
            l_bar: Vec3::x(),
            t_bar: Vec3::y(),
            l: 1.0,
            slip: None,
        });
        (id, p.to_vector(id).unwrap().iter().copied().collect())
    }

    #[test]
    fn radial_projection() {
        let (id, a) = unit_circle();
        let p = PoseSample { t: 0.0, r: Vec3::new(2.0, 0.0, 0.0), q: Quat::identity() };
        let pr = project_raw(id, &a, &p, &SolverConfig::default());
        assert!(pr.converged);
        assert_relative_eq!(pr.r_star, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn feasible_pose_is_fixed() {
        let (id, a) = unit_circle();
        let p = PoseSample {
            t: 0.0,
            r: Vec3::new(0.6, 0.8, 0.0),
            q: axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.4),
        };
        let pr = project_raw(id, &a, &p, &SolverConfig::default());
        assert_eq!(pr.r_star, p.r);
        assert_eq!(pr.q_star, p.q);
    }

    #[test]
    fn zero_wrench_gives_zero_multipliers() {
        let (id, a) = unit_circle();
        let p = PoseSample { t: 0.0, r: Vec3::new(1.0, 0.0, 0.0), q: Quat::identity() };
        let w = WrenchSample { t: 0.0, f: Vec3::zeros(), n: Vec3::zeros() };
        let s = solve_lagrange_raw(id, &a, &p, &w, &Vec3::zeros(), &Vec3::zeros(), 1.0);
        assert!(s.lambda.iter().all(|x| *x == 0.0));
        assert!(!s.rank_deficient);
    }

    #[test]
    fn out_of_range_force_leaves_its_magnitude() {
        // At (1,0,0) the reactions span x and z; a y component is tangential.
        let (id, a) = unit_circle();
        let p = PoseSample { t: 0.0, r: Vec3::new(1.0, 0.0, 0.0), q: Quat::identity() };
        let w = WrenchSample { t: 0.0, f: Vec3::new(2.0, 0.7, -1.0), n: Vec3::zeros() };
        let s = solve_lagrange_raw(id, &a, &p, &w, &Vec3::zeros(), &Vec3::zeros(), 1.0);
        assert_relative_eq!(s.force_balance_residual.norm(), 0.7, epsilon = 1e-12);
        assert_relative_eq!(s.moment_balance_residual.norm(), 0.0, epsilon = 1e-12);
    }
}
