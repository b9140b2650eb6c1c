//! Starting points for the parameter fits.
//!
//! Base geometry comes from (reweighted) principal directions of the
//! position cloud and an algebraic circle fit; orientation-mode parameters
//! are seeded from an already fitted base geometry.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::FitError;
use crate::geometry::{
    nearest_rotation, orthonormal_complement, quat_to_matrix, ExpCoords, Mat3,
    PoseSample, Vec3,
};
use crate::models::{
    AxialParams, BaseArticulation, ModelId, ModelParams, OrientationMode, PlanarParams,
    PrismaticParams, SlipAxisParams,
};

const ROBUST_PASSES: usize = 4;

struct Pca {
    centroid: Vec3,
    /// Ascending.
    values: [f64; 3],
    /// Matching unit eigenvectors.
    vectors: [Vec3; 3],
}

fn weighted_pca(points: &[Vec3], weights: &[f64]) -> Option<Pca> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let centroid = points
        .iter()
        .zip(weights)
        .fold(Vec3::zeros(), |acc, (p, w)| acc + p * *w)
        / total;
    let mut cov = Matrix3::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = p - centroid;
        cov += *w * d * d.transpose();
    }
    cov /= total;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let vectors = order.map(|i| Vector3::from(eig.eigenvectors.column(i)).normalize());
    Some(Pca {
        centroid,
        values,
        vectors,
    })
}

fn reweight(residuals: &[f64], weights: &mut [f64]) {
    let mut sorted: Vec<f64> = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let floor = (0.5 * median).max(1e-9);
    for (w, r) in weights.iter_mut().zip(residuals) {
        *w = 1.0 / r.max(floor);
    }
}

fn positions(poses: &[PoseSample]) -> Vec<Vec3> {
    poses.iter().map(|p| p.r).collect()
}

fn check_spread(pca: &Pca) -> Result<(), FitError> {
    if !(pca.values[2] > 1e-14) {
        return Err(FitError::Initialization(
            "degenerate position covariance (all positions identical)".into(),
        ));
    }
    Ok(())
}

/// Algebraic (Kasa) circle fit: minimizes `sum w (x^2 + y^2 + a x + b y + c)^2`.
/// Returns center and radius.
pub fn kasa_circle(points: &[(f64, f64)], weights: &[f64]) -> Option<((f64, f64), f64)> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for ((x, y), w) in points.iter().zip(weights) {
        let row = Vector3::new(*x, *y, 1.0);
        ata += *w * row * row.transpose();
        atb += *w * row * -(x * x + y * y);
    }
    let sol = ata.lu().solve(&atb)?;
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) || !cx.is_finite() || !cy.is_finite() {
        return None;
    }
    Some(((cx, cy), r2.sqrt()))
}

fn init_axial(points: &[Vec3]) -> Result<AxialParams, FitError> {
    let n = points.len();
    let mut weights = vec![1.0; n];
    let mut result = None;
    for _ in 0..ROBUST_PASSES {
        let pca = weighted_pca(points, &weights)
            .ok_or_else(|| FitError::Initialization("no positive weights".into()))?;
        check_spread(&pca)?;
        let normal = pca.vectors[0];
        let e1 = pca.vectors[2];
        let e2 = normal.cross(&e1);
        let planar: Vec<(f64, f64)> = points
            .iter()
            .map(|p| {
                let d = p - pca.centroid;
                (d.dot(&e1), d.dot(&e2))
            })
            .collect();
        let ((cx, cy), radius) = kasa_circle(&planar, &weights).ok_or_else(|| {
            FitError::Initialization("circle fit failed (collinear positions?)".into())
        })?;
        let residuals: Vec<f64> = points
            .iter()
            .zip(&planar)
            .map(|(p, (x, y))| {
                let off = (p - pca.centroid).dot(&normal);
                let radial = (x - cx).hypot(y - cy) - radius;
                off.hypot(radial)
            })
            .collect();
        reweight(&residuals, &mut weights);
        result = Some(AxialParams {
            w: ExpCoords::from_axis(&normal),
            d: pca.centroid + cx * e1 + cy * e2,
            l_bar: Vec3::x(),
            t_bar: Vec3::y(),
            l: radius,
            slip: None,
        });
    }
    let p = result.expect("at least one pass");
    if !p.d.iter().all(|x| x.is_finite()) || !p.l.is_finite() {
        return Err(FitError::Initialization("non-finite circle".into()));
    }
    Ok(p)
}

fn init_prismatic(points: &[Vec3]) -> Result<PrismaticParams, FitError> {
    let mut weights = vec![1.0; points.len()];
    let mut out = None;
    for _ in 0..ROBUST_PASSES {
        let pca = weighted_pca(points, &weights)
            .ok_or_else(|| FitError::Initialization("no positive weights".into()))?;
        check_spread(&pca)?;
        let dir = pca.vectors[2];
        let residuals: Vec<f64> = points
            .iter()
            .map(|p| {
                let d = p - pca.centroid;
                (d - dir * d.dot(&dir)).norm()
            })
            .collect();
        reweight(&residuals, &mut weights);
        out = Some(PrismaticParams {
            w: ExpCoords::from_axis(&dir),
            d: pca.centroid,
            r_lock: crate::geometry::Quat::identity(),
            slip: None,
        });
    }
    Ok(out.expect("at least one pass"))
}

fn init_planar(points: &[Vec3]) -> Result<PlanarParams, FitError> {
    let mut weights = vec![1.0; points.len()];
    let mut out = None;
    for _ in 0..ROBUST_PASSES {
        let pca = weighted_pca(points, &weights)
            .ok_or_else(|| FitError::Initialization("no positive weights".into()))?;
        check_spread(&pca)?;
        let w = ExpCoords::from_axis(&pca.vectors[0]);
        let normal = w.axis();
        let residuals: Vec<f64> = points
            .iter()
            .map(|p| (p - pca.centroid).dot(&normal).abs())
            .collect();
        reweight(&residuals, &mut weights);
        out = Some(PlanarParams {
            w,
            d_z: pca.centroid.dot(&normal),
            z_bar: Vec3::z(),
            slip: None,
        });
    }
    Ok(out.expect("at least one pass"))
}

/// Initial parameters for the base (free-orientation) geometry of `base`.
pub fn initialize_base(base: BaseArticulation, poses: &[PoseSample]) -> Result<ModelParams, FitError> {
    let points = positions(poses);
    Ok(match base {
        BaseArticulation::Axial => ModelParams::Axial(init_axial(&points)?),
        BaseArticulation::Prismatic => ModelParams::Prismatic(init_prismatic(&points)?),
        BaseArticulation::Planar => ModelParams::Planar(init_planar(&points)?),
    })
}

fn mean_rotation(poses: &[PoseSample]) -> Mat3 {
    poses
        .iter()
        .fold(Mat3::zeros(), |acc, p| acc + quat_to_matrix(&p.q))
        / poses.len() as f64
}

/// Body axis that stays most nearly fixed in the global frame, and that
/// global direction: the leading right singular vector of the mean rotation.
pub fn invariant_axis(poses: &[PoseSample]) -> (Vec3, Vec3) {
    let m = mean_rotation(poses);
    let svd = m.svd(true, true);
    let v_t = svd.v_t.expect("requested");
    let mut best = 0;
    for i in 1..3 {
        if svd.singular_values[i] > svd.singular_values[best] {
            best = i;
        }
    }
    let s_bar: Vec3 = v_t.row(best).transpose().normalize();
    let a = m * s_bar;
    let a = if a.norm() > 1e-12 { a.normalize() } else { quat_to_matrix(&poses[0].q) * s_bar };
    (s_bar, a)
}

fn slip_seed(poses: &[PoseSample]) -> SlipAxisParams {
    let (s_bar, a) = invariant_axis(poses);
    SlipAxisParams::from_axis(&a, &s_bar)
}

/// Seeds the orientation-mode parameters of `id` from a fitted base geometry.
pub fn initialize_mode(
    id: ModelId,
    base: &ModelParams,
    poses: &[PoseSample],
) -> Result<ModelParams, FitError> {
    use OrientationMode::*;
    if base.base() != id.base {
        return Err(FitError::Model(crate::error::ModelError::WrongParams(id.to_string())));
    }
    let axis = base.axis();
    Ok(match (*base, id.mode) {
        (p, Free) => p,
        (ModelParams::Axial(mut p), Rigid) => {
            let n = poses.len() as f64;
            let l_bar = poses
                .iter()
                .map(|s| quat_to_matrix(&s.q).transpose() * (p.d - s.r))
                .fold(Vec3::zeros(), |a, b| a + b)
                / n;
            let body_axis = poses
                .iter()
                .map(|s| quat_to_matrix(&s.q).transpose() * axis)
                .fold(Vec3::zeros(), |a, b| a + b);
            let mut t_bar = l_bar.cross(&body_axis);
            if t_bar.norm() < 1e-9 {
                t_bar = orthonormal_complement(&l_bar).0;
            }
            let lh = l_bar.normalize();
            p.t_bar = (t_bar - lh * lh.dot(&t_bar)).normalize();
            p.l_bar = l_bar;
            p.slip = None;
            ModelParams::Axial(p)
        }
        (ModelParams::Axial(mut p), Slip) => {
            p.slip = Some(slip_seed(poses));
            ModelParams::Axial(p)
        }
        (ModelParams::Prismatic(mut p), Slip) => {
            p.slip = Some(slip_seed(poses));
            ModelParams::Prismatic(p)
        }
        (ModelParams::Prismatic(mut p), Rigid) => {
            let rot = nearest_rotation(&mean_rotation(poses));
            let q = crate::geometry::Quat::from_matrix(&rot);
            p.r_lock = q;
            ModelParams::Prismatic(p)
        }
        (ModelParams::Planar(mut p), mode) => {
            let body = poses
                .iter()
                .map(|s| quat_to_matrix(&s.q).transpose() * axis)
                .fold(Vec3::zeros(), |a, b| a + b);
            p.z_bar = if body.norm() > 1e-9 { body.normalize() } else { Vec3::z() };
            if mode == Slip {
                let r = p.w.rotation();
                p.slip = Some(SlipAxisParams {
                    u: r * Vec3::x(),
                    v: r * Vec3::y(),
                    s_bar: p.z_bar,
                });
            }
            ModelParams::Planar(p)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, Quat};
    use approx::assert_relative_eq;

    fn at(r: Vec3) -> PoseSample {
        PoseSample { t: 0.0, r, q: Quat::identity() }
    }

    #[test]
    fn circle_in_xy_plane() {
        let poses: Vec<_> = (0..60)
            .map(|i| {
                let th = 0.03 * i as f64;
                at(Vec3::new(th.cos(), th.sin(), 0.0))
            })
            .collect();
        let ModelParams::Axial(p) = initialize_base(BaseArticulation::Axial, &poses).unwrap() else {
            panic!()
        };
        assert!(p.w.axis().dot(&Vec3::z()).abs() > 1.0 - 1e-9);
        assert!(p.d.norm() < 1e-6, "{}", p.d);
        assert_relative_eq!(p.l, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn kasa_matches_three_point_circle() {
        // Circumcircle of (0,0), (2,0), (0,2): center (1,1), radius sqrt(2).
        let pts = [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)];
        let ((cx, cy), r) = kasa_circle(&pts, &[1.0; 3]).unwrap();
        assert_relative_eq!(cx, 1.0, epsilon = 1e-12);
        assert_relative_eq!(cy, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn line_along_x() {
        let poses: Vec<_> = (0..60).map(|i| at(Vec3::new(0.01 * i as f64, 0.3, -0.2))).collect();
        let p = initialize_base(BaseArticulation::Prismatic, &poses).unwrap();
        assert!(p.axis().dot(&Vec3::x()).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn plane_at_height() {
        let poses: Vec<_> = (0..100)
            .map(|i| at(Vec3::new((i % 10) as f64 * 0.05, (i / 10) as f64 * 0.04, 0.2)))
            .collect();
        let ModelParams::Planar(p) = initialize_base(BaseArticulation::Planar, &poses).unwrap() else {
            panic!()
        };
        assert!(p.w.axis().dot(&Vec3::z()).abs() > 1.0 - 1e-12);
        assert_relative_eq!(p.d_z * p.w.axis().z.signum(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn identical_positions_fail() {
        let poses = vec![at(Vec3::new(1.0, 2.0, 3.0)); 60];
        for base in BaseArticulation::ALL {
            assert!(matches!(
                initialize_base(base, &poses),
                Err(FitError::Initialization(_))
            ));
        }
    }

    #[test]
    fn invariant_axis_of_single_axis_rotation() {
        let a = Vec3::new(0.3, -0.4, 0.8).normalize();
        let q0 = axis_angle(&Vec3::new(1.0, 0.2, 0.1), 0.7);
        let poses: Vec<_> = (0..50)
            .map(|i| PoseSample {
                t: i as f64,
                r: Vec3::zeros(),
                q: axis_angle(&a, 0.03 * i as f64) * q0,
            })
            .collect();
        let (s_bar, axis) = invariant_axis(&poses);
        assert!(axis.dot(&a).abs() > 1.0 - 1e-9);
        assert!((q0 * s_bar).dot(&a).abs() > 1.0 - 1e-9);
    }
}
