//! Per-sample residual channels and their threshold counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fitting::{project_raw, solve_lagrange_raw, FitResult, LagrangeSolution, ProjectedPose, SolverConfig};
use crate::geometry::{quat_angle, Demonstration, Vec3};
use crate::models::ModelId;

/// Per-channel error levels above which a residual counts as a violation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub r_se: f64,
    pub f_se: f64,
    pub q_se: f64,
    pub n_se: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            r_se: 0.005,
            f_se: 0.25,
            q_se: 0.05,
            n_se: 0.1,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("r_se", self.r_se),
            ("f_se", self.f_se),
            ("q_se", self.q_se),
            ("n_se", self.n_se),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("error_model.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// The `[error_model]` config section: thresholds plus the settings of the
/// friction estimate and force normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModelConfig {
    pub r_se: f64,
    pub f_se: f64,
    pub q_se: f64,
    pub n_se: f64,
    /// Speed below which no friction force is attributed, m/s.
    pub v_min: f64,
    /// Angular speed below which no friction moment is attributed, rad/s.
    pub omega_min: f64,
    /// Force magnitude floor in the normalized force residual, N.
    pub f_floor: f64,
}

impl Default for ErrorModelConfig {
    fn default() -> Self {
        let t = Thresholds::default();
        Self {
            r_se: t.r_se,
            f_se: t.f_se,
            q_se: t.q_se,
            n_se: t.n_se,
            v_min: 0.005,
            omega_min: 0.05,
            f_floor: 0.5,
        }
    }
}

impl ErrorModelConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            r_se: self.r_se,
            f_se: self.f_se,
            q_se: self.q_se,
            n_se: self.n_se,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.thresholds().validate()?;
        for (name, v) in [
            ("v_min", self.v_min),
            ("omega_min", self.omega_min),
            ("f_floor", self.f_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("error_model.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidenceSeries {
    pub e_r: Vec<f64>,
    pub e_f: Vec<f64>,
    pub e_q: Vec<f64>,
    pub e_n: Vec<f64>,
    /// False where the projection did not converge.
    pub valid: Vec<bool>,
}

impl EvidenceSeries {
    pub fn len(&self) -> usize {
        self.e_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_r.is_empty()
    }

    pub fn n_flagged(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn mean_e_r(&self) -> f64 {
        let (sum, n) = self
            .e_r
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
        if n == 0 {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub n_r: usize,
    pub n_f: usize,
    pub n_q: usize,
    pub n_n: usize,
    pub n_valid: usize,
}

impl ViolationCounts {
    /// Position plus force violations, the base-articulation score.
    pub fn kinematic_base(&self) -> usize {
        self.n_r + self.n_f
    }

    /// Orientation plus moment violations, the orientation-mode score.
    pub fn orientation(&self) -> usize {
        self.n_q + self.n_n
    }

    pub fn total(&self) -> usize {
        self.n_r + self.n_f + self.n_q + self.n_n
    }
}

fn along(x: &Vec3, dir: &Vec3, min_speed: f64) -> Vec3 {
    let speed = dir.norm();
    if speed > min_speed {
        let u = dir / speed;
        u * x.dot(&u)
    } else {
        Vec3::zeros()
    }
}

/// Conservative friction estimate: every force component along the motion
/// direction and every moment component along the rotation direction.
pub fn friction_estimates(
    demo: &Demonstration,
    velocities: &[(Vec3, Vec3)],
    cfg: &ErrorModelConfig,
) -> Vec<(Vec3, Vec3)> {
    demo.wrenches
        .iter()
        .zip(velocities)
        .map(|(w, (v, omega))| (along(&w.f, v, cfg.v_min), along(&w.n, omega, cfg.omega_min)))
        .collect()
}

/// The four residual channels from per-sample projections and multipliers.
pub fn residual_series(
    demo: &Demonstration,
    projections: &[ProjectedPose],
    lagrange: &[LagrangeSolution],
    f_floor: f64,
) -> EvidenceSeries {
    let n = demo.len();
    let mut s = EvidenceSeries {
        e_r: Vec::with_capacity(n),
        e_f: Vec::with_capacity(n),
        e_q: Vec::with_capacity(n),
        e_n: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for (((pose, wrench), proj), lag) in demo.poses.iter().zip(&demo.wrenches).zip(projections).zip(lagrange) {
        s.e_r.push((proj.r_star - pose.r).norm());
        s.e_f.push(lag.force_balance_residual.norm() / wrench.f.norm().max(f_floor));
        s.e_q.push(quat_angle(&pose.q, &proj.q_star));
        s.e_n.push(lag.moment_balance_residual.norm());
        s.valid.push(proj.converged);
    }
    s
}

/// Counts of valid samples whose residual exceeds each threshold.
pub fn violation_counts(series: &EvidenceSeries, th: &Thresholds) -> ViolationCounts {
    let mut c = ViolationCounts::default();
    for i in 0..series.len() {
        if !series.valid[i] {
            continue;
        }
        c.n_valid += 1;
        c.n_r += usize::from(series.e_r[i] > th.r_se);
        c.n_f += usize::from(series.e_f[i] > th.f_se);
        c.n_q += usize::from(series.e_q[i] > th.q_se);
        c.n_n += usize::from(series.e_n[i] > th.n_se);
    }
    if c.n_valid == 0 && !series.is_empty() {
        log::warn!("no valid samples in evidence series; all counts are zero");
    }
    c
}

/// Everything computed for one fitted model on one demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvidence {
    pub id: ModelId,
    pub fit: FitResult,
    pub series: EvidenceSeries,
    pub counts: ViolationCounts,
    pub n_rank_deficient: usize,
}

/// Projects every sample, solves the multipliers at the projected pose and
/// tallies the residual channels for one fitted model.
pub fn evaluate_model(
    fit: FitResult,
    demo: &Demonstration,
    friction: &[(Vec3, Vec3)],
    solver: &SolverConfig,
    em: &ErrorModelConfig,
) -> ModelEvidence {
    let id: ModelId = fit.id;
    let alpha: Vec<f64> = fit
        .alpha
        .to_vector(id)
        .expect("fitted parameters match their model")
        .iter()
        .copied()
        .collect();
    let per_sample: Vec<(ProjectedPose, LagrangeSolution)> = demo
        .poses
        .par_iter()
        .zip(demo.wrenches.par_iter())
        .zip(friction.par_iter())
        .map(|((pose, wrench), (f_mu, n_mu))| {
            let proj = project_raw(id, &alpha, pose, solver);
            let lag = solve_lagrange_raw(id, &alpha, &proj.pose(pose.t), wrench, f_mu, n_mu, solver.c_n);
            (proj, lag)
        })
        .collect();
    let (projections, lagrange): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let series = residual_series(demo, &projections, &lagrange, em.f_floor);
    let counts = violation_counts(&series, &em.thresholds());
    ModelEvidence {
        id,
        fit,
        series,
        counts,
        n_rank_deficient: lagrange.iter().filter(|l| l.rank_deficient).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PoseSample, Quat, WrenchSample};

    fn demo_with_force(f: Vec3) -> Demonstration {
        Demonstration {
            poses: vec![PoseSample { t: 0.0, r: Vec3::zeros(), q: Quat::identity() }],
            wrenches: vec![WrenchSample { t: 0.0, f, n: Vec3::zeros() }],
            tong: None,
        }
    }

    #[test]
    fn friction_projection_examples() {
        let cfg = ErrorModelConfig::default();
        let d = demo_with_force(Vec3::new(3.0, 4.0, 0.0));
        let est = friction_estimates(&d, &[(Vec3::new(0.2, 0.0, 0.0), Vec3::zeros())], &cfg);
        assert_eq!(est[0].0, Vec3::new(3.0, 0.0, 0.0));
        assert_eq!(est[0].1, Vec3::zeros());
        let still = friction_estimates(&d, &[(Vec3::zeros(), Vec3::zeros())], &cfg);
        assert_eq!(still[0].0, Vec3::zeros());
        let orth = friction_estimates(&d, &[(Vec3::new(0.0, 0.0, 0.3), Vec3::zeros())], &cfg);
        assert_eq!(orth[0].0, Vec3::zeros());
    }

    fn series(e_r: Vec<f64>) -> EvidenceSeries {
        let n = e_r.len();
        EvidenceSeries {
            e_r,
            e_f: vec![0.0; n],
            e_q: vec![0.0; n],
            e_n: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    #[test]
    fn counts_position_violations() {
        let th = Thresholds { r_se: 0.01, ..Thresholds::default() };
        let c = violation_counts(&series(vec![0.001, 0.02, 0.5]), &th);
        assert_eq!((c.n_r, c.n_f, c.n_q, c.n_n), (2, 0, 0, 0));
    }

    #[test]
    fn zero_residuals_and_all_flagged() {
        let th = Thresholds::default();
        assert_eq!(violation_counts(&series(vec![0.0; 4]), &th).total(), 0);
        let mut s = series(vec![1.0; 4]);
        s.valid = vec![false; 4];
        let c = violation_counts(&s, &th);
        assert_eq!(c.total(), 0);
        assert_eq!(c.n_valid, 0);
    }

    #[test]
    fn counts_fall_as_threshold_rises() {
        let s = series((0..50).map(|i| i as f64 * 0.001).collect());
        let mut prev = usize::MAX;
        for k in 0..60 {
            let th = Thresholds { r_se: k as f64 * 0.001, ..Thresholds::default() };
            let n = violation_counts(&s, &th).n_r;
            assert!(n <= prev);
            prev = n;
        }
    }
}
