//! Model fitting, constrained projection and reaction multipliers.

mod init;
mod project;
mod solver;

use serde::{Deserialize, Serialize};

use crate::error::{FitError, ModelError};
use crate::geometry::{Demonstration, PoseSample, Vec3, WrenchSample};
use crate::models::{ModelId, ModelParams, OrientationMode};

pub use init::{initialize_base, initialize_mode, invariant_axis, kasa_circle};
pub use project::{project_raw, solve_lagrange_raw, LagrangeSolution, ProjectedPose};
pub use solver::{irls_fit, robust_objective, FitResult};

/// Tolerances and iteration caps for fitting and projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Residual floor in the robust weight `1 / max(|phi|, eps_w)`.
    pub eps_w: f64,
    pub max_outer: usize,
    /// Relative objective change that ends the reweighting loop.
    pub outer_tol: f64,
    pub max_inner: usize,
    /// Weight of the parameter-coupling penalties.
    pub penalty_weight: f64,
    /// Orientation weight in the projection metric, m^2/rad^2.
    pub kappa: f64,
    /// Moment-row scale in the multiplier solve.
    pub c_n: f64,
    pub projection_tol: f64,
    pub projection_max_iter: usize,
    pub min_samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_w: 1e-4,
            max_outer: 50,
            outer_tol: 1e-8,
            max_inner: 100,
            penalty_weight: 1e3,
            kappa: 0.01,
            c_n: 1.0,
            projection_tol: 1e-6,
            projection_max_iter: 50,
            min_samples: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("eps_w", self.eps_w),
            ("outer_tol", self.outer_tol),
            ("penalty_weight", self.penalty_weight),
            ("kappa", self.kappa),
            ("c_n", self.c_n),
            ("projection_tol", self.projection_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("solver.{name} must be positive, got {v}"));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.projection_max_iter == 0 {
            return Err("solver iteration caps must be at least 1".into());
        }
        Ok(())
    }
}

/// Initial parameters for `id`: base geometry from the positions, then the
/// orientation-mode parameters seeded from that geometry.
pub fn initialize(id: ModelId, demo: &Demonstration, cfg: &SolverConfig) -> Result<ModelParams, FitError> {
    check_len(&demo.poses, cfg)?;
    let base = initialize_base(id.base, &demo.poses)?;
    initialize_mode(id, &base, &demo.poses)
}

fn check_len(poses: &[PoseSample], cfg: &SolverConfig) -> Result<(), FitError> {
    if poses.len() < cfg.min_samples {
        return Err(FitError::TooFewSamples {
            needed: cfg.min_samples,
            got: poses.len(),
        });
    }
    Ok(())
}

/// Full fit of one model: the free base geometry is fitted first and seeds
/// the orientation-mode fit.
pub fn fit_model(id: ModelId, demo: &Demonstration, cfg: &SolverConfig) -> Result<FitResult, FitError> {
    check_len(&demo.poses, cfg)?;
    let free = ModelId::free(id.base);
    let init = initialize_base(id.base, &demo.poses)?;
    let base_fit = irls_fit(free, &demo.poses, &init, cfg)?;
    if id.mode == OrientationMode::Free {
        return Ok(base_fit);
    }
    fit_mode_from_base(id, demo, &base_fit, cfg)
}

/// Fits `id` starting from an already fitted free model of the same base.
pub fn fit_mode_from_base(
    id: ModelId,
    demo: &Demonstration,
    base_fit: &FitResult,
    cfg: &SolverConfig,
) -> Result<FitResult, FitError> {
    let init = initialize_mode(id, &base_fit.alpha, &demo.poses)?;
    irls_fit(id, &demo.poses, &init, cfg)
}

fn flat(id: ModelId, params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    params.validate(id)?;
    Ok(params.to_vector(id)?.iter().copied().collect())
}

pub fn project(
    id: ModelId,
    params: &ModelParams,
    p: &PoseSample,
    cfg: &SolverConfig,
) -> Result<ProjectedPose, ModelError> {
    Ok(project_raw(id, &flat(id, params)?, p, cfg))
}

pub fn solve_lagrange(
    id: ModelId,
    params: &ModelParams,
    p: &PoseSample,
    wrench: &WrenchSample,
    f_mu: &Vec3,
    n_mu: &Vec3,
    cfg: &SolverConfig,
) -> Result<LagrangeSolution, ModelError> {
    Ok(solve_lagrange_raw(id, &flat(id, params)?, p, wrench, f_mu, n_mu, cfg.c_n))
}
