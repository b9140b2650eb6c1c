//! Robust parameter fit: reweighting loop around a damped Gauss–Newton solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::FitError;
use crate::fitting::SolverConfig;
use crate::geometry::PoseSample;
use crate::models::{eval_raw, normalize_vector, penalties, residual_raw, ModelId, ModelParams};

/// Outcome of [`irls_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub id: ModelId,
    pub alpha: ModelParams,
    /// Final robust weights, scaled so the largest is 1.
    pub weights: Vec<f64>,
    /// Robust objective at the returned parameters.
    pub objective: f64,
    /// Robust objective at the initial parameters.
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every outer iteration.
    pub history: Vec<f64>,
}

/// Smoothed absolute value: `e` above `eps`, quadratic below. This is the
/// loss the inverse-residual reweighting majorizes.
fn robust_loss(e: f64, eps: f64) -> f64 {
    if e >= eps {
        e
    } else {
        0.5 * (e * e / eps + eps)
    }
}

fn penalty_cost(id: ModelId, alpha: &[f64], weight: f64) -> f64 {
    0.5 * weight * penalties(id, alpha).iter().map(|p| p.value * p.value).sum::<f64>()
}

/// `sum rho(|phi_i|) + penalties`, the quantity reported as the objective.
pub fn robust_objective(id: ModelId, alpha: &[f64], poses: &[PoseSample], cfg: &SolverConfig) -> f64 {
    let data: f64 = poses
        .iter()
        .map(|p| robust_loss(residual_raw(id, alpha, p).norm(), cfg.eps_w))
        .sum();
    data + penalty_cost(id, alpha, cfg.penalty_weight)
}

fn weighted_cost(id: ModelId, alpha: &[f64], poses: &[PoseSample], w: &[f64], pen: f64) -> f64 {
    let data: f64 = poses
        .iter()
        .zip(w)
        .map(|(p, wi)| wi * residual_raw(id, alpha, p).norm_squared())
        .sum();
    0.5 * data + penalty_cost(id, alpha, pen)
}

fn normal_equations(
    id: ModelId,
    alpha: &[f64],
    poses: &[PoseSample],
    w: &[f64],
    pen: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = alpha.len();
    let mut h = DMatrix::zeros(k, k);
    let mut g = DVector::zeros(k);
    for (p, wi) in poses.iter().zip(w) {
        let e = eval_raw(id, alpha, p);
        let jt = e.j_alpha.transpose();
        h += *wi * &jt * &e.j_alpha;
        g += *wi * jt * &e.phi;
    }
    for pe in penalties(id, alpha) {
        for &(i, gi) in &pe.grad {
            g[i] += pen * pe.value * gi;
            for &(j, gj) in &pe.grad {
                h[(i, j)] += pen * gi * gj;
            }
        }
    }
    (h, g)
}

/// Levenberg–Marquardt with diagonal (Marquardt) scaling on the weighted
/// least-squares cost. Returns the new iterate and whether it stalled on
/// damping rather than converging.
fn damped_solve(
    id: ModelId,
    x0: &[f64],
    poses: &[PoseSample],
    w: &[f64],
    cfg: &SolverConfig,
) -> (Vec<f64>, bool) {
    let pen = cfg.penalty_weight;
    let mut x = x0.to_vec();
    let mut cost = weighted_cost(id, &x, poses, w, pen);
    let (mut h, mut g) = normal_equations(id, &x, poses, w, pen);
    let max_diag = h.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut mu = 1e-4;
    let mut stalled = false;
    for _ in 0..cfg.max_inner {
        let mut a = h.clone();
        for i in 0..x.len() {
            a[(i, i)] += mu * h[(i, i)].max(1e-9 * max_diag);
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                mu *= 10.0;
                if mu > 1e12 {
                    stalled = true;
                    break;
                }
                continue;
            }
        };
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let trial_cost = weighted_cost(id, &trial, poses, w, pen);
        if trial_cost.is_finite() && trial_cost <= cost {
            let rel = (cost - trial_cost) / cost.max(1e-300);
            let small_step = step.norm() <= 1e-12 * (1.0 + DVector::from_row_slice(&x).norm());
            x = trial;
            cost = trial_cost;
            mu = (mu / 3.0).max(1e-12);
            if rel < 1e-6 || small_step || cost < 1e-30 {
                break;
            }
            (h, g) = normal_equations(id, &x, poses, w, pen);
        } else {
            mu *= 4.0;
            if mu > 1e12 {
                stalled = true;
                break;
            }
        }
    }
    (x, stalled)
}

fn update_weights(id: ModelId, alpha: &[f64], poses: &[PoseSample], eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = poses
        .iter()
        .map(|p| 1.0 / residual_raw(id, alpha, p).norm().max(eps))
        .collect();
    let top = raw.iter().cloned().fold(0.0, f64::max);
    raw.iter().map(|w| w / top).collect()
}

/// Robust fit of model `id` to the poses of a demonstration.
///
/// Outer loop: weights `1 / max(|phi_i|, eps_w)`; inner loop: damped
/// Gauss–Newton on the weighted squares plus coupling penalties. Stops when
/// the relative objective change drops below `outer_tol` or after
/// `max_outer` iterations. Non-convergence is reported, not raised.
pub fn irls_fit(
    id: ModelId,
    poses: &[PoseSample],
    init: &ModelParams,
    cfg: &SolverConfig,
) -> Result<FitResult, FitError> {
    if poses.len() < cfg.min_samples {
        return Err(FitError::TooFewSamples {
            needed: cfg.min_samples,
            got: poses.len(),
        });
    }
    let mut x: Vec<f64> = init.to_vector(id)?.iter().copied().collect();
    let initial_objective = robust_objective(id, &x, poses, cfg);
    let mut weights = update_weights(id, &x, poses, cfg.eps_w);
    let mut objective = initial_objective;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let floor = 1e-13 * poses.len() as f64;

    while iterations < cfg.max_outer {
        iterations += 1;
        let (mut next, stalled) = damped_solve(id, &x, poses, &weights, cfg);
        normalize_vector(id, &mut next);
        let next_obj = robust_objective(id, &next, poses, cfg);
        // Majorize–minimize never increases the objective; guard against
        // the normalization step or a stalled solve doing so anyway.
        if next_obj.is_finite() && next_obj <= objective * (1.0 + 1e-9) + 1e-15 {
            x = next;
        } else if stalled {
            history.push(objective);
            break;
        }
        let new_obj = robust_objective(id, &x, poses, cfg);
        history.push(new_obj);
        let change = (objective - new_obj).abs() / objective.max(1e-300);
        objective = new_obj;
        weights = update_weights(id, &x, poses, cfg.eps_w);
        if change < cfg.outer_tol || objective < floor {
            converged = true;
            break;
        }
    }

    let alpha = init.with_vector(id, &x)?;
    Ok(FitResult {
        id,
        alpha,
        weights,
        objective,
        initial_objective,
        iterations,
        converged,
        history,
    })
}
