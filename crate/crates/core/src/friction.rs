//! Grip and friction forces from a two-pad parallel gripper, the sliding
//! friction coefficient series, and the kinetic posterior over grasp modes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::FrictionError;
use crate::geometry::Vec3;
use crate::selection::ModePosterior;

/// Values outside `[0, CLAMP_FACTOR * mu_bar]` are clamped before weighting.
pub const CLAMP_FACTOR: f64 = 1.5;

/// One reading of the two pad force sensors, with the friction (`f`) and
/// grip (`g`) directions of each pad in its own sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TongSample {
    pub t: f64,
    pub f_l: Vec3,
    pub f_r: Vec3,
    pub x_lf: Vec3,
    pub x_lg: Vec3,
    pub x_rf: Vec3,
    pub x_rg: Vec3,
}

/// Pad direction vectors of the gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub x_lf: [f64; 3],
    pub x_lg: [f64; 3],
    pub x_rf: [f64; 3],
    pub x_rg: [f64; 3],
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            x_lf: [1.0, 0.0, 0.0],
            x_lg: [0.0, 0.0, 1.0],
            x_rf: [1.0, 0.0, 0.0],
            x_rg: [0.0, 0.0, 1.0],
        }
    }
}

impl RigConfig {
    pub fn sample(&self, t: f64, f_l: Vec3, f_r: Vec3) -> TongSample {
        TongSample {
            t,
            f_l,
            f_r,
            x_lf: Vec3::from(self.x_lf),
            x_lg: Vec3::from(self.x_lg),
            x_rf: Vec3::from(self.x_rf),
            x_rg: Vec3::from(self.x_rg),
        }
    }

    pub fn validate(&self) -> Result<(), FrictionError> {
        let pairs = [("left", self.x_lf, self.x_lg), ("right", self.x_rf, self.x_rg)];
        for (side, f, g) in pairs {
            let (f, g) = (Vec3::from(f), Vec3::from(g));
            if (f.norm() - 1.0).abs() > 1e-6 || (g.norm() - 1.0).abs() > 1e-6 {
                return Err(FrictionError::InvalidConfig(format!(
                    "{side} pad directions must be unit vectors"
                )));
            }
            if f.dot(&g).abs() > 1e-6 {
                return Err(FrictionError::InvalidConfig(format!(
                    "{side} pad friction and grip directions must be orthogonal"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrictionPriorConfig {
    /// Expected sliding friction coefficient.
    pub mu_bar: f64,
    /// Spread of both half-normals; `mu_bar / 6` when unset.
    pub sigma: Option<f64>,
    pub p_slip: f64,
    pub p_free: f64,
    pub p_rigid: f64,
    /// Minimum grip force (N) for a usable coefficient estimate.
    pub g_min: f64,
}

impl Default for FrictionPriorConfig {
    fn default() -> Self {
        Self {
            mu_bar: 0.58,
            sigma: None,
            p_slip: 1.0,
            p_free: 1.0,
            p_rigid: 0.625,
            g_min: 1.0,
        }
    }
}

impl FrictionPriorConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.mu_bar / 6.0)
    }

    pub fn validate(&self) -> Result<(), FrictionError> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !ok(self.mu_bar) || !ok(self.sigma()) {
            return Err(FrictionError::InvalidConfig("mu_bar and sigma must be > 0".into()));
        }
        if !ok(self.p_slip) || !ok(self.p_free) || !ok(self.p_rigid) {
            return Err(FrictionError::InvalidConfig("priors must be > 0".into()));
        }
        if !(self.g_min >= 0.0) {
            return Err(FrictionError::InvalidConfig("g_min must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionSeries {
    pub f_f: Vec<f64>,
    pub f_g: Vec<f64>,
    /// `F_f / F_g`; `NaN` where the sample is invalid.
    pub mu_hat: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FrictionSeries {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_mu(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu_hat
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(m, _)| *m)
    }
}

/// Internal (mutually canceling) part of a pair of pad force components.
pub fn canceling_component(a: f64, b: f64) -> f64 {
    0.5 * (a.abs() + b.abs() - (a + b).abs())
}

/// Friction and grip magnitudes `(F_f, F_g)` of one tong sample.
pub fn decompose(s: &TongSample) -> (f64, f64) {
    let f = canceling_component(s.f_l.dot(&s.x_lf), s.f_r.dot(&s.x_rf));
    let g = canceling_component(s.f_l.dot(&s.x_lg), s.f_r.dot(&s.x_rg));
    (f, g)
}

pub fn mu_series(
    tong: &[TongSample],
    cfg: &FrictionPriorConfig,
) -> Result<FrictionSeries, FrictionError> {
    let n = tong.len();
    let mut series = FrictionSeries {
        f_f: Vec::with_capacity(n),
        f_g: Vec::with_capacity(n),
        mu_hat: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for s in tong {
        let (f, g) = decompose(s);
        let ok = g > cfg.g_min;
        series.f_f.push(f);
        series.f_g.push(g);
        series.mu_hat.push(if ok { f / g } else { f64::NAN });
        series.valid.push(ok);
    }
    if series.n_valid() == 0 {
        return Err(FrictionError::NoValidGrip { g_min: cfg.g_min });
    }
    Ok(series)
}

/// Result of the kinetic weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticEvidence {
    pub posterior: ModePosterior,
    pub n_valid: usize,
    /// Estimates clamped into `[0, 1.5 mu_bar]` before weighting.
    pub n_clamped: usize,
}

fn gaussian(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Half-normal evidence that a coefficient estimate reflects a slipping grasp:
/// peaks at `mu_bar` and decays only toward smaller values.
pub fn slip_density(mu: f64, cfg: &FrictionPriorConfig) -> f64 {
    2.0 * gaussian(mu.min(cfg.mu_bar), cfg.mu_bar, cfg.sigma())
}

/// Half-normal evidence for a free (frictionless) grasp, peaking at zero.
pub fn free_density(mu: f64, cfg: &FrictionPriorConfig) -> f64 {
    2.0 * gaussian(mu.max(0.0), 0.0, cfg.sigma())
}

/// Uniform evidence for a rigid grasp.
pub fn rigid_density(_mu: f64, _cfg: &FrictionPriorConfig) -> f64 {
    1.0
}

pub fn kinetic_posterior(
    series: &FrictionSeries,
    cfg: &FrictionPriorConfig,
) -> Result<KineticEvidence, FrictionError> {
    let hi = CLAMP_FACTOR * cfg.mu_bar;
    let (mut slip, mut rigid, mut free) = (0.0, 0.0, 0.0);
    let (mut n_valid, mut n_clamped) = (0, 0);
    for mu in series.valid_mu() {
        n_valid += 1;
        let m = if !(0.0..=hi).contains(&mu) {
            n_clamped += 1;
            mu.clamp(0.0, hi)
        } else {
            mu
        };
        slip += slip_density(m, cfg);
        rigid += rigid_density(m, cfg);
        free += free_density(m, cfg);
    }
    if n_valid == 0 {
        return Err(FrictionError::NoValidGrip { g_min: cfg.g_min });
    }
    let posterior = ModePosterior {
        rigid: rigid * cfg.p_rigid,
        slip: slip * cfg.p_slip,
        free: free * cfg.p_free,
    }
    .normalized();
    Ok(KineticEvidence {
        posterior,
        n_valid,
        n_clamped,
    })
}
