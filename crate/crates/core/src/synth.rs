//! Synthetic demonstrations with known ground truth, and the classification
//! benchmark built on them.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, IngestionConfig};
use crate::error::SynthError;
use crate::friction::{RigConfig, TongSample};
use crate::geometry::{
    axis_angle, finite_diff_velocity, quat_exp, Demonstration, ExpCoords,
    PoseSample, Quat, Vec3, WrenchSample,
};
use crate::models::{
    eval_raw, AxialParams, BaseArticulation, ModelId, ModelParams, OrientationMode, PlanarParams,
    PrismaticParams, SlipAxisParams,
};
use crate::selection::analyze;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionProfile {
    Sinusoid,
    Ramp,
    RandomSmooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Position noise per axis, m.
    pub sigma_r: f64,
    /// Orientation noise per axis of a right perturbation, rad.
    pub sigma_q: f64,
    /// Force noise per axis (wrench and pad sensors), N.
    pub sigma_f: f64,
    /// Moment noise per axis, N m.
    pub sigma_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePreset {
    Zero,
    PaperLike,
    /// Paper-like noise on demonstrations with a tenth of the usual excursion.
    Stress,
}

impl NoisePreset {
    pub fn noise(&self) -> NoiseSpec {
        match self {
            NoisePreset::Zero => NoiseSpec::default(),
            NoisePreset::PaperLike | NoisePreset::Stress => NoiseSpec {
                sigma_r: 0.002,
                sigma_q: 0.01,
                sigma_f: 0.25,
                sigma_n: 0.02,
            },
        }
    }

    pub fn excursion(&self) -> f64 {
        match self {
            NoisePreset::Stress => 0.1,
            _ => 1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoisePreset::Zero => "zero",
            NoisePreset::PaperLike => "paper-like",
            NoisePreset::Stress => "stress",
        }
    }
}

impl std::str::FromStr for NoisePreset {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(NoisePreset::Zero),
            "paper-like" => Ok(NoisePreset::PaperLike),
            "stress" => Ok(NoisePreset::Stress),
            other => Err(SynthError::InvalidSpec(format!(
                "unknown noise preset `{other}` (expected zero, paper-like or stress)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GripSpec {
    /// Mean grip force, N.
    pub mean: f64,
    /// Amplitude of the grip-force variation, N.
    pub variation: f64,
}

impl Default for GripSpec {
    fn default() -> Self {
        Self {
            mean: 8.0,
            variation: 2.0,
        }
    }
}

/// Everything that defines one synthetic demonstration.
///
/// `alpha_true` fixes the constraint geometry (axis, center, radius, offset,
/// slip axis). Body-frame quantities follow from the randomly drawn initial
/// grasp orientation and are reported in [`GroundTruth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: ModelId,
    pub alpha_true: Option<ModelParams>,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub rate: f64,
    pub motion: MotionProfile,
    pub noise: NoiseSpec,
    pub grip: GripSpec,
    pub mu_true: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    /// Scale of the motion amplitudes; 1 gives the standard excitation.
    pub excursion: f64,
    pub rig: RigConfig,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            id: ModelId::new(BaseArticulation::Axial, OrientationMode::Free),
            alpha_true: None,
            duration: 5.0,
            rate: 100.0,
            motion: MotionProfile::Sinusoid,
            noise: NoiseSpec::default(),
            grip: GripSpec::default(),
            mu_true: 0.58,
            outlier_fraction: 0.0,
            seed: 0,
            excursion: 1.0,
            rig: RigConfig::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn new(id: ModelId, seed: u64) -> Self {
        Self {
            id,
            seed,
            ..Self::default()
        }
    }

    pub fn with_preset(mut self, preset: NoisePreset) -> Self {
        self.noise = preset.noise();
        self.excursion = preset.excursion();
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.rate >= 20.0) {
            return bad(format!("rate must be at least 20 Hz, got {}", self.rate));
        }
        if !(self.duration >= 2.0) {
            return bad(format!("duration must be at least 2 s, got {}", self.duration));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction must lie in [0, 1), got {}", self.outlier_fraction));
        }
        if !(self.mu_true >= 0.0) {
            return bad(format!("mu_true must be non-negative, got {}", self.mu_true));
        }
        if !(self.grip.mean > self.grip.variation.abs()) {
            return bad("grip mean must exceed its variation".into());
        }
        if !(self.excursion > 0.0) {
            return bad("excursion must be positive".into());
        }
        let n = self.noise;
        if [n.sigma_r, n.sigma_q, n.sigma_f, n.sigma_n].iter().any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be non-negative".into());
        }
        if let Some(a) = &self.alpha_true {
            if a.base() != self.id.base {
                return bad(format!("alpha_true does not describe a {} model", self.id.base.as_str()));
            }
        }
        self.rig.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }
}

/// The generating parameters of a synthetic demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: ModelId,
    pub alpha: ModelParams,
    pub mu_true: f64,
    /// Tangential-to-grip force ratio actually applied at the pads (mean).
    pub pad_ratio: f64,
    pub outliers: Vec<usize>,
    /// Noise-free poses.
    pub poses: Vec<PoseSample>,
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn rotation(rng: &mut ChaCha8Rng) -> Quat {
    let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    Quat::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

/// Smooth excitation signal in `[-1, 1]` for DOF channel `k`.
fn channel(profile: MotionProfile, rng: &mut ChaCha8Rng, times: &[f64], k: usize) -> Vec<f64> {
    let duration = times[times.len() - 1] - times[0];
    match profile {
        MotionProfile::Sinusoid => {
            let f = uniform(rng, 0.25, 0.6);
            let phase = uniform(rng, 0.0, 2.0 * PI);
            times.iter().map(|t| (2.0 * PI * f * t + phase).sin()).collect()
        }
        MotionProfile::Ramp => {
            let cycles = (k + 1) as f64;
            times
                .iter()
                .map(|t| -(PI * cycles * (t - times[0]) / duration).cos())
                .collect()
        }
        MotionProfile::RandomSmooth => {
            let terms: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (uniform(rng, 0.3, 1.0), uniform(rng, 0.15, 0.8), uniform(rng, 0.0, 2.0 * PI)))
                .collect();
            let raw: Vec<f64> = times
                .iter()
                .map(|t| terms.iter().map(|(a, f, p)| a * (2.0 * PI * f * t + p).sin()).sum())
                .collect();
            let top = raw.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-12);
            raw.iter().map(|x| x / top).collect()
        }
    }
}

/// Three-axis smooth orientation wander around `a0`.
fn free_orientation(
    profile: MotionProfile,
    rng: &mut ChaCha8Rng,
    times: &[f64],
    a0: Quat,
    scale: f64,
) -> Vec<Quat> {
    let amps: [f64; 3] = std::array::from_fn(|_| uniform(rng, 0.4, 0.7) * scale);
    let ch: Vec<Vec<f64>> = (0..3).map(|k| channel(profile, rng, times, k + 3)).collect();
    (0..times.len())
        .map(|i| quat_exp(&Vec3::new(amps[0] * ch[0][i], amps[1] * ch[1][i], amps[2] * ch[2][i])) * a0)
        .collect()
}

struct Kinematics {
    alpha: ModelParams,
    poses: Vec<PoseSample>,
}

fn canonical_axis(rng: &mut ChaCha8Rng, given: Option<ExpCoords>) -> ExpCoords {
    given.unwrap_or_else(|| ExpCoords::from_axis(&unit(rng)))
}

fn kinematics(spec: &ScenarioSpec, rng: &mut ChaCha8Rng, times: &[f64]) -> Kinematics {
    use OrientationMode::*;
    let id = spec.id;
    let scale = spec.excursion;
    let given = spec.alpha_true;
    let w = canonical_axis(rng, given.map(|a| a.w()));
    let n = w.axis();
    let frame = w.rotation();
    let (g1, g2) = (frame * Vec3::x(), frame * Vec3::y());
    let a0 = rotation(rng);
    let s1 = channel(spec.motion, rng, times, 0);
    let s2 = channel(spec.motion, rng, times, 1);
    let hand = channel(spec.motion, rng, times, 2);
    let hand_amp = uniform(rng, 0.5, 1.0) * scale;
    let len = times.len();
    let slip_about = |axis: Vec3| -> Vec<Quat> {
        (0..len).map(|i| axis_angle(&axis, hand_amp * hand[i]) * a0).collect()
    };
    let given_slip = given.and_then(|a| a.slip().map(|s| s.axis()));

    let (alpha, positions, orientations): (ModelParams, Vec<Vec3>, Vec<Quat>) = match id.base {
        BaseArticulation::Axial => {
            let (d, l) = match given {
                Some(ModelParams::Axial(p)) => (p.d, p.l),
                _ => (
                    Vec3::new(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5)),
                    uniform(rng, 0.2, 0.6),
                ),
            };
            let amp = uniform(rng, 0.5, 1.0) * scale;
            let theta0 = uniform(rng, -PI, PI);
            let theta: Vec<f64> = s1.iter().map(|s| theta0 + amp * s).collect();
            let positions: Vec<Vec3> = theta.iter().map(|t| d + l * (t.cos() * g1 + t.sin() * g2)).collect();
            let mut p = AxialParams {
                w,
                d,
                l_bar: Vec3::x(),
                t_bar: Vec3::y(),
                l,
                slip: None,
            };
            let orientations = match id.mode {
                Rigid => {
                    let r0 = positions[0];
                    let m0 = a0.inverse();
                    p.l_bar = m0 * (d - r0);
                    p.t_bar = m0 * (n.cross(&(d - r0)) / l);
                    theta.iter().map(|t| axis_angle(&n, t - theta[0]) * a0).collect()
                }
                Slip => {
                    let axis = given_slip.unwrap_or(n);
                    p.slip = Some(SlipAxisParams::from_axis(&axis, &(a0.inverse() * axis)));
                    slip_about(axis)
                }
                Free => free_orientation(spec.motion, rng, times, a0, scale),
            };
            (ModelParams::Axial(p), positions, orientations)
        }
        BaseArticulation::Prismatic => {
            let d = match given {
                Some(ModelParams::Prismatic(p)) => p.d,
                _ => Vec3::new(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5)),
            };
            let amp = uniform(rng, 0.1, 0.2) * scale;
            let positions: Vec<Vec3> = s1.iter().map(|s| d + n * (amp * s)).collect();
            let mut p = PrismaticParams {
                w,
                d,
                r_lock: Quat::identity(),
                slip: None,
            };
            let orientations = match id.mode {
                Rigid => {
                    p.r_lock = a0;
                    vec![a0; len]
                }
                Slip => {
                    let axis = given_slip.unwrap_or_else(|| unit(rng));
                    p.slip = Some(SlipAxisParams::from_axis(&axis, &(a0.inverse() * axis)));
                    slip_about(axis)
                }
                Free => free_orientation(spec.motion, rng, times, a0, scale),
            };
            (ModelParams::Prismatic(p), positions, orientations)
        }
        BaseArticulation::Planar => {
            let d_z = match given {
                Some(ModelParams::Planar(p)) => p.d_z,
                _ => uniform(rng, -0.5, 0.5),
            };
            let p0 = Vec3::new(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5));
            let c0 = p0 - n * n.dot(&p0) + n * d_z;
            let (ax, ay) = (uniform(rng, 0.1, 0.2) * scale, uniform(rng, 0.1, 0.2) * scale);
            let positions: Vec<Vec3> = (0..len).map(|i| c0 + g1 * (ax * s1[i]) + g2 * (ay * s2[i])).collect();
            let z_bar = a0.inverse() * n;
            let mut p = PlanarParams {
                w,
                d_z,
                z_bar,
                slip: None,
            };
            let orientations = match id.mode {
                Rigid => slip_about(n),
                Slip => {
                    p.slip = Some(SlipAxisParams { u: g1, v: g2, s_bar: z_bar });
                    slip_about(n)
                }
                Free => {
                    p.z_bar = Vec3::z();
                    free_orientation(spec.motion, rng, times, a0, scale)
                }
            };
            (ModelParams::Planar(p), positions, orientations)
        }
    };
    let poses = (0..len)
        .map(|i| PoseSample {
            t: times[i],
            r: positions[i],
            q: orientations[i],
        })
        .collect();
    Kinematics { alpha, poses }
}

/// Reaction wrench from multipliers with no component along the motion, so
/// that everything along the motion is friction.
fn reactions(
    id: ModelId,
    alpha: &[f64],
    poses: &[PoseSample],
    velocities: &[(Vec3, Vec3)],
    rng: &mut ChaCha8Rng,
    times: &[f64],
    profile: MotionProfile,
) -> Vec<(Vec3, Vec3)> {
    let m = id.n_equations();
    let base_level: Vec<f64> = (0..m).map(|_| uniform(rng, -1.0, 1.0)).collect();
    let swing: Vec<Vec<f64>> = (0..m).map(|k| channel(profile, rng, times, 10 + k)).collect();
    poses
        .iter()
        .zip(velocities)
        .enumerate()
        .map(|(i, (p, (v, omega)))| {
            let e = eval_raw(id, alpha, p);
            let jr_t = e.j_r.transpose();
            let jpi_t = e.j_pi_world(&p.q).transpose();
            let mut lambda = DVector::from_iterator(m, (0..m).map(|k| base_level[k] + 0.6 * swing[k][i]));
            // Twist restricted to the exact constraint tangent, so reactions
            // have no component along the motion.
            let j = nalgebra::DMatrix::from_fn(m, 6, |r, c| if c < 3 { e.j_r[(r, c)] } else { jpi_t[(c - 3, r)] });
            let x = DVector::from_iterator(6, v.iter().chain(omega.iter()).copied());
            let x = match (&j * j.transpose()).pseudo_inverse(1e-12) {
                Ok(inv) => &x - j.transpose() * (inv * (&j * &x)),
                Err(_) => x,
            };
            let v_t = Vec3::new(x[0], x[1], x[2]);
            let omega_t = Vec3::new(x[3], x[4], x[5]);
            let scale = jr_t.norm().max(jpi_t.norm()).max(1.0);
            let mut rows = Vec::new();
            for (dir, jt) in [(v_t, &jr_t), (omega_t, &jpi_t)] {
                if dir.norm() > 1e-9 {
                    let row = (dir.normalize().transpose() * jt).transpose();
                    if row.norm() > 1e-6 * scale {
                        rows.push(row);
                    }
                }
            }
            if !rows.is_empty() {
                let b = nalgebra::DMatrix::from_columns(&rows).transpose();
                let bbt = &b * b.transpose();
                if let Ok(inv) = bbt.pseudo_inverse(1e-12) {
                    lambda -= b.transpose() * (inv * (&b * &lambda));
                }
            }
            let f = &jr_t * &lambda;
            let nm = &jpi_t * &lambda;
            (Vec3::new(f[0], f[1], f[2]), Vec3::new(nm[0], nm[1], nm[2]))
        })
        .collect()
}

fn normalize_reactions(raw: Vec<(Vec3, Vec3)>, target: f64) -> Vec<(Vec3, Vec3)> {
    let mean = raw.iter().map(|(f, n)| (f.norm_squared() + n.norm_squared()).sqrt()).sum::<f64>() / raw.len() as f64;
    if mean < 1e-12 {
        return raw;
    }
    raw.into_iter().map(|(f, n)| (f * (target / mean), n * (target / mean))).collect()
}

fn pad_forces(
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
    times: &[f64],
) -> (Vec<(f64, f64, f64)>, f64) {
    let grip_ch = channel(spec.motion, rng, times, 20);
    let load_ch = channel(spec.motion, rng, times, 21);
    let ratio_ch = channel(spec.motion, rng, times, 22);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (ratio, wobble) = match spec.id.mode {
        OrientationMode::Slip => (spec.mu_true, 0.0),
        OrientationMode::Rigid => (uniform(rng, 0.0, 0.8 * spec.mu_true), 0.05),
        OrientationMode::Free => (uniform(rng, 0.0, 0.05), 0.0),
    };
    let cap = match spec.id.mode {
        OrientationMode::Rigid => 0.8 * spec.mu_true,
        OrientationMode::Free => 0.05,
        OrientationMode::Slip => spec.mu_true,
    };
    let load_amp = uniform(rng, 0.0, 3.0);
    let forces = (0..times.len())
        .map(|i| {
            let g = spec.grip.mean + spec.grip.variation * grip_ch[i];
            let r = (ratio * (1.0 + wobble * ratio_ch[i])).clamp(0.0, cap);
            (g, sign * r * g, load_amp * load_ch[i])
        })
        .collect();
    (forces, ratio)
}

fn tong_samples(rig: &RigConfig, times: &[f64], pads: &[(f64, f64, f64)]) -> Vec<TongSample> {
    let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
    let (lf, lg, rf, rg) = (v(rig.x_lf), v(rig.x_lg), v(rig.x_rf), v(rig.x_rg));
    let shared_dir = lg.cross(&lf);
    let shared_dir = if shared_dir.dot(&rf).abs() < 1e-9 && shared_dir.dot(&rg).abs() < 1e-9 {
        shared_dir
    } else {
        Vec3::zeros()
    };
    times
        .iter()
        .zip(pads)
        .map(|(t, (g, f, load))| {
            let shared = shared_dir * *load;
            let left = lg * *g + lf * *f + shared;
            let right = -rg * *g - rf * *f + shared;
            rig.sample(*t, left, right)
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("non-negative sigma");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Generates one demonstration and its ground truth. Deterministic in the seed.
pub fn generate(spec: &ScenarioSpec) -> Result<(Demonstration, GroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.duration * spec.rate).round() as usize;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / spec.rate).collect();

    let Kinematics { alpha, poses } = kinematics(spec, &mut rng, &times);
    let flat: Vec<f64> = alpha.to_vector(spec.id)?.iter().copied().collect();
    let window = IngestionConfig::default().smoothing_window;
    let velocities = finite_diff_velocity(&poses, window)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;

    let raw = reactions(spec.id, &flat, &poses, &velocities, &mut rng, &times, spec.motion);
    let target = uniform(&mut rng, 4.0, 10.0);
    let reaction = normalize_reactions(raw, target);
    let drag = uniform(&mut rng, 0.5, 2.0);
    let torque_drag = uniform(&mut rng, 0.02, 0.1);
    let em = crate::evidence::ErrorModelConfig::default();

    let wrenches: Vec<WrenchSample> = reaction
        .iter()
        .zip(&velocities)
        .zip(&times)
        .map(|(((f, m), (v, omega)), t)| {
            let mut f = *f;
            let mut m = *m;
            if v.norm() > em.v_min {
                f -= v.normalize() * drag;
            }
            if omega.norm() > em.omega_min {
                m -= omega.normalize() * torque_drag;
            }
            WrenchSample { t: *t, f, n: m }
        })
        .collect();

    let (pads, pad_ratio) = pad_forces(spec, &mut rng, &times);
    let tong = tong_samples(&spec.rig, &times, &pads);

    let noise = spec.noise;
    let mut demo = Demonstration {
        poses: poses.clone(),
        wrenches,
        tong: Some(tong),
    };
    for i in 0..n {
        let p = &mut demo.poses[i];
        p.r += gauss(&mut rng, noise.sigma_r);
        p.q *= quat_exp(&gauss(&mut rng, noise.sigma_q));
        let w = &mut demo.wrenches[i];
        w.f += gauss(&mut rng, noise.sigma_f);
        w.n += gauss(&mut rng, noise.sigma_n);
    }
    if let Some(tong) = demo.tong.as_mut() {
        for s in tong.iter_mut() {
            s.f_l += gauss(&mut rng, noise.sigma_f);
            s.f_r += gauss(&mut rng, noise.sigma_f);
        }
    }

    let n_out = (spec.outlier_fraction * n as f64).round() as usize;
    let mut outliers = rand::seq::index::sample(&mut rng, n, n_out).into_vec();
    outliers.sort_unstable();
    if n_out > 0 {
        let centroid = poses.iter().fold(Vec3::zeros(), |a, p| a + p.r) / n as f64;
        for &i in &outliers {
            demo.poses[i].r = centroid
                + Vec3::new(uniform(&mut rng, -0.25, 0.25), uniform(&mut rng, -0.25, 0.25), uniform(&mut rng, -0.25, 0.25));
        }
    }

    Ok((
        demo,
        GroundTruth {
            id: spec.id,
            alpha,
            mu_true: spec.mu_true,
            pad_ratio,
            outliers,
            poses,
        },
    ))
}

/// Errors of a fitted geometry against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricError {
    /// Angle between axes (lines and normals are unsigned), rad.
    pub axis_angle: f64,
    /// Center distance (axial), distance of the true point from the fitted
    /// line (prismatic) or plane-offset difference (planar), m.
    pub offset: f64,
    pub radius: Option<f64>,
    pub slip_axis_angle: Option<f64>,
}

fn unsigned_angle(a: &Vec3, b: &Vec3) -> f64 {
    let ang = a.cross(b).norm().atan2(a.dot(b));
    ang.min(PI - ang)
}

pub fn geometric_error(truth: &ModelParams, fit: &ModelParams) -> Option<GeometricError> {
    let axis_angle = unsigned_angle(&truth.axis(), &fit.axis());
    let slip_axis_angle = match (truth.slip(), fit.slip()) {
        (Some(a), Some(b)) => Some(unsigned_angle(&a.axis(), &b.axis())),
        _ => None,
    };
    let (offset, radius) = match (truth, fit) {
        (ModelParams::Axial(t), ModelParams::Axial(f)) => ((t.d - f.d).norm(), Some((t.l - f.l).abs())),
        (ModelParams::Prismatic(t), ModelParams::Prismatic(f)) => {
            let dir = f.w.axis();
            let rel = t.d - f.d;
            ((rel - dir * dir.dot(&rel)).norm(), None)
        }
        (ModelParams::Planar(t), ModelParams::Planar(f)) => {
            let sign = t.w.axis().dot(&f.w.axis()).signum();
            ((t.d_z - sign * f.d_z).abs(), None)
        }
        _ => return None,
    };
    Some(GeometricError {
        axis_angle,
        offset,
        radius,
        slip_axis_angle,
    })
}

/// Outcome of one benchmark demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub truth: ModelId,
    pub seed: u64,
    /// Hierarchical selection with kinetic evidence.
    pub predicted: Option<ModelId>,
    /// Hierarchical selection from residuals alone.
    pub hierarchical: Option<ModelId>,
    /// Flat selection over all nine models.
    pub flat: Option<ModelId>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub base: f64,
    /// Overall accuracy counting planar rigid/slip confusions as correct.
    pub overall_excluding_planar_degeneracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub preset: NoisePreset,
    pub n_per_model: usize,
    pub labels: Vec<ModelId>,
    /// Rows are true models, columns predicted, in `labels` order.
    pub confusion: Vec<Vec<usize>>,
    /// Demonstrations the pipeline could not classify, per true model.
    pub unclassified: Vec<usize>,
    pub full: Accuracy,
    pub hierarchical: Accuracy,
    pub flat: Accuracy,
    /// Fraction of slip demonstrations assigned exactly their own model.
    pub slip_true_positive_rate: f64,
    pub cases: Vec<BenchmarkCase>,
}

fn accuracy(cases: &[BenchmarkCase], pick: impl Fn(&BenchmarkCase) -> Option<ModelId>) -> Accuracy {
    let n = cases.len().max(1) as f64;
    let mut overall = 0usize;
    let mut base = 0usize;
    let mut relaxed = 0usize;
    for c in cases {
        let Some(p) = pick(c) else { continue };
        overall += usize::from(p == c.truth);
        base += usize::from(p.base == c.truth.base);
        let planar_pair = p.base == BaseArticulation::Planar
            && c.truth.base == BaseArticulation::Planar
            && p.mode != OrientationMode::Free
            && c.truth.mode != OrientationMode::Free;
        relaxed += usize::from(p == c.truth || planar_pair);
    }
    Accuracy {
        overall: overall as f64 / n,
        base: base as f64 / n,
        overall_excluding_planar_degeneracy: relaxed as f64 / n,
    }
}

pub fn benchmark_seed(id: ModelId, i: usize) -> u64 {
    0x5eed_0000 + (id.index() as u64) * 100_003 + i as u64
}

/// Classifies `n_per_model` random demonstrations of every model and
/// tallies the confusion matrix plus the two ablations.
pub fn benchmark(n_per_model: usize, preset: NoisePreset, cfg: &Config) -> Result<BenchmarkReport, SynthError> {
    if n_per_model == 0 {
        return Err(SynthError::InvalidSpec("n_per_model must be at least 1".into()));
    }
    let jobs: Vec<(ModelId, u64)> = ModelId::all()
        .flat_map(|id| (0..n_per_model).map(move |i| (id, benchmark_seed(id, i))))
        .collect();
    let cases: Vec<BenchmarkCase> = jobs
        .par_iter()
        .map(|&(id, seed)| {
            let spec = ScenarioSpec::new(id, seed).with_preset(preset);
            let mut case = BenchmarkCase {
                truth: id,
                seed,
                predicted: None,
                hierarchical: None,
                flat: None,
                error: None,
            };
            match generate(&spec) {
                Err(e) => case.error = Some(e.to_string()),
                Ok((demo, _)) => match analyze(&demo, cfg, true) {
                    Err(e) => case.error = Some(e.to_string()),
                    Ok(a) => {
                        case.predicted = Some(a.decide(true).0);
                        case.hierarchical = Some(a.decide(false).0);
                        case.flat = a.decide_flat();
                    }
                },
            }
            case
        })
        .collect();

    let labels: Vec<ModelId> = ModelId::all().collect();
    let mut confusion = vec![vec![0usize; 9]; 9];
    let mut unclassified = vec![0usize; 9];
    for c in &cases {
        match c.predicted {
            Some(p) => confusion[c.truth.index()][p.index()] += 1,
            None => unclassified[c.truth.index()] += 1,
        }
    }
    let slip: Vec<&BenchmarkCase> = cases.iter().filter(|c| c.truth.mode == OrientationMode::Slip).collect();
    let slip_tp = slip
        .iter()
        .filter(|c| c.predicted == Some(c.truth))
        .count();
    Ok(BenchmarkReport {
        preset,
        n_per_model,
        labels,
        full: accuracy(&cases, |c| c.predicted),
        hierarchical: accuracy(&cases, |c| c.hierarchical),
        flat: accuracy(&cases, |c| c.flat),
        slip_true_positive_rate: slip_tp as f64 / slip.len().max(1) as f64,
        confusion,
        unclassified,
        cases,
    })
}

impl BenchmarkReport {
    /// Confusion matrix as CSV: a header of predicted labels, one row per
    /// true label, and a trailing unclassified column.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth");
        for l in &self.labels {
            out.push(',');
            out.push_str(&l.to_string());
        }
        out.push_str(",unclassified\n");
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in &self.confusion[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.unclassified[i]));
        }
        out
    }
}
