use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;
use slipfit::fitting::{fit_model, project, solve_lagrange};
use slipfit::geometry::{axis_angle, quat_angle, quat_exp};
use slipfit::models::phi;
use slipfit::selection::{analyze, select_base};
use slipfit::synth::generate;
use slipfit::{
    io, Analysis, BaseArticulation, Config, Demonstration, ModelId, ModelParams, ModePosterior,
    NoisePreset, OrientationMode, PoseSample, Quat, ScenarioSpec, Vec3, WrenchSample,
};

fn demo(id: ModelId, seed: u64, preset: NoisePreset) -> Demonstration {
    generate(&ScenarioSpec::new(id, seed).with_preset(preset)).unwrap().0
}

fn analysis() -> &'static Analysis {
    static A: OnceLock<Analysis> = OnceLock::new();
    A.get_or_init(|| {
        let id = ModelId::new(BaseArticulation::Axial, OrientationMode::Slip);
        analyze(&demo(id, 17, NoisePreset::PaperLike), &Config::default(), true).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mode_evidence_never_flips_the_base(
        orient in prop::collection::vec((0usize..600, 0usize..600), 9),
        kinetic in prop::array::uniform3(0.0f64..1.0),
        use_kinetic: bool,
    ) {
        let mut a = analysis().clone();
        let base = select_base(&a.base_scores).unwrap().base;
        for (entry, (n_q, n_n)) in a.entries.iter_mut().zip(orient) {
            if let Some(Ok(ev)) = entry {
                ev.counts.n_q = n_q;
                ev.counts.n_n = n_n;
            }
        }
        if let Some(k) = a.kinetic.as_mut() {
            k.posterior = ModePosterior::from_array(kinetic);
        }
        prop_assert_eq!(a.decide(use_kinetic).0.base, base);
    }
}

struct Rigid {
    rot: Quat,
    t: Vec3,
}

impl Rigid {
    fn point(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.t
    }

    fn demo(&self, d: &Demonstration) -> Demonstration {
        Demonstration {
            poses: d
                .poses
                .iter()
                .map(|p| PoseSample { t: p.t, r: self.point(&p.r), q: self.rot * p.q })
                .collect(),
            wrenches: d
                .wrenches
                .iter()
                .map(|w| WrenchSample { t: w.t, f: self.rot * w.f, n: self.rot * w.n })
                .collect(),
            tong: None,
        }
    }
}

fn unsigned_angle(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.normalize().dot(&b.normalize()).abs().min(1.0);
    c.acos()
}

/// Center, a point on the line, or the foot of the plane on the origin.
fn anchor(p: &ModelParams) -> Vec3 {
    match p {
        ModelParams::Axial(a) => a.d,
        ModelParams::Prismatic(a) => a.d,
        ModelParams::Planar(a) => p.axis() * a.d_z,
    }
}

fn anchor_error(fit: &ModelParams, expected_anchor: &Vec3, axis: &Vec3) -> f64 {
    let diff = anchor(fit) - expected_anchor;
    match fit {
        ModelParams::Axial(_) => diff.norm(),
        ModelParams::Prismatic(_) => (diff - axis * axis.dot(&diff)).norm(),
        ModelParams::Planar(_) => axis.dot(&diff).abs(),
    }
}

#[test]
fn fits_are_equivariant_under_rigid_transforms() {
    let cfg = Config::default();
    let moves = [
        Rigid { rot: axis_angle(&Vec3::new(1.0, 2.0, -0.5), 0.9), t: Vec3::new(0.3, -1.2, 2.0) },
        Rigid { rot: axis_angle(&Vec3::new(0.0, 0.0, 1.0), 2.5), t: Vec3::new(-2.0, 0.1, 0.4) },
    ];
    for id in ModelId::all() {
        let d = demo(id, 40 + id.index() as u64, NoisePreset::Zero);
        let reference = fit_model(id, &d, &cfg.solver).unwrap().alpha;
        for m in &moves {
            let fit = fit_model(id, &m.demo(&d), &cfg.solver).unwrap().alpha;
            let axis = m.rot * reference.axis();
            let axis_err = unsigned_angle(&fit.axis(), &axis);
            let anchor_err = anchor_error(&fit, &m.point(&anchor(&reference)), &fit.axis());
            assert!(axis_err < 1e-6, "{id}: axis off by {axis_err}");
            assert!(anchor_err < 1e-6, "{id}: anchor off by {anchor_err}");
            if let (Some(a), Some(b)) = (reference.slip(), fit.slip()) {
                let e = unsigned_angle(&b.axis(), &(m.rot * a.axis()));
                assert!(e < 1e-6, "{id}: slip axis off by {e}");
            }
        }
    }
}

#[test]
fn fitted_objective_never_exceeds_initial() {
    let cfg = Config::default();
    for id in ModelId::all() {
        for seed in 0..3 {
            let r = fit_model(id, &demo(id, 900 + seed, NoisePreset::PaperLike), &cfg.solver).unwrap();
            assert!(
                r.objective <= r.initial_objective * (1.0 + 1e-12),
                "{id} seed {seed}: {} > {}",
                r.objective,
                r.initial_objective
            );
        }
    }
}

fn fitted(id: ModelId) -> ModelParams {
    static FITS: OnceLock<Vec<ModelParams>> = OnceLock::new();
    FITS.get_or_init(|| {
        ModelId::all()
            .map(|m| fit_model(m, &demo(m, 77, NoisePreset::PaperLike), &Config::default().solver).unwrap().alpha)
            .collect()
    })[id.index()]
}

fn model_id() -> impl Strategy<Value = ModelId> {
    (0usize..9).prop_map(ModelId::from_index)
}

fn pose_near(p: &PoseSample, dr: [f64; 3], dq: [f64; 3]) -> PoseSample {
    PoseSample { t: p.t, r: p.r + Vec3::from(dr), q: p.q * quat_exp(&Vec3::from(dq)) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_idempotent(
        id in model_id(),
        k in 0usize..500,
        dr in prop::array::uniform3(-0.05f64..0.05),
        dq in prop::array::uniform3(-0.15f64..0.15),
    ) {
        let cfg = Config::default().solver;
        let alpha = fitted(id);
        let base = demo(id, 77, NoisePreset::Zero).poses[k];
        let once = project(id, &alpha, &pose_near(&base, dr, dq), &cfg).unwrap();
        prop_assume!(once.converged);
        prop_assert!(once.violation < 1e-6);
        let twice = project(id, &alpha, &once.pose(base.t), &cfg).unwrap();
        prop_assert!((twice.r_star - once.r_star).norm() < 1e-9);
        prop_assert!(quat_angle(&twice.q_star, &once.q_star) < 1e-9);
    }

    #[test]
    fn reactions_in_the_constraint_row_space_leave_no_residual(
        id in model_id(),
        k in 0usize..500,
        lambda in prop::collection::vec(-20.0f64..20.0, 6),
        f_mu in prop::array::uniform3(-5.0f64..5.0),
        n_mu in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let cfg = Config::default().solver;
        let alpha = fitted(id);
        let p = demo(id, 77, NoisePreset::Zero).poses[k];
        let e = phi(id, &alpha, &p).unwrap();
        let lambda = DVector::from_iterator(e.len(), lambda.into_iter().take(e.len()));
        let fr = e.j_r.transpose() * &lambda;
        let nr = e.j_pi_world(&p.q).transpose() * &lambda;
        let (f_mu, n_mu) = (Vec3::from(f_mu), Vec3::from(n_mu));
        let w = WrenchSample {
            t: p.t,
            f: f_mu - Vec3::new(fr[0], fr[1], fr[2]),
            n: n_mu - Vec3::new(nr[0], nr[1], nr[2]),
        };
        let s = solve_lagrange(id, &alpha, &p, &w, &f_mu, &n_mu, &cfg).unwrap();
        prop_assert!(s.force_balance_residual.norm() < 1e-8, "{}", s.force_balance_residual.norm());
        prop_assert!(s.moment_balance_residual.norm() < 1e-8, "{}", s.moment_balance_residual.norm());
    }
}

#[test]
fn csv_round_trip_is_lossless_at_matching_timestamps() {
    let id = ModelId::new(BaseArticulation::Planar, OrientationMode::Slip);
    let d = demo(id, 5, NoisePreset::PaperLike);
    assert!(d.tong.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.csv");
    io::write_demo_csv(&path, &d).unwrap();
    let back = io::ingest(&path, &Config::default()).unwrap();
    assert_eq!(back.len(), d.len());
    for (a, b) in d.poses.iter().zip(&back.poses) {
        assert!((a.t - b.t).abs() < 1e-9);
        assert!((a.r - b.r).norm() < 1e-9);
        assert!(quat_angle(&a.q, &b.q) < 1e-9);
    }
    for (a, b) in d.wrenches.iter().zip(&back.wrenches) {
        assert!((a.f - b.f).norm() < 1e-9 && (a.n - b.n).norm() < 1e-9);
    }
    for (a, b) in d.tong.as_ref().unwrap().iter().zip(back.tong.as_ref().unwrap()) {
        assert!((a.f_l - b.f_l).norm() < 1e-9 && (a.f_r - b.f_r).norm() < 1e-9);
        assert!((a.x_lf - b.x_lf).norm() < 1e-12);
    }
}

#[test]
fn report_json_round_trips() {
    let id = ModelId::new(BaseArticulation::Prismatic, OrientationMode::Rigid);
    let cfg = Config::default();
    let report = slipfit::classify(&demo(id, 8, NoisePreset::PaperLike), &cfg).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["base", "mode", "alpha", "posteriors", "base_scores", "residual_summary", "diagnostics", "versions"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    for k in ["kinematic", "kinetic", "combined"] {
        assert!(value["posteriors"].get(k).is_some());
    }
    let parsed: slipfit::ModelReport = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string(&parsed).unwrap(), text);
}

#[test]
fn defaults_classify_zero_noise_fixtures() {
    let cfg = Config::default();
    for id in ModelId::all() {
        let report = slipfit::classify(&demo(id, 3, NoisePreset::Zero), &cfg).unwrap();
        assert_eq!(report.base, id.base, "{id}");
    }
}
