//! Hierarchical model selection: base articulation first, then the
//! orientation mode from kinematic and kinetic evidence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{FitError, SelectionError};
use crate::evidence::{evaluate_model, friction_estimates, ModelEvidence, ViolationCounts};
use crate::fitting::{fit_mode_from_base, initialize_base, irls_fit, FitResult};
use crate::friction::{kinetic_posterior, mu_series, KineticEvidence};
use crate::geometry::{finite_diff_velocity, Demonstration, PoseSample, Vec3};
use crate::models::{BaseArticulation, ModelId, ModelParams, OrientationMode};

/// Probabilities over the three orientation modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModePosterior {
    pub rigid: f64,
    pub slip: f64,
    pub free: f64,
}

impl ModePosterior {
    pub const UNIFORM: ModePosterior = ModePosterior {
        rigid: 1.0 / 3.0,
        slip: 1.0 / 3.0,
        free: 1.0 / 3.0,
    };

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            rigid: a[0],
            slip: a[1],
            free: a[2],
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.rigid, self.slip, self.free]
    }

    pub fn get(&self, mode: OrientationMode) -> f64 {
        self.to_array()[mode.index()]
    }

    pub fn sum(&self) -> f64 {
        self.rigid + self.slip + self.free
    }

    /// Scaled to sum to one; uniform when every entry is zero.
    pub fn normalized(&self) -> Self {
        let s = self.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Self::UNIFORM;
        }
        Self::from_array(self.to_array().map(|x| x / s))
    }

    /// Most probable mode; ties go to the earlier of rigid, slip, free.
    pub fn argmax(&self) -> OrientationMode {
        let a = self.to_array();
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        OrientationMode::ALL[best]
    }

    pub fn product(&self, other: &ModePosterior) -> ModePosterior {
        ModePosterior {
            rigid: self.rigid * other.rigid,
            slip: self.slip * other.slip,
            free: self.free * other.free,
        }
    }
}

/// Step-one score of one base articulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseScore {
    pub base: BaseArticulation,
    /// Position plus force violations; absent when the candidate is unusable.
    pub violations: Option<usize>,
    pub mean_e_r: Option<f64>,
    /// Why the candidate was excluded, if it was.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseDecision {
    pub base: BaseArticulation,
    /// Another usable base had the same violation total.
    pub ambiguous: bool,
}

/// Lowest position-plus-force violation total; ties go to the smaller mean
/// position residual, then to axial, prismatic, planar in that order.
pub fn select_base(scores: &[BaseScore]) -> Result<BaseDecision, SelectionError> {
    let usable: Vec<(&BaseScore, usize)> = scores
        .iter()
        .filter(|s| s.excluded.is_none())
        .filter_map(|s| s.violations.map(|v| (s, v)))
        .collect();
    let Some(&(first, first_v)) = usable.first() else {
        return Err(SelectionError::Unclassifiable(
            "no base articulation could be fitted".into(),
        ));
    };
    let mut best = (first, first_v);
    for &(s, v) in &usable[1..] {
        let (b, bv) = best;
        let key = |x: &BaseScore| x.mean_e_r.unwrap_or(f64::INFINITY);
        let better = v < bv
            || (v == bv
                && (key(s) < key(b) || (key(s) == key(b) && s.base.index() < b.base.index())));
        if better {
            best = (s, v);
        }
    }
    let ambiguous = usable
        .iter()
        .filter(|(s, v)| *v == best.1 && s.base != best.0.base)
        .count()
        > 0;
    Ok(BaseDecision {
        base: best.0.base,
        ambiguous,
    })
}

/// `P(D|m) = 1 / (V_m + 1)` per mode, normalized. `None` marks a mode whose
/// fit failed, which gets zero probability.
pub fn kinematic_posterior(violations: [Option<usize>; 3]) -> ModePosterior {
    ModePosterior::from_array(violations.map(|v| v.map_or(0.0, |v| 1.0 / (v as f64 + 1.0))))
        .normalized()
}

/// Product of the two posteriors, renormalized, and its argmax. Without
/// kinetic evidence the kinematic posterior stands alone.
pub fn select_final(
    kinematic: &ModePosterior,
    kinetic: Option<&ModePosterior>,
) -> (ModePosterior, OrientationMode) {
    let combined = match kinetic {
        Some(k) => {
            let p = kinematic.product(k);
            if p.sum() > 0.0 {
                p.normalized()
            } else {
                *kinematic
            }
        }
        None => *kinematic,
    };
    (combined, combined.argmax())
}

/// Depth of the fitted arc over its chord, `l (1 - cos(span / 2))`. An arc
/// this shallow cannot be told apart from a straight line.
pub fn arc_sagitta(params: &ModelParams, poses: &[PoseSample]) -> Option<f64> {
    let ModelParams::Axial(p) = params else {
        return None;
    };
    let r = p.w.rotation();
    let (g1, g2) = (r * Vec3::x(), r * Vec3::y());
    let mut angles: Vec<f64> = poses
        .iter()
        .map(|s| {
            let d = s.r - p.d;
            d.dot(&g2).atan2(d.dot(&g1))
        })
        .collect();
    if angles.len() < 2 {
        return Some(0.0);
    }
    angles.sort_by(f64::total_cmp);
    let mut gap = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
    for w in angles.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    let span = (std::f64::consts::TAU - gap).min(std::f64::consts::PI);
    Some(p.l * (1.0 - (span / 2.0).cos()))
}

/// All evidence gathered for one demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// Indexed like [`ModelId::all`]; `None` where the model was not run.
    pub entries: Vec<Option<Result<ModelEvidence, String>>>,
    pub base_scores: Vec<BaseScore>,
    pub base: BaseDecision,
    pub kinetic: Option<KineticEvidence>,
    /// Why kinetic evidence is absent, if it is.
    pub kinetic_note: Option<String>,
    pub warnings: Vec<String>,
}

impl Analysis {
    pub fn evidence(&self, id: ModelId) -> Option<&ModelEvidence> {
        self.entries[id.index()].as_ref().and_then(|e| e.as_ref().ok())
    }

    /// Kinematic posterior over the modes of `base`.
    pub fn kinematic(&self, base: BaseArticulation) -> ModePosterior {
        kinematic_posterior(
            OrientationMode::ALL
                .map(|m| self.evidence(ModelId::new(base, m)).map(|e| e.counts.orientation())),
        )
    }

    /// Hierarchical decision, with or without the kinetic posterior.
    pub fn decide(&self, use_kinetic: bool) -> (ModelId, ModePosterior) {
        let kin = self.kinematic(self.base.base);
        let kinetic = if use_kinetic {
            self.kinetic.as_ref().map(|k| &k.posterior)
        } else {
            None
        };
        let (combined, mode) = select_final(&kin, kinetic);
        (ModelId::new(self.base.base, mode), combined)
    }

    /// Flat decision over every evaluated model: fewest violations across
    /// all four channels, no hierarchy and no kinetic evidence.
    pub fn decide_flat(&self) -> Option<ModelId> {
        ModelId::all()
            .filter_map(|id| self.evidence(id).map(|e| (id, e.counts.total(), e.series.mean_e_r())))
            .min_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.index().cmp(&b.0.index())))
            .map(|(id, _, _)| id)
    }
}

fn fit_and_evaluate(
    fit: Result<FitResult, FitError>,
    demo: &Demonstration,
    friction: &[(Vec3, Vec3)],
    cfg: &Config,
) -> Result<ModelEvidence, String> {
    let fit = fit.map_err(|e| e.to_string())?;
    Ok(evaluate_model(fit, demo, friction, &cfg.solver, &cfg.error_model))
}

fn base_fit(base: BaseArticulation, demo: &Demonstration, cfg: &Config) -> Result<FitResult, FitError> {
    let init = initialize_base(base, &demo.poses)?;
    irls_fit(ModelId::free(base), &demo.poses, &init, &cfg.solver)
}

fn score(base: BaseArticulation, entry: &Result<ModelEvidence, String>, demo: &Demonstration, cfg: &Config) -> BaseScore {
    match entry {
        Err(msg) => BaseScore {
            base,
            violations: None,
            mean_e_r: None,
            excluded: Some(format!("fit failed: {msg}")),
        },
        Ok(ev) => {
            let excluded = arc_sagitta(&ev.fit.alpha, &demo.poses)
                .filter(|s| *s < cfg.error_model.r_se)
                .map(|s| format!("arc depth {s:.2e} m below position threshold; indistinguishable from a line"));
            let mean = ev.series.mean_e_r();
            BaseScore {
                base,
                violations: Some(ev.counts.kinematic_base()),
                mean_e_r: mean.is_finite().then_some(mean),
                excluded,
            }
        }
    }
}

/// Runs the fits and evidence computations. With `all_models` every model
/// of every base is evaluated (needed for the flat comparison); otherwise
/// only the free models plus the modes of the selected base.
pub fn analyze(demo: &Demonstration, cfg: &Config, all_models: bool) -> Result<Analysis, SelectionError> {
    demo.validate()?;
    if demo.len() < cfg.solver.min_samples {
        return Err(FitError::TooFewSamples {
            needed: cfg.solver.min_samples,
            got: demo.len(),
        }
        .into());
    }
    let velocities = finite_diff_velocity(&demo.poses, cfg.ingestion.smoothing_window)?;
    let friction = friction_estimates(demo, &velocities, &cfg.error_model);

    let free_fits: Vec<(Result<FitResult, FitError>, Result<ModelEvidence, String>)> = BaseArticulation::ALL
        .par_iter()
        .map(|&b| {
            let fit = base_fit(b, demo, cfg);
            let ev = fit_and_evaluate(fit.clone(), demo, &friction, cfg);
            (fit, ev)
        })
        .collect();

    let base_scores: Vec<BaseScore> = BaseArticulation::ALL
        .iter()
        .zip(&free_fits)
        .map(|(b, (_, ev))| score(*b, ev, demo, cfg))
        .collect();
    let base = select_base(&base_scores)?;

    let mut warnings = Vec::new();
    if base.ambiguous {
        warnings.push("base articulation tie broken by mean position residual".to_string());
    }

    let expand: Vec<BaseArticulation> = if all_models {
        BaseArticulation::ALL.to_vec()
    } else {
        vec![base.base]
    };
    let jobs: Vec<ModelId> = expand
        .iter()
        .flat_map(|b| [ModelId::new(*b, OrientationMode::Rigid), ModelId::new(*b, OrientationMode::Slip)])
        .collect();
    let mode_entries: Vec<(ModelId, Result<ModelEvidence, String>)> = jobs
        .par_iter()
        .map(|&id| {
            let entry = match &free_fits[id.base.index()].0 {
                Ok(base_fit) => fit_and_evaluate(fit_mode_from_base(id, demo, base_fit, &cfg.solver), demo, &friction, cfg),
                Err(e) => Err(format!("base fit failed: {e}")),
            };
            (id, entry)
        })
        .collect();

    let mut entries: Vec<Option<Result<ModelEvidence, String>>> = vec![None; 9];
    for (b, (_, ev)) in BaseArticulation::ALL.iter().zip(free_fits) {
        entries[ModelId::free(*b).index()] = Some(ev);
    }
    for (id, ev) in mode_entries {
        entries[id.index()] = Some(ev);
    }

    let (kinetic, kinetic_note) = match &demo.tong {
        None => (None, Some("no pad-force stream".to_string())),
        Some(tong) => match mu_series(tong, &cfg.friction).and_then(|s| kinetic_posterior(&s, &cfg.friction)) {
            Ok(k) => (Some(k), None),
            Err(e) => (None, Some(e.to_string())),
        },
    };
    if let Some(note) = &kinetic_note {
        warnings.push(format!("kinetic evidence absent: {note}"));
    }

    for id in ModelId::all() {
        if let Some(Ok(ev)) = &entries[id.index()] {
            if !ev.fit.converged {
                warnings.push(format!("{id}: fit did not converge in {} iterations", ev.fit.iterations));
            }
        }
    }

    Ok(Analysis {
        entries,
        base_scores,
        base,
        kinetic,
        kinetic_note,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posteriors {
    pub kinematic: ModePosterior,
    pub kinetic: Option<ModePosterior>,
    pub combined: ModePosterior,
}

/// Fraction of valid samples above threshold, per channel, for the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub model: ModelId,
    pub n_samples: usize,
    pub n_valid: usize,
    pub position: f64,
    pub force: f64,
    pub orientation: f64,
    pub moment: f64,
}

/// One row of the per-model evidence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub model: ModelId,
    pub status: String,
    pub counts: Option<ViolationCounts>,
    pub objective: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub flagged_samples: Option<usize>,
    pub rank_deficient_samples: Option<usize>,
    pub mean_e_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub evidence_table: Vec<EvidenceRow>,
    pub base_ambiguous: bool,
    pub kinetic_absent: bool,
    pub kinetic_note: Option<String>,
    pub grip_samples: usize,
    pub clamped_estimates: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub library: String,
    pub model_library: String,
    pub config_hash: String,
}

pub const MODEL_LIBRARY_VERSION: &str = "nine-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub base: BaseArticulation,
    pub mode: OrientationMode,
    pub alpha: ModelParams,
    pub posteriors: Posteriors,
    pub base_scores: Vec<BaseScore>,
    pub residual_summary: ResidualSummary,
    pub diagnostics: Diagnostics,
    pub versions: Versions,
}

impl ModelReport {
    pub fn model(&self) -> ModelId {
        ModelId::new(self.base, self.mode)
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn evidence_row(id: ModelId, entry: &Option<Result<ModelEvidence, String>>) -> Option<EvidenceRow> {
    let row = match entry.as_ref()? {
        Err(msg) => EvidenceRow {
            model: id,
            status: format!("failed: {msg}"),
            counts: None,
            objective: None,
            iterations: None,
            converged: None,
            flagged_samples: None,
            rank_deficient_samples: None,
            mean_e_r: None,
        },
        Ok(ev) => EvidenceRow {
            model: id,
            status: "ok".into(),
            counts: Some(ev.counts),
            objective: finite(ev.fit.objective),
            iterations: Some(ev.fit.iterations),
            converged: Some(ev.fit.converged),
            flagged_samples: Some(ev.series.n_flagged()),
            rank_deficient_samples: Some(ev.n_rank_deficient),
            mean_e_r: finite(ev.series.mean_e_r()),
        },
    };
    Some(row)
}

/// Assembles the report for the hierarchical decision with kinetic evidence.
pub fn report(analysis: &Analysis, cfg: &Config) -> Result<ModelReport, SelectionError> {
    let (id, combined) = analysis.decide(true);
    let winner = analysis.evidence(id).ok_or_else(|| {
        SelectionError::Unclassifiable(format!("selected model {id} has no usable fit"))
    })?;
    let c = winner.counts;
    let frac = |k: usize| if c.n_valid == 0 { 0.0 } else { k as f64 / c.n_valid as f64 };
    let evidence_table = ModelId::all()
        .filter_map(|m| evidence_row(m, &analysis.entries[m.index()]))
        .collect();
    Ok(ModelReport {
        base: id.base,
        mode: id.mode,
        alpha: winner.fit.alpha,
        posteriors: Posteriors {
            kinematic: analysis.kinematic(id.base),
            kinetic: analysis.kinetic.map(|k| k.posterior),
            combined,
        },
        base_scores: analysis.base_scores.clone(),
        residual_summary: ResidualSummary {
            model: id,
            n_samples: winner.series.len(),
            n_valid: c.n_valid,
            position: frac(c.n_r),
            force: frac(c.n_f),
            orientation: frac(c.n_q),
            moment: frac(c.n_n),
        },
        diagnostics: Diagnostics {
            evidence_table,
            base_ambiguous: analysis.base.ambiguous,
            kinetic_absent: analysis.kinetic.is_none(),
            kinetic_note: analysis.kinetic_note.clone(),
            grip_samples: analysis.kinetic.map_or(0, |k| k.n_valid),
            clamped_estimates: analysis.kinetic.map_or(0, |k| k.n_clamped),
            warnings: analysis.warnings.clone(),
        },
        versions: Versions {
            library: env!("CARGO_PKG_VERSION").to_string(),
            model_library: MODEL_LIBRARY_VERSION.to_string(),
            config_hash: cfg.hash(),
        },
    })
}

/// The full pipeline: free fits, base choice, mode fits for that base,
/// kinematic and kinetic posteriors, final decision.
pub fn classify(demo: &Demonstration, cfg: &Config) -> Result<ModelReport, SelectionError> {
    let analysis = analyze(demo, cfg, false)?;
    report(&analysis, cfg)
}
