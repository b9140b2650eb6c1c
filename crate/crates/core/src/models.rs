//! The nine constraint models: {axial, prismatic, planar} x {rigid, slip, free}.
//!
//! Every model is a set of scalar equations `phi(p, alpha) = 0` on the grasp
//! pose `p = (r, q)`. Evaluation returns the residuals together with the
//! position Jacobian, the rotation Jacobian and the parameter Jacobian.
//!
//! Rotation Jacobians are taken with respect to a body-frame (right)
//! perturbation `A(q) -> A(q) exp([d]x)`. [`ConstraintEval::j_pi_world`]
//! converts them to a global-frame perturbation, which is what moment
//! balance in global coordinates needs.
//!
//! Equation sets per model (parameter-coupling conditions such as
//! `l_bar . t_bar = 0` or `u . v = 0` are not motion equations; they are
//! exposed separately by [`penalties`]):
//!
//! | model            | equations                                                     |
//! |------------------|---------------------------------------------------------------|
//! | axial.free       | `(d - r) . n = 0`, `|d - r|^2 - l^2 = 0`                      |
//! | axial.slip       | axial.free + `u . (A s) = 0`, `v . (A s) = 0`                 |
//! | axial.rigid      | `r + A l - d = 0`, `(A l) . n = 0`, `(A t) . n = 0`           |
//! | prismatic.free   | `(r - d) . g1 = 0`, `(r - d) . g2 = 0`                        |
//! | prismatic.slip   | prismatic.free + `u . (A s) = 0`, `v . (A s) = 0`             |
//! | prismatic.rigid  | prismatic.free + `(A x).(L y)`, `(A x).(L z)`, `(A y).(L z)`  |
//! | planar.free      | `r . n - d_z = 0`                                             |
//! | planar.slip      | planar.free + `(A z) . g1 = 0`, `(A z) . g2 = 0`              |
//! | planar.rigid     | same equations as planar.slip                                 |
//!
//! with `n = e^{w~} z`, `g1 = e^{w~} x`, `g2 = e^{w~} y` and `L` the locked
//! orientation of the prismatic rigid model.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::geometry::{
    exp_map_derivatives, exp_so3, exp_so3_derivatives, orthonormal_complement, quat_exp,
    quat_log, quat_to_matrix, ExpCoords, PoseSample, Quat, Vec3,
};

/// Tolerance on parameter invariants (orthogonality, unit norms).
pub const PARAM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseArticulation {
    Axial,
    Prismatic,
    Planar,
}

impl BaseArticulation {
    pub const ALL: [BaseArticulation; 3] = [
        BaseArticulation::Axial,
        BaseArticulation::Prismatic,
        BaseArticulation::Planar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaseArticulation::Axial => "axial",
            BaseArticulation::Prismatic => "prismatic",
            BaseArticulation::Planar => "planar",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationMode {
    Rigid,
    Slip,
    Free,
}

impl OrientationMode {
    pub const ALL: [OrientationMode; 3] =
        [OrientationMode::Rigid, OrientationMode::Slip, OrientationMode::Free];

    pub fn as_str(&self) -> &'static str {
        match self {
            OrientationMode::Rigid => "rigid",
            OrientationMode::Slip => "slip",
            OrientationMode::Free => "free",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ModelId {
    pub base: BaseArticulation,
    pub mode: OrientationMode,
}

impl ModelId {
    pub const fn new(base: BaseArticulation, mode: OrientationMode) -> Self {
        Self { base, mode }
    }

    /// All nine models, base-major.
    pub fn all() -> impl Iterator<Item = ModelId> {
        BaseArticulation::ALL
            .into_iter()
            .flat_map(|b| OrientationMode::ALL.into_iter().map(move |m| ModelId::new(b, m)))
    }

    /// Position in [`ModelId::all`].
    pub fn index(&self) -> usize {
        self.base.index() * 3 + self.mode.index()
    }

    pub fn from_index(i: usize) -> Self {
        ModelId::new(BaseArticulation::ALL[i / 3], OrientationMode::ALL[i % 3])
    }

    pub fn free(base: BaseArticulation) -> Self {
        Self::new(base, OrientationMode::Free)
    }

    /// Number of motion equations.
    pub fn n_equations(&self) -> usize {
        use BaseArticulation::*;
        use OrientationMode::*;
        match (self.base, self.mode) {
            (Axial, Rigid) => 5,
            (Axial, Slip) => 4,
            (Axial, Free) => 2,
            (Prismatic, Rigid) => 5,
            (Prismatic, Slip) => 4,
            (Prismatic, Free) => 2,
            (Planar, Free) => 1,
            (Planar, Slip) | (Planar, Rigid) => 3,
        }
    }

    /// Length of the flat parameter vector used by the solvers.
    pub fn n_params(&self) -> usize {
        use BaseArticulation::*;
        use OrientationMode::*;
        match (self.base, self.mode) {
            (Axial, Rigid) => 11,
            (Axial, Slip) => 15,
            (Axial, Free) => 6,
            (Prismatic, Rigid) => 8,
            (Prismatic, Slip) => 14,
            (Prismatic, Free) => 5,
            (Planar, Free) => 3,
            (Planar, Slip) | (Planar, Rigid) => 6,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.base.as_str(), self.mode.as_str())
    }
}

impl FromStr for ModelId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelId::all()
            .find(|id| id.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| ModelError::UnknownModel(s.to_string()))
    }
}

impl From<ModelId> for String {
    fn from(id: ModelId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for ModelId {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Degrees of freedom left by a model: `6 - #motion equations`.
pub fn count_dof(id: ModelId) -> usize {
    6 - id.n_equations()
}

/// Global slip axis `u x v`, held on the grasped body by `s_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipAxisParams {
    pub u: Vec3,
    pub v: Vec3,
    pub s_bar: Vec3,
}

impl SlipAxisParams {
    pub fn from_axis(axis: &Vec3, s_bar: &Vec3) -> Self {
        let (u, v) = orthonormal_complement(axis);
        Self {
            u,
            v,
            s_bar: s_bar.normalize(),
        }
    }

    pub fn axis(&self) -> Vec3 {
        self.u.cross(&self.v)
    }

    fn validate(&self) -> Result<(), ModelError> {
        check_unit("u", &self.u)?;
        check_unit("v", &self.v)?;
        check_unit("s_bar", &self.s_bar)?;
        if self.u.dot(&self.v).abs() > PARAM_TOL {
            return Err(ModelError::InvalidParams(format!(
                "u . v = {:e} (must be 0)",
                self.u.dot(&self.v)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxialParams {
    /// Orientation of the arc plane; its normal is the rotation axis.
    pub w: ExpCoords,
    /// Arc center.
    pub d: Vec3,
    /// Body-frame vector from the grasp point to the center (rigid only).
    pub l_bar: Vec3,
    /// Body-frame unit vector orthogonal to `l_bar` and the axis (rigid only).
    pub t_bar: Vec3,
    /// Arc radius (slip and free).
    pub l: f64,
    pub slip: Option<SlipAxisParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrismaticParams {
    /// Line direction is `e^{w~} z`.
    pub w: ExpCoords,
    /// A point on the line.
    pub d: Vec3,
    /// Locked grasp orientation (rigid only).
    pub r_lock: Quat,
    pub slip: Option<SlipAxisParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarParams {
    /// Plane normal is `e^{w~} z`.
    pub w: ExpCoords,
    /// Plane offset along the normal.
    pub d_z: f64,
    /// Body-frame axis kept parallel to the normal (rigid and slip).
    pub z_bar: Vec3,
    /// For the slip model: the slip axis, equal to the plane normal.
    pub slip: Option<SlipAxisParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "base", rename_all = "lowercase")]
pub enum ModelParams {
    Axial(AxialParams),
    Prismatic(PrismaticParams),
    Planar(PlanarParams),
}

fn check_unit(name: &str, v: &Vec3) -> Result<(), ModelError> {
    if !v.iter().all(|x| x.is_finite()) || (v.norm() - 1.0).abs() > PARAM_TOL {
        return Err(ModelError::InvalidParams(format!(
            "{name} must be a unit vector (norm {})",
            v.norm()
        )));
    }
    Ok(())
}

fn check_w(w: &ExpCoords) -> Result<(), ModelError> {
    let n = w.norm();
    if !n.is_finite() || n >= std::f64::consts::PI {
        return Err(ModelError::InvalidParams(format!("|w| = {n} must be < pi")));
    }
    Ok(())
}

fn put3(v: &mut [f64], at: usize, x: &Vec3) {
    v[at..at + 3].copy_from_slice(x.as_slice());
}

fn get3(v: &[f64], at: usize) -> Vec3 {
    Vec3::new(v[at], v[at + 1], v[at + 2])
}

impl ModelParams {
    pub fn base(&self) -> BaseArticulation {
        match self {
            ModelParams::Axial(_) => BaseArticulation::Axial,
            ModelParams::Prismatic(_) => BaseArticulation::Prismatic,
            ModelParams::Planar(_) => BaseArticulation::Planar,
        }
    }

    pub fn w(&self) -> ExpCoords {
        match self {
            ModelParams::Axial(p) => p.w,
            ModelParams::Prismatic(p) => p.w,
            ModelParams::Planar(p) => p.w,
        }
    }

    /// Rotation axis, line direction or plane normal.
    pub fn axis(&self) -> Vec3 {
        self.w().axis()
    }

    pub fn slip(&self) -> Option<&SlipAxisParams> {
        match self {
            ModelParams::Axial(p) => p.slip.as_ref(),
            ModelParams::Prismatic(p) => p.slip.as_ref(),
            ModelParams::Planar(p) => p.slip.as_ref(),
        }
    }

    /// Checks the invariants that `id` relies on.
    pub fn validate(&self, id: ModelId) -> Result<(), ModelError> {
        use OrientationMode::*;
        if self.base() != id.base {
            return Err(ModelError::WrongParams(id.to_string()));
        }
        check_w(&self.w())?;
        match (self, id.mode) {
            (ModelParams::Axial(p), Rigid) => {
                check_unit("t_bar", &p.t_bar)?;
                if p.l_bar.norm() <= 0.0 || !p.l_bar.norm().is_finite() {
                    return Err(ModelError::InvalidParams("l_bar must be nonzero".into()));
                }
                if p.l_bar.dot(&p.t_bar).abs() > PARAM_TOL {
                    return Err(ModelError::InvalidParams(format!(
                        "l_bar . t_bar = {:e} (must be 0)",
                        p.l_bar.dot(&p.t_bar)
                    )));
                }
            }
            (ModelParams::Axial(p), mode) => {
                if !(p.l > 0.0 && p.l.is_finite()) {
                    return Err(ModelError::InvalidParams(format!("radius {} must be > 0", p.l)));
                }
                if mode == Slip {
                    p.slip
                        .as_ref()
                        .ok_or_else(|| ModelError::InvalidParams("missing slip axis".into()))?
                        .validate()?;
                }
            }
            (ModelParams::Prismatic(p), Slip) => p
                .slip
                .as_ref()
                .ok_or_else(|| ModelError::InvalidParams("missing slip axis".into()))?
                .validate()?,
            (ModelParams::Prismatic(p), Rigid) => {
                if (p.r_lock.quaternion().norm() - 1.0).abs() > 1e-9 {
                    return Err(ModelError::InvalidParams("r_lock must be a unit quaternion".into()));
                }
            }
            (ModelParams::Prismatic(_), Free) => {}
            (ModelParams::Planar(p), Rigid | Slip) => check_unit("z_bar", &p.z_bar)?,
            (ModelParams::Planar(_), Free) => {}
        }
        Ok(())
    }

    /// Flattens the parameters `id` uses into the solver vector.
    pub fn to_vector(&self, id: ModelId) -> Result<DVector<f64>, ModelError> {
        use OrientationMode::*;
        if self.base() != id.base {
            return Err(ModelError::WrongParams(id.to_string()));
        }
        let mut v = vec![0.0; id.n_params()];
        let w = self.w();
        v[0] = w.w_x;
        v[1] = w.w_y;
        let missing = || ModelError::InvalidParams(format!("{id} needs slip-axis parameters"));
        match self {
            ModelParams::Axial(p) => {
                put3(&mut v, 2, &p.d);
                match id.mode {
                    Free => v[5] = p.l,
                    Slip => {
                        v[5] = p.l;
                        let s = p.slip.ok_or_else(missing)?;
                        put3(&mut v, 6, &s.u);
                        put3(&mut v, 9, &s.v);
                        put3(&mut v, 12, &s.s_bar);
                    }
                    Rigid => {
                        put3(&mut v, 5, &p.l_bar);
                        put3(&mut v, 8, &p.t_bar);
                    }
                }
            }
            ModelParams::Prismatic(p) => {
                put3(&mut v, 2, &p.d);
                match id.mode {
                    Free => {}
                    Slip => {
                        let s = p.slip.ok_or_else(missing)?;
                        put3(&mut v, 5, &s.u);
                        put3(&mut v, 8, &s.v);
                        put3(&mut v, 11, &s.s_bar);
                    }
                    Rigid => put3(&mut v, 5, &quat_log(&p.r_lock)),
                }
            }
            ModelParams::Planar(p) => {
                v[2] = p.d_z;
                if id.mode != Free {
                    put3(&mut v, 3, &p.z_bar);
                }
            }
        }
        Ok(DVector::from_vec(v))
    }

    /// Copy of `self` with the fields used by `id` taken from `v`.
    pub fn with_vector(&self, id: ModelId, v: &[f64]) -> Result<ModelParams, ModelError> {
        use OrientationMode::*;
        if v.len() != id.n_params() {
            return Err(ModelError::VectorLength {
                model: id.to_string(),
                expected: id.n_params(),
                got: v.len(),
            });
        }
        if self.base() != id.base {
            return Err(ModelError::WrongParams(id.to_string()));
        }
        let w = ExpCoords::new(v[0], v[1]);
        let slip_at = |at: usize| SlipAxisParams {
            u: get3(v, at),
            v: get3(v, at + 3),
            s_bar: get3(v, at + 6),
        };
        Ok(match *self {
            ModelParams::Axial(mut p) => {
                p.w = w;
                p.d = get3(v, 2);
                match id.mode {
                    Free => p.l = v[5],
                    Slip => {
                        p.l = v[5];
                        p.slip = Some(slip_at(6));
                    }
                    Rigid => {
                        p.l_bar = get3(v, 5);
                        p.t_bar = get3(v, 8);
                    }
                }
                ModelParams::Axial(p)
            }
            ModelParams::Prismatic(mut p) => {
                p.w = w;
                p.d = get3(v, 2);
                match id.mode {
                    Free => {}
                    Slip => p.slip = Some(slip_at(5)),
                    Rigid => p.r_lock = quat_exp(&get3(v, 5)),
                }
                ModelParams::Prismatic(p)
            }
            ModelParams::Planar(mut p) => {
                p.w = w;
                p.d_z = v[2];
                if id.mode != Free {
                    p.z_bar = get3(v, 3);
                    if id.mode == Slip {
                        let r = w.rotation();
                        p.slip = Some(SlipAxisParams {
                            u: r * Vec3::x(),
                            v: r * Vec3::y(),
                            s_bar: p.z_bar,
                        });
                    }
                }
                ModelParams::Planar(p)
            }
        })
    }

    /// Parameters built from a flat vector with all unused fields at neutral values.
    pub fn from_vector(id: ModelId, v: &[f64]) -> Result<ModelParams, ModelError> {
        Self::neutral(id.base).with_vector(id, v)
    }

    /// Placeholder parameters for a base (used as a template).
    pub fn neutral(base: BaseArticulation) -> ModelParams {
        match base {
            BaseArticulation::Axial => ModelParams::Axial(AxialParams {
                w: ExpCoords::ZERO,
                d: Vec3::zeros(),
                l_bar: Vec3::x(),
                t_bar: Vec3::y(),
                l: 1.0,
                slip: None,
            }),
            BaseArticulation::Prismatic => ModelParams::Prismatic(PrismaticParams {
                w: ExpCoords::ZERO,
                d: Vec3::zeros(),
                r_lock: Quat::identity(),
                slip: None,
            }),
            BaseArticulation::Planar => ModelParams::Planar(PlanarParams {
                w: ExpCoords::ZERO,
                d_z: 0.0,
                z_bar: Vec3::z(),
                slip: None,
            }),
        }
    }
}

/// Residuals and Jacobians of one model at one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub phi: DVector<f64>,
    /// `d phi / d r`, one row per equation.
    pub j_r: DMatrix<f64>,
    /// `d phi / d theta` for a body-frame rotation perturbation.
    pub j_pi: DMatrix<f64>,
    /// `d phi / d alpha` over the flat parameter vector.
    pub j_alpha: DMatrix<f64>,
}

impl ConstraintEval {
    fn zeros(m: usize, k: usize) -> Self {
        Self {
            phi: DVector::zeros(m),
            j_r: DMatrix::zeros(m, 3),
            j_pi: DMatrix::zeros(m, 3),
            j_alpha: DMatrix::zeros(m, k),
        }
    }

    /// Rotation Jacobian for a global-frame perturbation, `J_pi A^T`.
    pub fn j_pi_world(&self, q: &Quat) -> DMatrix<f64> {
        let a = quat_to_matrix(q);
        let at = DMatrix::from_iterator(3, 3, a.transpose().iter().copied());
        &self.j_pi * at
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

struct Rows<'a> {
    out: &'a mut ConstraintEval,
    row: usize,
}

impl Rows<'_> {
    fn push(&mut self, value: f64, j_r: Vec3, j_pi: Vec3) -> usize {
        let i = self.row;
        self.out.phi[i] = value;
        for c in 0..3 {
            self.out.j_r[(i, c)] = j_r[c];
            self.out.j_pi[(i, c)] = j_pi[c];
        }
        self.row += 1;
        i
    }

    fn alpha(&mut self, row: usize, col: usize, value: f64) {
        self.out.j_alpha[(row, col)] += value;
    }

    fn alpha3(&mut self, row: usize, col: usize, value: &Vec3) {
        for c in 0..3 {
            self.out.j_alpha[(row, col + c)] += value[c];
        }
    }
}

/// Evaluates model `id` from a flat parameter vector. No invariant checks:
/// this is the entry point the solvers use on intermediate iterates.
pub fn eval_raw(id: ModelId, alpha: &[f64], p: &PoseSample) -> ConstraintEval {
    use BaseArticulation::*;
    use OrientationMode::*;
    debug_assert_eq!(alpha.len(), id.n_params());

    let mut out = ConstraintEval::zeros(id.n_equations(), id.n_params());
    let mut rows = Rows { out: &mut out, row: 0 };

    let w = ExpCoords::new(alpha[0], alpha[1]);
    let rw = w.rotation();
    let drw = exp_map_derivatives(&w);
    let n = rw * Vec3::z();
    let a = quat_to_matrix(&p.q);
    let r = p.r;
    let zero = Vec3::zeros();

    // u . (A s) and v . (A s) rows, parameters starting at `at`.
    let slip_rows = |rows: &mut Rows, at: usize| {
        let u = get3(alpha, at);
        let v = get3(alpha, at + 3);
        let s = get3(alpha, at + 6);
        let as_ = a * s;
        for (k, g) in [u, v].iter().enumerate() {
            let i = rows.push(g.dot(&as_), zero, s.cross(&(a.transpose() * g)));
            rows.alpha3(i, at + 3 * k, &as_);
            rows.alpha3(i, at + 6, &(a.transpose() * g));
        }
    };

    match (id.base, id.mode) {
        (Axial, Free) | (Axial, Slip) => {
            let d = get3(alpha, 2);
            let l = alpha[5];
            let dr = d - r;
            let i = rows.push(dr.dot(&n), -n, zero);
            for (c, dm) in drw.iter().enumerate() {
                rows.alpha(i, c, dr.dot(&(dm * Vec3::z())));
            }
            rows.alpha3(i, 2, &n);
            let i = rows.push(dr.norm_squared() - l * l, -2.0 * dr, zero);
            rows.alpha3(i, 2, &(2.0 * dr));
            rows.alpha(i, 5, -2.0 * l);
            if id.mode == Slip {
                slip_rows(&mut rows, 6);
            }
        }
        (Axial, Rigid) => {
            let d = get3(alpha, 2);
            let l_bar = get3(alpha, 5);
            let t_bar = get3(alpha, 8);
            let resid = r + a * l_bar - d;
            for k in 0..3 {
                let ek = Vec3::ith(k, 1.0);
                let at_ek = a.transpose() * ek;
                let i = rows.push(resid[k], ek, l_bar.cross(&at_ek));
                rows.alpha(i, 2 + k, -1.0);
                rows.alpha3(i, 5, &at_ek);
            }
            for (b, col) in [(l_bar, 5), (t_bar, 8)] {
                let ab = a * b;
                let at_n = a.transpose() * n;
                let i = rows.push(ab.dot(&n), zero, b.cross(&at_n));
                for (c, dm) in drw.iter().enumerate() {
                    rows.alpha(i, c, ab.dot(&(dm * Vec3::z())));
                }
                rows.alpha3(i, col, &at_n);
            }
        }
        (Prismatic, mode) => {
            let d = get3(alpha, 2);
            let rd = r - d;
            for k in 0..2 {
                let ek = Vec3::ith(k, 1.0);
                let g = rw * ek;
                let i = rows.push(rd.dot(&g), g, zero);
                for (c, dm) in drw.iter().enumerate() {
                    rows.alpha(i, c, rd.dot(&(dm * ek)));
                }
                rows.alpha3(i, 2, &(-g));
            }
            match mode {
                Free => {}
                Slip => slip_rows(&mut rows, 5),
                Rigid => {
                    let rho = get3(alpha, 5);
                    let lock = exp_so3(&rho);
                    let dlock = exp_so3_derivatives(&rho);
                    for (ia, ib) in [(0, 1), (0, 2), (1, 2)] {
                        let ea = Vec3::ith(ia, 1.0);
                        let eb = Vec3::ith(ib, 1.0);
                        let aa = a * ea;
                        let lb = lock * eb;
                        let i = rows.push(aa.dot(&lb), zero, ea.cross(&(a.transpose() * lb)));
                        for (c, dm) in dlock.iter().enumerate() {
                            rows.alpha(i, 5 + c, aa.dot(&(dm * eb)));
                        }
                    }
                }
            }
        }
        (Planar, mode) => {
            let d_z = alpha[2];
            let i = rows.push(r.dot(&n) - d_z, n, zero);
            for (c, dm) in drw.iter().enumerate() {
                rows.alpha(i, c, r.dot(&(dm * Vec3::z())));
            }
            rows.alpha(i, 2, -1.0);
            if mode != Free {
                let z_bar = get3(alpha, 3);
                let az = a * z_bar;
                for k in 0..2 {
                    let ek = Vec3::ith(k, 1.0);
                    let g = rw * ek;
                    let i = rows.push(az.dot(&g), zero, z_bar.cross(&(a.transpose() * g)));
                    for (c, dm) in drw.iter().enumerate() {
                        rows.alpha(i, c, az.dot(&(dm * ek)));
                    }
                    rows.alpha3(i, 3, &(a.transpose() * g));
                }
            }
        }
    }
    debug_assert_eq!(rows.row, id.n_equations());
    out
}

/// Residuals of model `id` only (no Jacobians) from a flat parameter vector.
pub fn residual_raw(id: ModelId, alpha: &[f64], p: &PoseSample) -> DVector<f64> {
    eval_raw(id, alpha, p).phi
}

/// Constraint residuals and Jacobians of `id` at pose `p`.
pub fn phi(id: ModelId, params: &ModelParams, p: &PoseSample) -> Result<ConstraintEval, ModelError> {
    params.validate(id)?;
    let alpha = params.to_vector(id)?;
    Ok(eval_raw(id, alpha.as_slice(), p))
}

/// One parameter-coupling condition with its gradient over the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub grad: Vec<(usize, f64)>,
}

/// Parameter-coupling conditions (orthogonality, unit norms) for `id`.
pub fn penalties(id: ModelId, alpha: &[f64]) -> Vec<Penalty> {
    use BaseArticulation::*;
    use OrientationMode::*;
    let dot_pen = |a: usize, b: usize| {
        let x = get3(alpha, a);
        let y = get3(alpha, b);
        let mut grad = Vec::with_capacity(6);
        for c in 0..3 {
            grad.push((a + c, y[c]));
            grad.push((b + c, x[c]));
        }
        Penalty { value: x.dot(&y), grad }
    };
    let unit_pen = |a: usize| {
        let x = get3(alpha, a);
        Penalty {
            value: x.norm_squared() - 1.0,
            grad: (0..3).map(|c| (a + c, 2.0 * x[c])).collect(),
        }
    };
    let slip = |at: usize| {
        vec![
            dot_pen(at, at + 3),
            unit_pen(at),
            unit_pen(at + 3),
            unit_pen(at + 6),
        ]
    };
    match (id.base, id.mode) {
        (Axial, Rigid) => vec![dot_pen(5, 8), unit_pen(8)],
        (Axial, Slip) => slip(6),
        (Prismatic, Slip) => slip(5),
        (Planar, Rigid) | (Planar, Slip) => vec![unit_pen(3)],
        _ => Vec::new(),
    }
}

/// Restores exact parameter invariants after an unconstrained solve and
/// puts the axis parameterization in canonical form (`|w| <= pi/2`).
pub fn normalize_vector(id: ModelId, alpha: &mut [f64]) {
    use BaseArticulation::*;
    use OrientationMode::*;

    let w = ExpCoords::new(alpha[0], alpha[1]);
    let axis = w.axis();
    // Prismatic lines are unsigned and only the span of (g1, g2) matters, so
    // re-deriving the basis from the canonical coordinates keeps the zero set.
    let canon = ExpCoords::from_axis(&axis);
    let flipped = canon.axis().dot(&axis) < 0.0;
    alpha[0] = canon.w_x;
    alpha[1] = canon.w_y;

    let gram_schmidt = |alpha: &mut [f64], at: usize| {
        let u = get3(alpha, at).normalize();
        let v = get3(alpha, at + 3);
        let v = (v - u * u.dot(&v)).normalize();
        let s = get3(alpha, at + 6).normalize();
        put3(alpha, at, &u);
        put3(alpha, at + 3, &v);
        put3(alpha, at + 6, &s);
    };

    match (id.base, id.mode) {
        (Axial, Free) => alpha[5] = alpha[5].abs(),
        (Axial, Slip) => {
            alpha[5] = alpha[5].abs();
            gram_schmidt(alpha, 6);
        }
        (Axial, Rigid) => {
            let l = get3(alpha, 5);
            let t = get3(alpha, 8);
            let lh = l.normalize();
            let t = (t - lh * lh.dot(&t)).normalize();
            put3(alpha, 8, &t);
        }
        (Prismatic, Slip) => gram_schmidt(alpha, 5),
        (Prismatic, Rigid) => {
            let rho = get3(alpha, 5);
            put3(alpha, 5, &quat_log(&quat_exp(&rho)));
        }
        (Planar, mode) => {
            if flipped {
                alpha[2] = -alpha[2];
            }
            if mode != Free {
                let z = get3(alpha, 3).normalize();
                put3(alpha, 3, &z);
            }
        }
        _ => {}
    }
}

/// Largest deviation between the analytic Jacobians and central finite
/// differences (rotation perturbed on the right by small axis-angle steps).
pub fn jacobians_fd_check(id: ModelId, params: &ModelParams, p: &PoseSample, step: f64) -> Result<f64, ModelError> {
    let alpha = params.to_vector(id)?;
    Ok(jacobians_fd_check_raw(id, alpha.as_slice(), p, step))
}

pub fn jacobians_fd_check_raw(id: ModelId, alpha: &[f64], p: &PoseSample, step: f64) -> f64 {
    let eval = eval_raw(id, alpha, p);
    let mut worst = 0.0_f64;
    let mut compare = |col: &DVector<f64>, analytic: nalgebra::DVectorView<f64>| {
        for (a, b) in col.iter().zip(analytic.iter()) {
            worst = worst.max((a - b).abs());
        }
    };
    for c in 0..3 {
        let e = Vec3::ith(c, step);
        let plus = PoseSample { r: p.r + e, ..*p };
        let minus = PoseSample { r: p.r - e, ..*p };
        let fd = (residual_raw(id, alpha, &plus) - residual_raw(id, alpha, &minus)) / (2.0 * step);
        compare(&fd, eval.j_r.column(c));

        let plus = PoseSample { q: p.q * quat_exp(&e), ..*p };
        let minus = PoseSample { q: p.q * quat_exp(&(-e)), ..*p };
        let fd = (residual_raw(id, alpha, &plus) - residual_raw(id, alpha, &minus)) / (2.0 * step);
        compare(&fd, eval.j_pi.column(c));
    }
    let mut work = alpha.to_vec();
    for c in 0..alpha.len() {
        work[c] = alpha[c] + step;
        let plus = residual_raw(id, &work, p);
        work[c] = alpha[c] - step;
        let minus = residual_raw(id, &work, p);
        work[c] = alpha[c];
        let fd = (plus - minus) / (2.0 * step);
        compare(&fd, eval.j_alpha.column(c));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(r: Vec3, q: Quat) -> PoseSample {
        PoseSample { t: 0.0, r, q }
    }

    fn axial(l: f64, slip: Option<SlipAxisParams>) -> ModelParams {
        ModelParams::Axial(AxialParams {
            w: ExpCoords::ZERO,
            d: Vec3::zeros(),
            l_bar: Vec3::x(),
            t_bar: Vec3::y(),
            l,
            slip,
        })
    }

    #[test]
    fn catalog_strings_roundtrip() {
        let names: Vec<String> = ModelId::all().map(|m| m.to_string()).collect();
        assert_eq!(names[0], "axial.rigid");
        assert_eq!(names[8], "planar.free");
        for (i, id) in ModelId::all().enumerate() {
            assert_eq!(id.index(), i);
            assert_eq!(ModelId::from_index(i), id);
            assert_eq!(id.to_string().parse::<ModelId>().unwrap(), id);
        }
        assert!("screw.rigid".parse::<ModelId>().is_err());
    }

    #[test]
    fn dof_counts() {
        let dof = |s: &str| count_dof(s.parse().unwrap());
        assert_eq!(dof("axial.rigid"), 1);
        assert_eq!(dof("axial.slip"), 2);
        assert_eq!(dof("axial.free"), 4);
        assert_eq!(dof("planar.free"), 5);
        assert_eq!(dof("prismatic.slip"), 2);
        assert_eq!(dof("planar.rigid"), 3);
    }

    #[test]
    fn axial_free_on_and_off_circle() {
        let id: ModelId = "axial.free".parse().unwrap();
        let e = phi(id, &axial(1.0, None), &pose(Vec3::x(), Quat::identity())).unwrap();
        assert_relative_eq!(e.phi, DVector::from_vec(vec![0.0, 0.0]));
        let e = phi(id, &axial(1.0, None), &pose(2.0 * Vec3::x(), Quat::identity())).unwrap();
        assert_relative_eq!(e.phi, DVector::from_vec(vec![0.0, 3.0]));
    }

    #[test]
    fn axial_slip_aligned_axis() {
        let id: ModelId = "axial.slip".parse().unwrap();
        let slip = SlipAxisParams {
            u: Vec3::x(),
            v: Vec3::y(),
            s_bar: Vec3::z(),
        };
        let e = phi(id, &axial(1.0, Some(slip)), &pose(Vec3::x(), Quat::identity())).unwrap();
        assert_eq!(e.len(), 4);
        assert_relative_eq!(e.phi[2], 0.0);
        assert_relative_eq!(e.phi[3], 0.0);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let id: ModelId = "axial.slip".parse().unwrap();
        let bad = SlipAxisParams {
            u: Vec3::x(),
            v: Vec3::new(0.1, 1.0, 0.0).normalize(),
            s_bar: Vec3::z(),
        };
        let p = pose(Vec3::x(), Quat::identity());
        assert!(phi(id, &axial(1.0, Some(bad)), &p).is_err());
        assert!(phi(id, &axial(1.0, None), &p).is_err());
        assert!(phi("axial.free".parse().unwrap(), &axial(-1.0, None), &p).is_err());
        assert!(phi("planar.free".parse().unwrap(), &axial(1.0, None), &p).is_err());
    }

    #[test]
    fn free_modes_have_no_rotation_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for base in BaseArticulation::ALL {
            let id = ModelId::free(base);
            let alpha: Vec<f64> = (0..id.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = pose(Vec3::new(0.3, -0.2, 0.5), axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.8));
            let e = eval_raw(id, &alpha, &p);
            assert!(e.j_pi.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in ModelId::all() {
            for _ in 0..5 {
                let mut alpha: Vec<f64> =
                    (0..id.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
                alpha[0] *= 0.5;
                alpha[1] *= 0.5;
                let q = axis_angle(
                    &Vec3::new(rng.random(), rng.random(), rng.random()),
                    rng.random_range(-3.0..3.0),
                );
                let p = pose(Vec3::new(rng.random(), rng.random(), rng.random()), q);
                let dev = jacobians_fd_check_raw(id, &alpha, &p, 1e-6);
                assert!(dev < 1e-5, "{id}: {dev}");
            }
        }
    }

    #[test]
    fn phi_invariant_under_quaternion_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in ModelId::all() {
            let alpha: Vec<f64> = (0..id.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = axis_angle(&Vec3::new(0.2, 0.7, -0.1), 1.3);
            let neg = Quat::new_unchecked(-q.into_inner());
            let a = residual_raw(id, &alpha, &pose(Vec3::new(0.1, 0.2, 0.3), q));
            let b = residual_raw(id, &alpha, &pose(Vec3::new(0.1, 0.2, 0.3), neg));
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn axial_rigid_vanishes_along_its_sweep() {
        let w = ExpCoords::new(0.4, -0.3);
        let n = w.axis();
        let d = Vec3::new(0.2, -0.1, 0.4);
        let q0 = axis_angle(&Vec3::new(0.3, 0.5, 0.8), 0.9);
        let r0 = d + 0.35 * w.rotation() * Vec3::x();
        let a0 = quat_to_matrix(&q0);
        let l_bar = a0.transpose() * (d - r0);
        let t_bar = (a0.transpose() * n.cross(&(d - r0))).normalize();
        let params = ModelParams::Axial(AxialParams {
            w,
            d,
            l_bar,
            t_bar,
            l: l_bar.norm(),
            slip: None,
        });
        let id: ModelId = "axial.rigid".parse().unwrap();
        for k in 0..20 {
            let theta = -1.0 + 0.1 * k as f64;
            let rot = axis_angle(&n, theta);
            let p = pose(d + rot * (r0 - d), rot * q0);
            let e = phi(id, &params, &p).unwrap();
            assert!(e.phi.amax() < 1e-12, "theta {theta}: {}", e.phi);
        }
    }

    #[test]
    fn vector_roundtrip_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in ModelId::all() {
            let alpha: Vec<f64> = (0..id.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let params = ModelParams::from_vector(id, &alpha).unwrap();
            let back = params.to_vector(id).unwrap();
            if !(id.base == BaseArticulation::Prismatic && id.mode == OrientationMode::Rigid) {
                assert_relative_eq!(back.as_slice(), alpha.as_slice());
            }
            let mut norm = alpha.clone();
            normalize_vector(id, &mut norm);
            let params = ModelParams::from_vector(id, &norm).unwrap();
            assert!(params.validate(id).is_ok(), "{id}: {:?}", params.validate(id));
        }
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in ModelId::all() {
            let alpha: Vec<f64> = (0..id.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pens = penalties(id, &alpha);
            for (k, pen) in pens.iter().enumerate() {
                let mut dense = vec![0.0; alpha.len()];
                for (c, g) in &pen.grad {
                    dense[*c] += g;
                }
                for c in 0..alpha.len() {
                    let mut a = alpha.clone();
                    a[c] += 1e-6;
                    let hi = penalties(id, &a)[k].value;
                    a[c] -= 2e-6;
                    let lo = penalties(id, &a)[k].value;
                    assert!(((hi - lo) / 2e-6 - dense[c]).abs() < 1e-6);
                }
            }
        }
    }
}
