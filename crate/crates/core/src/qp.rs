//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀHx + gᵀx + c
//! subject to  G x ≤ h,  lb ≤ x ≤ ub,  (Ex − d)ᵀ S (Ex − d) ≤ r
//! ```
//!
//! with an operator-splitting iteration in the style of OSQP: the constraints
//! are written as `Ax = z`, `z ∈ 𝒞`, where `𝒞` is a product of half-lines,
//! intervals and at most one ellipsoid. Each iteration solves one linear
//! system with a cached Cholesky factor and projects onto `𝒞`. Data are
//! equilibrated first, the penalty is adapted from the residual ratio, primal
//! infeasibility is certified from the dual iterates, and a converged answer
//! is refined by solving the KKT system on the identified active set.

use alloc::vec::Vec;
use core::fmt;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
#[allow(unused_imports)]
use num_traits::Float;

use crate::linalg::{asymmetry, inf_norm, min_eigenvalue};
use crate::Clock;

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    Dimension { what: &'static str, expected: usize, found: usize },
    NotSymmetric(f64),
    NotPsd { what: &'static str, min_eigenvalue: f64 },
    InvalidBounds(usize),
    InvalidSettings(&'static str),
}

impl fmt::Display for QpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QpError::Dimension { what, expected, found } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, found {found}")
            }
            QpError::NotSymmetric(a) => write!(f, "Hessian is not symmetric (asymmetry {a:e})"),
            QpError::NotPsd { what, min_eigenvalue } => {
                write!(f, "{what} is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")
            }
            QpError::InvalidBounds(i) => write!(f, "variable {i} has lower bound above upper bound"),
            QpError::InvalidSettings(what) => write!(f, "invalid solver setting: {what}"),
        }
    }
}

impl core::error::Error for QpError {}

fn dim(what: &'static str, expected: usize, found: usize) -> Result<(), QpError> {
    if expected == found {
        Ok(())
    } else {
        Err(QpError::Dimension { what, expected, found })
    }
}

/// `(E x − center)ᵀ shape (E x − center) ≤ radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidConstraint {
    pub map: DMatrix<f64>,
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius: f64,
}

impl EllipsoidConstraint {
    /// `(x − center)ᵀ shape (x − center) ≤ radius` directly on the decision variable.
    pub fn on_variables(center: DVector<f64>, shape: DMatrix<f64>, radius: f64) -> Self {
        let n = center.len();
        Self { map: DMatrix::identity(n, n), center, shape, radius }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let w = &self.map * x - &self.center;
        w.dot(&(&self.shape * &w))
    }

    /// Gradient of [`Self::value`].
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = &self.map * x - &self.center;
        self.map.transpose() * (&self.shape * w) * 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// Constant added to the reported objective.
    pub offset: f64,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub ellipsoid: Option<EllipsoidConstraint>,
}

impl QpProblem {
    /// Unconstrained problem `½ xᵀHx + gᵀx`.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            offset: 0.0,
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            ellipsoid: None,
        }
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h = h;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_ellipsoid(mut self, e: EllipsoidConstraint) -> Self {
        self.ellipsoid = Some(e);
        self
    }

    pub fn n(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x) + self.offset
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        dim("Hessian rows", n, self.hessian.nrows())?;
        dim("Hessian columns", n, self.hessian.ncols())?;
        dim("G columns", n, self.g.ncols())?;
        dim("h", self.g.nrows(), self.h.len())?;
        dim("lower bound", n, self.lower.len())?;
        dim("upper bound", n, self.upper.len())?;
        let scale = self.hessian.amax().max(1.0);
        let asym = asymmetry(&self.hessian);
        if asym > 1e-12 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        let lmin = min_eigenvalue(&self.hessian);
        if lmin < -1e-10 * scale {
            return Err(QpError::NotPsd { what: "Hessian", min_eigenvalue: lmin });
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] || self.lower[i].is_nan() || self.upper[i].is_nan() {
                return Err(QpError::InvalidBounds(i));
            }
        }
        if let Some(e) = &self.ellipsoid {
            dim("ellipsoid map columns", n, e.map.ncols())?;
            dim("ellipsoid center", e.map.nrows(), e.center.len())?;
            dim("ellipsoid shape", e.map.nrows(), e.shape.nrows())?;
            dim("ellipsoid shape", e.map.nrows(), e.shape.ncols())?;
            let s = e.shape.amax().max(1.0);
            let m = min_eigenvalue(&e.shape);
            if m < -1e-10 * s || asymmetry(&e.shape) > 1e-10 * s {
                return Err(QpError::NotPsd { what: "ellipsoid shape", min_eigenvalue: m });
            }
            if !(e.radius >= 0.0) {
                return Err(QpError::InvalidSettings("ellipsoid radius must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Absolute and relative tolerance of the splitting iteration and of the
    /// scaled KKT residuals required for [`QpStatus::Optimal`].
    pub eps: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub scaling_iterations: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 5000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            adaptive_rho: true,
            adaptive_interval: 25,
            scaling_iterations: 10,
            polish: true,
        }
    }
}

impl QpSettings {
    fn validate(&self) -> Result<(), QpError> {
        if !(self.eps > 0.0) || !(self.eps_infeasible > 0.0) {
            return Err(QpError::InvalidSettings("tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(QpError::InvalidSettings("max_iter must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(QpError::InvalidSettings("alpha must lie in (0, 2)"));
        }
        if !(self.sigma > 0.0 && self.rho > 0.0) {
            return Err(QpError::InvalidSettings("sigma and rho must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl QpStatus {
    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max-iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

/// Lagrange multipliers: `ineq ≥ 0` for `Gx ≤ h`; `bounds` signed (positive
/// at an active upper bound, negative at an active lower bound); `ellipsoid ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpDuals {
    pub ineq: DVector<f64>,
    pub bounds: DVector<f64>,
    pub ellipsoid: f64,
}

impl QpDuals {
    pub fn zeros(problem: &QpProblem) -> Self {
        Self { ineq: DVector::zeros(problem.g.nrows()), bounds: DVector::zeros(problem.n()), ellipsoid: 0.0 }
    }
}

/// Scaled KKT residuals; each is normalized by the magnitude of the terms it
/// balances, so they are comparable to a relative tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Evidence that no feasible point exists: a nonzero `y` with `Aᵀy ≈ 0` and
/// negative support function of the constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    pub ineq: DVector<f64>,
    pub bounds: DVector<f64>,
    pub ellipsoid: DVector<f64>,
    /// `‖Aᵀy‖∞ / ‖y‖∞`
    pub residual: f64,
    /// `σ_𝒞(y) / ‖y‖∞`, negative for a valid certificate.
    pub support: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time: f64,
    pub residuals: KktResiduals,
    pub duals: QpDuals,
    pub polished: bool,
    pub certificate: Option<InfeasibilityCertificate>,
}

/// KKT residuals of `(x, duals)` for `problem`.
pub fn kkt_residuals(problem: &QpProblem, x: &DVector<f64>, duals: &QpDuals) -> KktResiduals {
    let hx = &problem.hessian * x;
    let gt_l = problem.g.transpose() * &duals.ineq;
    let mut grad = &hx + &problem.gradient + &gt_l + &duals.bounds;
    let mut scale = inf_norm(&hx).max(inf_norm(&problem.gradient)).max(inf_norm(&gt_l)).max(inf_norm(&duals.bounds));
    let mut primal = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut dual = 0.0_f64;

    let gx = &problem.g * x;
    for i in 0..problem.g.nrows() {
        let row_scale = 1.0 + gx[i].abs().max(problem.h[i].abs());
        let slack = problem.h[i] - gx[i];
        primal = primal.max((-slack).max(0.0) / row_scale);
        let l = duals.ineq[i];
        dual = dual.max((-l).max(0.0) / (1.0 + inf_norm(&duals.ineq)));
        comp = comp.max((l.abs() * slack.abs()).min(l.abs() * row_scale) / (row_scale * (1.0 + l.abs())));
    }
    for j in 0..problem.n() {
        let (lb, ub, v) = (problem.lower[j], problem.upper[j], x[j]);
        let row_scale = 1.0 + v.abs();
        primal = primal.max((lb - v).max(v - ub).max(0.0) / row_scale);
        let nu = duals.bounds[j];
        let slack = if nu > 0.0 {
            ub - v
        } else if nu < 0.0 {
            v - lb
        } else {
            0.0
        };
        if !slack.is_finite() {
            dual = dual.max(nu.abs() / (1.0 + nu.abs()));
        } else {
            comp = comp.max(nu.abs() * slack.abs() / (row_scale * (1.0 + nu.abs())));
        }
    }
    if let Some(e) = &problem.ellipsoid {
        let q = e.value(x);
        let row_scale = 1.0 + e.radius;
        primal = primal.max((q - e.radius).max(0.0) / row_scale);
        let mu = duals.ellipsoid;
        dual = dual.max((-mu).max(0.0) / (1.0 + mu.abs()));
        comp = comp.max(mu.abs() * (e.radius - q).abs() / (row_scale * (1.0 + mu.abs())));
        let eg = e.gradient(x) * mu;
        scale = scale.max(inf_norm(&eg));
        grad += eg;
    }
    KktResiduals { stationarity: inf_norm(&grad) / (1.0 + scale), primal, dual, complementarity: comp }
}

/// Kind of a row of the stacked constraint matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Row {
    /// `z ≤ hi`
    Half { index: usize },
    /// `lo ≤ z ≤ hi` on variable `index`
    Bound { index: usize },
}

/// Equilibrated problem data for the splitting iteration.
struct Scaled {
    /// variable scaling, `x = D x̂`
    d: DVector<f64>,
    /// row scaling of the linear rows
    e: DVector<f64>,
    /// scalar scaling of the ellipsoid rows
    e_ell: f64,
    cost: f64,
    p: DMatrix<f64>,
    q: DVector<f64>,
    /// stacked `[linear rows; ellipsoid rows]`
    a: DMatrix<f64>,
    rows: Vec<Row>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    ell: Option<ScaledEllipsoid>,
}

struct ScaledEllipsoid {
    center: DVector<f64>,
    vecs: DMatrix<f64>,
    vals: DVector<f64>,
    radius: f64,
}

impl ScaledEllipsoid {
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.vecs.transpose() * (v - &self.center);
        let phi = |mu: f64| -> f64 {
            w.iter().zip(self.vals.iter()).map(|(wi, li)| li * (wi / (1.0 + mu * li)).powi(2)).sum::<f64>()
        };
        if phi(0.0) <= self.radius {
            return v.clone();
        }
        if self.radius <= 0.0 {
            // degenerate ellipsoid: keep only the null-space part
            let proj = DVector::from_iterator(
                w.len(),
                w.iter().zip(self.vals.iter()).map(|(wi, li)| if *li > 0.0 { 0.0 } else { *wi }),
            );
            return &self.center + &self.vecs * proj;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while phi(hi) > self.radius {
            lo = hi;
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        // Newton on φ(μ) = r, safeguarded by the bracket
        let mut mu = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = phi(mu) - self.radius;
            if f > 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            let df: f64 =
                w.iter().zip(self.vals.iter()).map(|(wi, li)| -2.0 * li * li * wi * wi / (1.0 + mu * li).powi(3)).sum();
            let mut next = if df < 0.0 { mu - f / df } else { 0.5 * (lo + hi) };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - mu).abs() <= 1e-15 * mu.max(1e-300) || hi - lo <= 1e-15 * hi {
                mu = next;
                break;
            }
            mu = next;
        }
        // the upper end of the bracket is always feasible
        if phi(mu) > self.radius {
            mu = hi;
        }
        let proj = DVector::from_iterator(w.len(), w.iter().zip(self.vals.iter()).map(|(wi, li)| wi / (1.0 + mu * li)));
        &self.center + &self.vecs * proj
    }

    fn support(&self, y: &DVector<f64>) -> Option<f64> {
        // y must lie in the range of the shape for a finite support value
        let w = self.vecs.transpose() * y;
        let tiny = 1e-9 * inf_norm(y).max(1e-300);
        let lmax = self.vals.amax();
        let mut quad = 0.0;
        for (wi, li) in w.iter().zip(self.vals.iter()) {
            if *li <= 1e-12 * lmax {
                if wi.abs() > tiny {
                    return None;
                }
            } else {
                quad += wi * wi / li;
            }
        }
        Some(y.dot(&self.center) + (self.radius * quad).sqrt())
    }
}

fn col_norm(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn row_norm(m: &DMatrix<f64>, i: usize) -> f64 {
    m.row(i).iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn safe_inv_sqrt(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        1.0 / v.min(1e4).sqrt()
    }
}

impl Scaled {
    fn new(problem: &QpProblem, iterations: usize) -> Self {
        let n = problem.n();
        let mut rows = Vec::new();
        for i in 0..problem.g.nrows() {
            if problem.h[i].is_finite() {
                rows.push(Row::Half { index: i });
            }
        }
        for j in 0..n {
            if problem.lower[j].is_finite() || problem.upper[j].is_finite() {
                rows.push(Row::Bound { index: j });
            }
        }
        let m_lin = rows.len();
        let m_ell = problem.ellipsoid.as_ref().map_or(0, |e| e.map.nrows());
        let mut a0 = DMatrix::zeros(m_lin + m_ell, n);
        for (r, row) in rows.iter().enumerate() {
            match *row {
                Row::Half { index } => a0.row_mut(r).copy_from(&problem.g.row(index)),
                Row::Bound { index } => a0[(r, index)] = 1.0,
            }
        }
        if let Some(e) = &problem.ellipsoid {
            a0.view_mut((m_lin, 0), (m_ell, n)).copy_from(&e.map);
        }

        let mut d = DVector::from_element(n, 1.0);
        let mut er = DVector::from_element(m_lin + m_ell, 1.0);
        let mut p = problem.hessian.clone();
        let mut a = a0.clone();
        for _ in 0..iterations {
            let dd = DVector::from_iterator(n, (0..n).map(|j| safe_inv_sqrt(col_norm(&p, j).max(col_norm(&a, j)))));
            let mut de =
                DVector::from_iterator(m_lin + m_ell, (0..m_lin + m_ell).map(|i| safe_inv_sqrt(row_norm(&a, i))));
            if m_ell > 0 {
                let mean = de.rows(m_lin, m_ell).mean();
                de.rows_mut(m_lin, m_ell).fill(mean);
            }
            for j in 0..n {
                d[j] *= dd[j];
            }
            for i in 0..m_lin + m_ell {
                er[i] *= de[i];
            }
            p = DMatrix::from_fn(n, n, |i, j| problem.hessian[(i, j)] * d[i] * d[j]);
            a = DMatrix::from_fn(m_lin + m_ell, n, |i, j| a0[(i, j)] * er[i] * d[j]);
        }
        let q0 = problem.gradient.component_mul(&d);
        let mean_col = if n > 0 { (0..n).map(|j| col_norm(&p, j)).sum::<f64>() / n as f64 } else { 1.0 };
        let cost = (1.0 / mean_col.max(inf_norm(&q0)).max(1e-4)).min(1e4);
        let p = p * cost;
        let q = q0 * cost;

        let mut lo = DVector::zeros(m_lin);
        let mut hi = DVector::zeros(m_lin);
        for (r, row) in rows.iter().enumerate() {
            match *row {
                Row::Half { index } => {
                    lo[r] = f64::NEG_INFINITY;
                    hi[r] = problem.h[index] * er[r];
                }
                Row::Bound { index } => {
                    lo[r] = problem.lower[index] * er[r];
                    hi[r] = problem.upper[index] * er[r];
                }
            }
        }
        let e_ell = if m_ell > 0 { er[m_lin] } else { 1.0 };
        let ell = problem.ellipsoid.as_ref().map(|e| {
            let eig = SymmetricEigen::new(crate::linalg::symmetrize(&e.shape));
            ScaledEllipsoid {
                center: &e.center * e_ell,
                vecs: eig.eigenvectors,
                vals: eig.eigenvalues.map(|l| l.max(0.0) / (e_ell * e_ell)),
                radius: e.radius,
            }
        });
        Self { d, e: er.rows(0, m_lin).into_owned(), e_ell, cost, p, q, a, rows, lo, hi, ell }
    }

    fn m_lin(&self) -> usize {
        self.rows.len()
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        let m = self.m_lin();
        for i in 0..m {
            out[i] = v[i].max(self.lo[i]).min(self.hi[i]);
        }
        if let Some(e) = &self.ell {
            let k = v.len() - m;
            let p = e.project(&v.rows(m, k).into_owned());
            out.rows_mut(m, k).copy_from(&p);
        }
        out
    }

    fn unscale_x(&self, xs: &DVector<f64>) -> DVector<f64> {
        xs.component_mul(&self.d)
    }

    fn scale_x(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_div(&self.d)
    }

    /// Unscaled duals from the stacked scaled multiplier.
    fn unscale_duals(&self, problem: &QpProblem, ys: &DVector<f64>, x: &DVector<f64>) -> QpDuals {
        let mut duals = QpDuals::zeros(problem);
        for (r, row) in self.rows.iter().enumerate() {
            let y = ys[r] * self.e[r] / self.cost;
            match *row {
                Row::Half { index } => duals.ineq[index] = y,
                Row::Bound { index } => duals.bounds[index] = y,
            }
        }
        if let Some(e) = &problem.ellipsoid {
            let m = self.m_lin();
            let ye = ys.rows(m, ys.len() - m) * (self.e_ell / self.cost);
            let w = &e.map * x - &e.center;
            // y_e = 2μ S (E x − d)  ⇒  μ = y_eᵀ(Ex − d) / (2 (Ex − d)ᵀS(Ex − d))
            let q = w.dot(&(&e.shape * &w));
            duals.ellipsoid = if q > 0.0 { (ye.dot(&w) / (2.0 * q)).max(0.0) } else { 0.0 };
        }
        duals
    }
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
}

impl Factor {
    fn new(s: &Scaled, sigma: f64, rho: &DVector<f64>) -> Option<Self> {
        let n = s.p.nrows();
        let mut k = &s.p + DMatrix::<f64>::identity(n, n) * sigma;
        for i in 0..s.a.nrows() {
            let row = s.a.row(i);
            k += row.transpose() * row * rho[i];
        }
        Cholesky::new(crate::linalg::symmetrize(&k)).map(|chol| Self { chol })
    }
}

fn rho_vector(s: &Scaled, rho: f64) -> DVector<f64> {
    let m = s.a.nrows();
    DVector::from_iterator(m, (0..m).map(|i| if i < s.m_lin() && s.lo[i] == s.hi[i] { 1e3 * rho } else { rho }))
}

/// Solves `problem`; timing uses `clock`.
pub fn solve_with_clock<C: Clock + ?Sized>(
    problem: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
    clock: &C,
) -> Result<QpSolution, QpError> {
    let t0 = clock.now();
    problem.validate()?;
    settings.validate()?;
    if let Some(w) = warm_start {
        dim("warm start", problem.n(), w.len())?;
    }
    let mut sol = admm(problem, warm_start, settings);
    sol.solve_time = (clock.now() - t0).max(0.0);
    Ok(sol)
}

/// Solves `problem` without timing.
pub fn solve(
    problem: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    solve_with_clock(problem, warm_start, settings, &crate::NullClock)
}

fn admm(problem: &QpProblem, warm_start: Option<&DVector<f64>>, st: &QpSettings) -> QpSolution {
    let s = Scaled::new(problem, st.scaling_iterations);
    let n = problem.n();
    let m = s.a.nrows();

    let mut x = warm_start.map_or_else(|| DVector::zeros(n), |w| s.scale_x(w));
    let mut z = s.project(&(&s.a * &x));
    let mut y = DVector::<f64>::zeros(m);
    let mut rho_scalar = st.rho;
    let mut rho = rho_vector(&s, rho_scalar);
    let mut factor = match Factor::new(&s, st.sigma, &rho) {
        Some(f) => f,
        None => return fallback_solution(problem, &s, &x, &y, 0),
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut certificate = None;
    for it in 1..=st.max_iter {
        iterations = it;
        let rhs = &x * st.sigma - &s.q + s.a.transpose() * (rho.component_mul(&z) - &y);
        let x_tilde = factor.chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        let x_next = &x_tilde * st.alpha + &x * (1.0 - st.alpha);
        let z_relaxed = &z_tilde * st.alpha + &z * (1.0 - st.alpha);
        let z_next = s.project(&(&z_relaxed + y.component_div(&rho)));
        let y_next = &y + rho.component_mul(&(&z_relaxed - &z_next));
        let dy = &y_next - &y;
        x = x_next;
        z = z_next;
        y = y_next;

        if it % 5 == 0 || it == st.max_iter {
            let (rp, rd, scale_p, scale_d) = residuals(&s, &x, &z, &y);
            if rp <= st.eps * (1.0 + scale_p) && rd <= st.eps * (1.0 + scale_d) {
                converged = true;
                break;
            }
            if let Some(c) = primal_infeasibility(&s, problem, &dy, st.eps_infeasible) {
                certificate = Some(c);
                break;
            }
            if st.adaptive_rho && it % st.adaptive_interval == 0 {
                let ratio = ((rp / scale_p.max(1e-12)) / (rd / scale_d.max(1e-12)).max(1e-30)).sqrt();
                let new_rho = (rho_scalar * ratio).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho_scalar || new_rho < 0.2 * rho_scalar {
                    rho_scalar = new_rho;
                    rho = rho_vector(&s, rho_scalar);
                    match Factor::new(&s, st.sigma, &rho) {
                        Some(f) => factor = f,
                        None => break,
                    }
                }
            }
        }
    }

    let x_un = s.unscale_x(&x);
    if let Some(cert) = certificate {
        let duals = QpDuals::zeros(problem);
        return QpSolution {
            objective: problem.objective(&x_un),
            residuals: kkt_residuals(problem, &x_un, &duals),
            x: x_un,
            status: QpStatus::Infeasible,
            iterations,
            solve_time: 0.0,
            duals,
            polished: false,
            certificate: Some(cert),
        };
    }

    let duals = s.unscale_duals(problem, &y, &x_un);
    let mut best_x = x_un;
    let mut best_duals = duals;
    let mut best_res = kkt_residuals(problem, &best_x, &best_duals);
    let mut polished = false;
    if st.polish {
        let hint = ActiveHint::from_admm(&s, problem, &z, &y, &best_x);
        if let Some((px, pd)) = polish(problem, &best_x, &best_duals, hint) {
            let pr = kkt_residuals(problem, &px, &pd);
            if pr.max() < best_res.max() || pr.max() <= st.eps {
                best_x = px;
                best_duals = pd;
                best_res = pr;
                polished = true;
            }
        }
    }
    let status = if best_res.max() <= st.eps || (converged && best_res.max() <= 10.0 * st.eps && !st.polish) {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIterations
    };
    QpSolution {
        objective: problem.objective(&best_x),
        x: best_x,
        status,
        iterations,
        solve_time: 0.0,
        residuals: best_res,
        duals: best_duals,
        polished,
        certificate: None,
    }
}

fn fallback_solution(
    problem: &QpProblem,
    s: &Scaled,
    x: &DVector<f64>,
    y: &DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let xu = s.unscale_x(x);
    let duals = s.unscale_duals(problem, y, &xu);
    QpSolution {
        objective: problem.objective(&xu),
        residuals: kkt_residuals(problem, &xu, &duals),
        x: xu,
        status: QpStatus::MaxIterations,
        iterations,
        solve_time: 0.0,
        duals,
        polished: false,
        certificate: None,
    }
}

/// Unscaled primal and dual residuals of the splitting iteration with their normalizers.
fn residuals(s: &Scaled, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (f64, f64, f64, f64) {
    let ax = &s.a * x;
    let m_lin = s.m_lin();
    let unscale_rows = |v: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(v.len(), (0..v.len()).map(|i| v[i] / if i < m_lin { s.e[i] } else { s.e_ell }))
    };
    let rp = inf_norm(&unscale_rows(&(&ax - z)));
    let scale_p = inf_norm(&unscale_rows(&ax)).max(inf_norm(&unscale_rows(z)));
    let px = &s.p * x;
    let aty = s.a.transpose() * y;
    let inv = |v: &DVector<f64>| v.component_div(&s.d) / s.cost;
    let rd = inf_norm(&inv(&(&px + &s.q + &aty)));
    let scale_d = inf_norm(&inv(&px)).max(inf_norm(&inv(&aty))).max(inf_norm(&inv(&s.q)));
    (rp, rd, scale_p, scale_d)
}

fn primal_infeasibility(
    s: &Scaled,
    problem: &QpProblem,
    dy: &DVector<f64>,
    eps: f64,
) -> Option<InfeasibilityCertificate> {
    let m_lin = s.m_lin();
    // project onto the polar of the recession cone: no weight on infinite sides
    let mut y = dy.clone();
    for i in 0..m_lin {
        if !s.hi[i].is_finite() && y[i] > 0.0 {
            y[i] = 0.0;
        }
        if !s.lo[i].is_finite() && y[i] < 0.0 {
            y[i] = 0.0;
        }
    }
    // unscaled norm of the direction
    let mut y_norm = 0.0_f64;
    for i in 0..y.len() {
        let e = if i < m_lin { s.e[i] } else { s.e_ell };
        y_norm = y_norm.max((y[i] * e).abs());
    }
    if y_norm < 1e-30 {
        return None;
    }
    let aty = (s.a.transpose() * &y).component_div(&s.d);
    let residual = inf_norm(&aty) / y_norm;
    if residual > eps {
        return None;
    }
    let mut support = 0.0;
    for i in 0..m_lin {
        if y[i] > 0.0 {
            support += s.hi[i] * y[i];
        } else if y[i] < 0.0 {
            support += s.lo[i] * y[i];
        }
    }
    if let Some(e) = &s.ell {
        let ye = y.rows(m_lin, y.len() - m_lin).into_owned();
        support += e.support(&ye)?;
    }
    let support = support / y_norm;
    if !(support < -eps) {
        return None;
    }
    let mut ineq = DVector::zeros(problem.g.nrows());
    let mut bounds = DVector::zeros(problem.n());
    for (r, row) in s.rows.iter().enumerate() {
        match *row {
            Row::Half { index } => ineq[index] = y[r] * s.e[r] / y_norm,
            Row::Bound { index } => bounds[index] = y[r] * s.e[r] / y_norm,
        }
    }
    let ellipsoid = y.rows(m_lin, y.len() - m_lin) * (s.e_ell / y_norm);
    Some(InfeasibilityCertificate { ineq, bounds, ellipsoid, residual, support })
}

/// Active-set guess: `+1` upper active, `−1` lower active, `0` inactive.
struct ActiveHint {
    ineq: Vec<i8>,
    bounds: Vec<i8>,
    ellipsoid: bool,
}

impl ActiveHint {
    fn from_admm(s: &Scaled, problem: &QpProblem, z: &DVector<f64>, y: &DVector<f64>, x: &DVector<f64>) -> Self {
        let mut ineq = alloc::vec![0i8; problem.g.nrows()];
        let mut bounds = alloc::vec![0i8; problem.n()];
        for (r, row) in s.rows.iter().enumerate() {
            let state = if s.hi[r] - z[r] < y[r] {
                1
            } else if z[r] - s.lo[r] < -y[r] {
                -1
            } else {
                0
            };
            match *row {
                Row::Half { index } => ineq[index] = state.max(0),
                Row::Bound { index } => bounds[index] = state,
            }
        }
        let ellipsoid = problem.ellipsoid.as_ref().is_some_and(|e| {
            let m = s.m_lin();
            let ye = inf_norm(&y.rows(m, y.len() - m).into_owned());
            e.value(x) >= e.radius * (1.0 - 1e-6) || ye > 1e-9
        });
        Self { ineq, bounds, ellipsoid }
    }
}

/// Equality-constrained QP on the active set, optionally with the ellipsoid
/// penalized by a fixed multiplier `mu`.
fn solve_active(problem: &QpProblem, hint: &ActiveHint, mu: f64) -> Option<(DVector<f64>, QpDuals)> {
    let n = problem.n();
    let mut hess = problem.hessian.clone();
    let mut grad = problem.gradient.clone();
    if let Some(e) = &problem.ellipsoid {
        if mu > 0.0 {
            let ets = e.map.transpose() * &e.shape;
            hess += &ets * &e.map * (2.0 * mu);
            grad -= &ets * &e.center * (2.0 * mu);
        }
    }
    let mut rows: Vec<(DVector<f64>, f64, usize, bool)> = Vec::new();
    for (i, s) in hint.ineq.iter().enumerate() {
        if *s > 0 {
            rows.push((problem.g.row(i).transpose(), problem.h[i], i, true));
        }
    }
    for (j, s) in hint.bounds.iter().enumerate() {
        if *s != 0 {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let b = if *s > 0 { problem.upper[j] } else { problem.lower[j] };
            if !b.is_finite() {
                return None;
            }
            rows.push((e, b, j, false));
        }
    }
    let m = rows.len();
    let mut k0 = DMatrix::zeros(n + m, n + m);
    k0.view_mut((0, 0), (n, n)).copy_from(&hess);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&grad));
    for (r, (a, b, _, _)) in rows.iter().enumerate() {
        for c in 0..n {
            k0[(n + r, c)] = a[c];
            k0[(c, n + r)] = a[c];
        }
        rhs[n + r] = *b;
    }
    let delta = 1e-10 * hess.amax().max(1.0);
    let mut kreg = k0.clone();
    for i in 0..n {
        kreg[(i, i)] += delta;
    }
    for i in n..n + m {
        kreg[(i, i)] -= delta;
    }
    let lu: LU<f64, Dyn, Dyn> = kreg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let r = &rhs - &k0 * &sol;
        sol += lu.solve(&r)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut duals = QpDuals::zeros(problem);
    for (r, (_, _, idx, is_ineq)) in rows.iter().enumerate() {
        let l = sol[n + r];
        if *is_ineq {
            duals.ineq[*idx] = l;
        } else {
            duals.bounds[*idx] = l;
        }
    }
    duals.ellipsoid = mu;
    Some((x, duals))
}

/// Active-set solve with the ellipsoid multiplier found by a 1-D search so
/// that the ellipsoid constraint holds with equality.
fn solve_with_ellipsoid(problem: &QpProblem, hint: &ActiveHint, mu_guess: f64) -> Option<(DVector<f64>, QpDuals)> {
    let e = match (&problem.ellipsoid, hint.ellipsoid) {
        (Some(e), true) => e,
        _ => return solve_active(problem, hint, 0.0),
    };
    let excess = |mu: f64| -> Option<(f64, DVector<f64>, QpDuals)> {
        let (x, d) = solve_active(problem, hint, mu)?;
        Some((e.value(&x) - e.radius, x, d))
    };
    let (f0, x0, d0) = excess(0.0)?;
    if f0 <= 0.0 {
        return Some((x0, d0));
    }
    let mut lo = 0.0;
    let mut hi = if mu_guess > 0.0 { mu_guess } else { 1e-6 };
    let mut best = excess(hi)?;
    let mut grow = 0;
    while best.0 > 0.0 {
        lo = hi;
        hi *= 4.0;
        best = excess(hi)?;
        grow += 1;
        if grow > 200 {
            return None;
        }
    }
    // bisection in log space, keeping the feasible end
    for _ in 0..200 {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        if hi - lo <= 1e-15 * hi || mid <= lo || mid >= hi {
            break;
        }
        let cand = excess(mid)?;
        if cand.0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            best = cand;
        }
        if best.0.abs() <= 1e-13 * (1.0 + e.radius) {
            break;
        }
    }
    Some((best.1, best.2))
}

fn polish(
    problem: &QpProblem,
    x0: &DVector<f64>,
    d0: &QpDuals,
    mut hint: ActiveHint,
) -> Option<(DVector<f64>, QpDuals)> {
    let n = problem.n();
    let limit = 4 * (n + problem.g.nrows()) + 10;
    let mut mu_guess = d0.ellipsoid;
    let _ = x0;
    for _ in 0..limit {
        let (x, duals) = solve_with_ellipsoid(problem, &hint, mu_guess)?;
        mu_guess = duals.ellipsoid;
        let gx = &problem.g * &x;
        let tol_p = |b: f64| 1e-9 * (1.0 + b.abs());
        // most negative multiplier
        let mut worst_dual: Option<(bool, usize, f64)> = None;
        for (i, s) in hint.ineq.iter().enumerate() {
            if *s > 0
                && duals.ineq[i] < -1e-12 * (1.0 + inf_norm(&duals.ineq))
                && worst_dual.is_none_or(|w| duals.ineq[i] < w.2)
            {
                worst_dual = Some((true, i, duals.ineq[i]));
            }
        }
        for (j, s) in hint.bounds.iter().enumerate() {
            let signed = duals.bounds[j] * f64::from(*s);
            if *s != 0 && signed < -1e-12 * (1.0 + inf_norm(&duals.bounds)) && worst_dual.is_none_or(|w| signed < w.2) {
                worst_dual = Some((false, j, signed));
            }
        }
        // most violated inactive constraint
        let mut worst_primal: Option<(u8, usize, i8, f64)> = None;
        for i in 0..problem.g.nrows() {
            let v = (gx[i] - problem.h[i]) / (1.0 + problem.h[i].abs());
            if hint.ineq[i] == 0 && gx[i] - problem.h[i] > tol_p(problem.h[i]) && worst_primal.is_none_or(|w| v > w.3) {
                worst_primal = Some((0, i, 1, v));
            }
        }
        for j in 0..n {
            if hint.bounds[j] != 0 {
                continue;
            }
            let (lb, ub) = (problem.lower[j], problem.upper[j]);
            if x[j] - ub > tol_p(ub) {
                let v = (x[j] - ub) / (1.0 + ub.abs());
                if worst_primal.is_none_or(|w| v > w.3) {
                    worst_primal = Some((1, j, 1, v));
                }
            } else if lb - x[j] > tol_p(lb) {
                let v = (lb - x[j]) / (1.0 + lb.abs());
                if worst_primal.is_none_or(|w| v > w.3) {
                    worst_primal = Some((1, j, -1, v));
                }
            }
        }
        let ell_violated = problem
            .ellipsoid
            .as_ref()
            .is_some_and(|e| !hint.ellipsoid && e.value(&x) - e.radius > 1e-9 * (1.0 + e.radius));
        let ell_slack = hint.ellipsoid && duals.ellipsoid <= 0.0;

        if let Some((is_ineq, idx, _)) = worst_dual {
            if is_ineq {
                hint.ineq[idx] = 0;
            } else {
                hint.bounds[idx] = 0;
            }
            continue;
        }
        if ell_slack {
            hint.ellipsoid = false;
            continue;
        }
        if let Some((kind, idx, side, _)) = worst_primal {
            if kind == 0 {
                hint.ineq[idx] = side;
            } else {
                hint.bounds[idx] = side;
            }
            continue;
        }
        if ell_violated {
            hint.ellipsoid = true;
            continue;
        }
        return Some((x, duals));
    }
    None
}
