//! Receding-horizon controller.
//!
//! At each sample the scheduling trajectory is extrapolated, the LPV model is
//! frozen along it, and the condensed QP over `U = (u(k|k), …, u(k+N_p−1|k))`
//!
//! ```text
//! J_k = Σ_{j=0}^{N_p−1} ℓ(x̂(k+j|k), u(k+j|k)) + V(x̂(k+N_p|k) − x_r)
//! ℓ(x, u) = ‖x − x_r‖²_Q + ‖u − u_r‖²_R,    V(e) = ‖e‖²_P
//! ```
//!
//! is solved subject to the state, output and input boxes and, optionally,
//! `x̂(k+N_p|k) − x_r ∈ X_f`. In output weight space the state term becomes
//! `‖ŷ − y_r‖²_Q`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use nalgebra::{DMatrix, DVector};

use crate::error::ModelError;
use crate::horizon::{build_prediction, PredictionMatrices};
use crate::linalg::{asymmetry, min_eigenvalue};
use crate::model::{eval_matrices, scheduling_proxy_clamped, Qlpv};
use crate::qp::{self, EllipsoidConstraint, QpError, QpProblem, QpSettings, QpStatus};
use crate::schedule::{anchored_taylor, build_state_deltas, frozen_trajectory, init_trajectory, taylor_update};
use crate::schedule::{Predictor, SchedulingTrajectory};
use crate::terminal::TerminalIngredients;
use crate::Clock;

/// L1 weight on softened state/output violations.
pub const DEFAULT_SOFT_WEIGHT: f64 = 1e6;
/// Tolerance of the shifted-candidate feasibility check.
pub const CANDIDATE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum MpcError {
    Config(String),
    Dimension { what: &'static str, expected: usize, found: usize },
    MissingTerminal,
    Model(ModelError),
    Qp(QpError),
    SteadyStateNotConverged { best_residual: f64, iterations: usize },
    InfeasibleTarget(String),
}

impl fmt::Display for MpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MpcError::Config(m) => write!(f, "invalid controller configuration: {m}"),
            MpcError::Dimension { what, expected, found } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, found {found}")
            }
            MpcError::MissingTerminal => write!(f, "terminal mode requires terminal ingredients"),
            MpcError::Model(e) => write!(f, "{e}"),
            MpcError::Qp(e) => write!(f, "{e}"),
            MpcError::SteadyStateNotConverged { best_residual, iterations } => {
                write!(f, "steady-state solve did not converge in {iterations} iterations (residual {best_residual:e})")
            }
            MpcError::InfeasibleTarget(m) => write!(f, "infeasible target: {m}"),
        }
    }
}

impl core::error::Error for MpcError {}

impl From<ModelError> for MpcError {
    fn from(e: ModelError) -> Self {
        MpcError::Model(e)
    }
}

impl From<QpError> for MpcError {
    fn from(e: QpError) -> Self {
        MpcError::Qp(e)
    }
}

fn dim(what: &'static str, expected: usize, found: usize) -> Result<(), MpcError> {
    if expected == found {
        Ok(())
    } else {
        Err(MpcError::Dimension { what, expected, found })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    #[default]
    None,
    CostOnly,
    CostAndSet,
}

impl TerminalMode {
    pub fn name(self) -> &'static str {
        match self {
            TerminalMode::None => "none",
            TerminalMode::CostOnly => "cost-only",
            TerminalMode::CostAndSet => "cost-and-set",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(TerminalMode::None),
            "cost-only" => Some(TerminalMode::CostOnly),
            "cost-and-set" => Some(TerminalMode::CostAndSet),
            _ => None,
        }
    }

    pub fn needs_ingredients(self) -> bool {
        self != TerminalMode::None
    }
}

/// Whether `Q` weights states or outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightSpace {
    #[default]
    State,
    Output,
}

impl WeightSpace {
    pub fn name(self) -> &'static str {
        match self {
            WeightSpace::State => "state",
            WeightSpace::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "state" => Some(WeightSpace::State),
            "output" => Some(WeightSpace::Output),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub n_p: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub weight_space: WeightSpace,
    pub predictor: Predictor,
    /// Evaluate the proxy Jacobian along the predicted states instead of only at `x(k)`.
    pub relinearize: bool,
    pub terminal_mode: TerminalMode,
    pub soft_weight: f64,
    pub qp: QpSettings,
}

impl MpcConfig {
    pub fn new(n_p: usize, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self {
            n_p,
            q,
            r,
            weight_space: WeightSpace::State,
            predictor: Predictor::Taylor,
            relinearize: false,
            terminal_mode: TerminalMode::None,
            soft_weight: DEFAULT_SOFT_WEIGHT,
            qp: QpSettings::default(),
        }
    }

    pub fn validate<M: Qlpv + ?Sized>(&self, model: &M) -> Result<(), MpcError> {
        let d = model.dims();
        if self.n_p < 2 {
            return Err(MpcError::Config(alloc::format!("horizon must be at least 2, got {}", self.n_p)));
        }
        let nq = match self.weight_space {
            WeightSpace::State => d.n_x,
            WeightSpace::Output => d.n_y,
        };
        dim("Q rows", nq, self.q.nrows())?;
        dim("Q columns", nq, self.q.ncols())?;
        dim("R rows", d.n_u, self.r.nrows())?;
        dim("R columns", d.n_u, self.r.ncols())?;
        let sq = self.q.amax().max(1.0);
        if asymmetry(&self.q) > 1e-12 * sq || min_eigenvalue(&self.q) < -1e-12 * sq {
            return Err(MpcError::Config("Q must be symmetric positive semidefinite".into()));
        }
        if asymmetry(&self.r) > 1e-12 * self.r.amax().max(1.0) || min_eigenvalue(&self.r) <= 0.0 {
            return Err(MpcError::Config("R must be symmetric positive definite".into()));
        }
        if !(self.soft_weight > 0.0 && self.soft_weight.is_finite()) {
            return Err(MpcError::Config("softening weight must be positive".into()));
        }
        Ok(())
    }
}

/// Equilibrium `(x_r, u_r)` producing the output `y_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStatePair {
    pub x_r: DVector<f64>,
    pub u_r: DVector<f64>,
    /// Physical output target (including the model's output offset).
    pub y_r: DVector<f64>,
    /// Infinity norm of the row-scaled equilibrium/output residual.
    pub residual: f64,
    pub iterations: usize,
}

impl SteadyStatePair {
    /// A pair taken as given, e.g. the origin for regulation.
    pub fn fixed<M: Qlpv + ?Sized>(model: &M, x_r: DVector<f64>, u_r: DVector<f64>) -> Result<Self, MpcError> {
        let rho = model.proxy(&x_r)?;
        let m = eval_matrices(model, &rho)?;
        let y_r = &m.c * &x_r + &m.d * &u_r + model.output_offset();
        let res = steady_residual(model, &x_r, &u_r, &y_r)?;
        let scale = row_scales(&x_r, &y_r);
        Ok(Self { residual: scaled_norm(&res, &scale), x_r, u_r, y_r, iterations: 0 })
    }
}

/// `[x − (A x + B u); C x + D u + offset − y_r]` at `ρ = f_ρ(x)`.
pub fn steady_residual<M: Qlpv + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y_r: &DVector<f64>,
) -> Result<DVector<f64>, MpcError> {
    let rho = model.proxy(x)?;
    let m = eval_matrices(model, &rho)?;
    let n_x = x.len();
    let mut r = DVector::zeros(n_x + y_r.len());
    r.rows_mut(0, n_x).copy_from(&(x - (&m.a * x + &m.b * u)));
    r.rows_mut(n_x, y_r.len()).copy_from(&(&m.c * x + &m.d * u + model.output_offset() - y_r));
    Ok(r)
}

fn row_scales(x: &DVector<f64>, y_r: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + y_r.len(), x.iter().chain(y_r.iter()).map(|v| v.abs().max(1.0)))
}

fn scaled_norm(r: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    r.iter().zip(scale.iter()).map(|(a, s)| (a / s).abs()).fold(0.0, f64::max)
}

/// Solves for the steady-state pair by damped Gauss-Newton on the stacked
/// residual, with a central finite-difference Jacobian and a pseudo-inverse
/// step (minimum-norm when the system is underdetermined).
pub fn steady_state_pair<M: Qlpv + ?Sized>(
    model: &M,
    y_r: &DVector<f64>,
    x_guess: &DVector<f64>,
    u_guess: &DVector<f64>,
) -> Result<SteadyStatePair, MpcError> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-8;
    let d = model.dims();
    dim("output target", d.n_y, y_r.len())?;
    dim("state guess", d.n_x, x_guess.len())?;
    dim("input guess", d.n_u, u_guess.len())?;
    let sets = model.sets();
    if !sets.output.contains(y_r) {
        return Err(MpcError::InfeasibleTarget("output target outside the output box".into()));
    }
    let nz = d.n_x + d.n_u;
    let row_scale = row_scales(x_guess, y_r);
    let col_scale = DVector::from_iterator(nz, x_guess.iter().chain(u_guess.iter()).map(|v| v.abs().max(1.0)));
    let split = |z: &DVector<f64>| (z.rows(0, d.n_x).into_owned(), z.rows(d.n_x, d.n_u).into_owned());
    let eval = |z: &DVector<f64>| -> Result<DVector<f64>, MpcError> {
        let (x, u) = split(z);
        let r = steady_residual(model, &x, &u, y_r)?;
        Ok(r.component_div(&row_scale))
    };
    let mut z = DVector::from_iterator(nz, x_guess.iter().chain(u_guess.iter()).copied());
    let mut r = eval(&z)?;
    let mut norm = r.amax();
    let mut merit = r.norm();
    let mut iterations = 0;
    while norm > TOL && iterations < MAX_ITER {
        iterations += 1;
        let mut jac = DMatrix::zeros(r.len(), nz);
        for j in 0..nz {
            let h = 1e-6 * col_scale[j];
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            // one-sided difference when the plus or minus side leaves the model domain
            let col = match (eval(&zp), eval(&zm)) {
                (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
                (Ok(a), Err(_)) => (a - &r) / h,
                (Err(_), Ok(b)) => (&r - b) / h,
                (Err(e), Err(_)) => return Err(e),
            };
            // columns scaled so the pseudo-inverse is unit-consistent
            jac.set_column(j, &(col * col_scale[j]));
        }
        let step = jac.svd(true, true).solve(&r, 1e-12).map_err(|e| MpcError::Config(String::from(e)))?;
        let dz = -step.component_mul(&col_scale);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &z + &dz * alpha;
            if let Ok(rc) = eval(&cand) {
                let mc = rc.norm();
                if mc < merit {
                    z = cand;
                    norm = rc.amax();
                    merit = mc;
                    r = rc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm > TOL {
        return Err(MpcError::SteadyStateNotConverged { best_residual: norm, iterations });
    }
    let (x_r, u_r) = split(&z);
    if !sets.state.contains_with_tol(&x_r, 1e-9) || !sets.input.contains_with_tol(&u_r, 1e-9) {
        return Err(MpcError::InfeasibleTarget("steady-state pair outside the state or input box".into()));
    }
    Ok(SteadyStatePair { x_r, u_r, y_r: y_r.clone(), residual: norm, iterations })
}

/// Layout of an assembled problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Ocp {
    pub qp: QpProblem,
    pub prediction: PredictionMatrices,
    /// Number of state rows, then output rows, in `qp.g` (each block ± bounds per step).
    pub state_rows: usize,
    pub output_rows: usize,
}

impl Ocp {
    /// State/output/input box rows, counting each input bound pair as two rows.
    pub fn box_row_count(&self) -> usize {
        self.state_rows + self.output_rows + 2 * self.qp.n()
    }
}

struct CostBuilder {
    h: DMatrix<f64>,
    g: DVector<f64>,
    offset: f64,
}

impl CostBuilder {
    fn new(n: usize) -> Self {
        Self { h: DMatrix::zeros(n, n), g: DVector::zeros(n), offset: 0.0 }
    }

    /// Adds `‖M U + c‖²_W`.
    fn add(&mut self, m: &DMatrix<f64>, c: &DVector<f64>, w: &DMatrix<f64>) {
        let wm = w * m;
        let wc = w * c;
        self.h += (m.transpose() * &wm) * 2.0;
        self.g += (m.transpose() * &wc) * 2.0;
        self.offset += c.dot(&wc);
    }
}

/// Builds the condensed QP for the given scheduling trajectory.
pub fn assemble_ocp<M: Qlpv + ?Sized>(
    cfg: &MpcConfig,
    model: &M,
    traj: &SchedulingTrajectory,
    x_k: &DVector<f64>,
    target: &SteadyStatePair,
    terminal: Option<&TerminalIngredients>,
) -> Result<Ocp, MpcError> {
    dim("scheduling trajectory", cfg.n_p, traj.horizon())?;
    let prediction = build_prediction(model, traj)?;
    assemble_from_prediction(cfg, model, prediction, x_k, target, terminal)
}

pub fn assemble_from_prediction<M: Qlpv + ?Sized>(
    cfg: &MpcConfig,
    model: &M,
    pred: PredictionMatrices,
    x_k: &DVector<f64>,
    target: &SteadyStatePair,
    terminal: Option<&TerminalIngredients>,
) -> Result<Ocp, MpcError> {
    cfg.validate(model)?;
    let d = model.dims();
    let n_p = cfg.n_p;
    dim("prediction horizon", n_p, pred.n_p)?;
    dim("state", d.n_x, x_k.len())?;
    dim("target state", d.n_x, target.x_r.len())?;
    dim("target input", d.n_u, target.u_r.len())?;
    dim("target output", d.n_y, target.y_r.len())?;
    let terminal = match (cfg.terminal_mode.needs_ingredients(), terminal) {
        (true, None) => return Err(MpcError::MissingTerminal),
        (true, Some(t)) => {
            dim("terminal weight", d.n_x, t.p.nrows())?;
            Some(t)
        }
        (false, _) => None,
    };
    let nu = d.n_u * n_p;
    let mut cost = CostBuilder::new(nu);
    let free_x = &pred.cal_a * x_k;
    let offset_y = model.output_offset();
    let y_lpv = &target.y_r - &offset_y;

    match cfg.weight_space {
        WeightSpace::State => {
            let e0 = x_k - &target.x_r;
            cost.offset += e0.dot(&(&cfg.q * &e0));
            for j in 0..n_p - 1 {
                let rows = pred.cal_b.rows(j * d.n_x, d.n_x).into_owned();
                let c = free_x.rows(j * d.n_x, d.n_x) - &target.x_r;
                cost.add(&rows, &c, &cfg.q);
            }
        }
        WeightSpace::Output => {
            let free_y = &pred.cal_c * x_k;
            for j in 0..n_p {
                let rows = pred.cal_d.rows(j * d.n_y, d.n_y).into_owned();
                let c = free_y.rows(j * d.n_y, d.n_y) - &y_lpv;
                cost.add(&rows, &c, &cfg.q);
            }
        }
    }
    let eye = DMatrix::<f64>::identity(d.n_u, d.n_u);
    for j in 0..n_p {
        let mut sel = DMatrix::zeros(d.n_u, nu);
        sel.view_mut((0, j * d.n_u), (d.n_u, d.n_u)).copy_from(&eye);
        cost.add(&sel, &(-&target.u_r), &cfg.r);
    }
    let last_b = pred.cal_b.rows((n_p - 1) * d.n_x, d.n_x).into_owned();
    let last_free = free_x.rows((n_p - 1) * d.n_x, d.n_x).into_owned();
    if let Some(t) = terminal {
        cost.add(&last_b, &(&last_free - &target.x_r), &t.p);
    }

    // x̂ ∈ 𝒳 for x̂(k+1..k+N_p), ŷ ∈ 𝒴 for ŷ(k..k+N_p−1); every row is kept,
    // unbounded ones have an infinite right-hand side.
    let sets = model.sets();
    let state_rows = 2 * d.n_x * n_p;
    let output_rows = 2 * d.n_y * n_p;
    let mut g = DMatrix::zeros(state_rows + output_rows, nu);
    let mut h = DVector::zeros(state_rows + output_rows);
    let free_y =
        &pred.cal_c * x_k + DVector::from_iterator(d.n_y * n_p, (0..n_p).flat_map(|_| offset_y.iter().copied()));
    let mut fill =
        |row0: usize, n: usize, rows: &DMatrix<f64>, free: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>| {
            for j in 0..n_p {
                for i in 0..n {
                    let src = j * n + i;
                    let up = row0 + 2 * src;
                    g.row_mut(up).copy_from(&rows.row(src));
                    h[up] = hi[i] - free[src];
                    g.row_mut(up + 1).copy_from(&(-rows.row(src)));
                    h[up + 1] = free[src] - lo[i];
                }
            }
        };
    fill(0, d.n_x, &pred.cal_b, &free_x, sets.state.lower(), sets.state.upper());
    fill(state_rows, d.n_y, &pred.cal_d, &free_y, sets.output.lower(), sets.output.upper());

    let lower = DVector::from_iterator(nu, (0..n_p).flat_map(|_| sets.input.lower().iter().copied()));
    let upper = DVector::from_iterator(nu, (0..n_p).flat_map(|_| sets.input.upper().iter().copied()));
    let mut qp =
        QpProblem::new(crate::linalg::symmetrize(&cost.h), cost.g).with_inequalities(g, h).with_bounds(lower, upper);
    qp.offset = cost.offset;
    if cfg.terminal_mode == TerminalMode::CostAndSet {
        let t = terminal.ok_or(MpcError::MissingTerminal)?;
        qp = qp.with_ellipsoid(EllipsoidConstraint {
            map: last_b,
            center: &target.x_r - &last_free,
            shape: t.p.clone(),
            radius: t.level,
        });
    }
    Ok(Ocp { qp, prediction: pred, state_rows, output_rows })
}

/// Adds one nonnegative slack per state/output row, scaled by `1 + |h_i|`,
/// with an L1 penalty; input bounds stay hard.
fn soften(ocp: &Ocp, weight: f64, keep_terminal: bool) -> QpProblem {
    let base = &ocp.qp;
    let n = base.n();
    let m = base.g.nrows();
    let nt = n + m;
    let mut hess = DMatrix::zeros(nt, nt);
    hess.view_mut((0, 0), (n, n)).copy_from(&base.hessian);
    let mut grad = DVector::zeros(nt);
    grad.rows_mut(0, n).copy_from(&base.gradient);
    let mut g = DMatrix::zeros(m, nt);
    g.view_mut((0, 0), (m, n)).copy_from(&base.g);
    for i in 0..m {
        let s = if base.h[i].is_finite() { 1.0 + base.h[i].abs() } else { 1.0 };
        g[(i, n + i)] = -s;
        grad[n + i] = weight;
    }
    let mut lower = DVector::zeros(nt);
    let mut upper = DVector::from_element(nt, f64::INFINITY);
    lower.rows_mut(0, n).copy_from(&base.lower);
    upper.rows_mut(0, n).copy_from(&base.upper);
    let mut qp = QpProblem::new(hess, grad).with_inequalities(g, base.h.clone()).with_bounds(lower, upper);
    qp.offset = base.offset;
    if keep_terminal {
        if let Some(e) = &base.ellipsoid {
            let mut map = DMatrix::zeros(e.map.nrows(), nt);
            map.view_mut((0, 0), (e.map.nrows(), n)).copy_from(&e.map);
            qp = qp.with_ellipsoid(EllipsoidConstraint { map, ..e.clone() });
        }
    }
    qp
}

/// Maximum scaled violation of the constraints of `ocp` at `u`.
pub fn constraint_violation(ocp: &Ocp, u: &DVector<f64>) -> f64 {
    let qp = &ocp.qp;
    let mut worst: f64 = 0.0;
    let gu = &qp.g * u;
    for i in 0..gu.len() {
        if qp.h[i].is_finite() {
            worst = worst.max((gu[i] - qp.h[i]) / (1.0 + qp.h[i].abs()));
        }
    }
    for i in 0..u.len() {
        worst = worst.max((qp.lower[i] - u[i]) / (1.0 + qp.lower[i].abs()));
        worst = worst.max((u[i] - qp.upper[i]) / (1.0 + qp.upper[i].abs()));
    }
    if let Some(e) = &qp.ellipsoid {
        worst = worst.max((e.value(u) - e.radius) / (1.0 + e.radius));
    }
    worst.max(0.0)
}

/// Recursion memory between samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerState {
    pub trajectory: Option<SchedulingTrajectory>,
    /// `x̂(k+1|k), …, x̂(k+N_p|k)` from the last solve.
    pub predicted_states: Option<Vec<DVector<f64>>>,
    pub inputs: Option<DVector<f64>>,
    pub k: usize,
}

impl ControllerState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// Nominal problem solved.
    None,
    /// State/output boxes softened.
    Softened,
    /// Softened and the terminal set dropped.
    TerminalDropped,
    /// No solve succeeded; the shifted previous sequence was applied.
    Shifted,
}

impl Fallback {
    pub fn name(self) -> &'static str {
        match self {
            Fallback::None => "none",
            Fallback::Softened => "softened",
            Fallback::TerminalDropped => "terminal-dropped",
            Fallback::Shifted => "shifted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub rho: DVector<f64>,
    pub scheduling_clamped: bool,
    pub trajectory: SchedulingTrajectory,
    pub inputs: DVector<f64>,
    pub predicted_states: Vec<DVector<f64>>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Prediction build, assembly and solve time in seconds.
    pub compute_time: f64,
    /// `J_k` of the nominal problem at the applied sequence (penalties excluded).
    pub cost: f64,
    pub fallback: Fallback,
    /// Shifted-candidate feasibility (cost-and-set mode with a previous solve only).
    pub candidate_feasible: Option<bool>,
    pub candidate_violation: Option<f64>,
}

impl StepDiagnostics {
    pub fn softened(&self) -> bool {
        self.fallback != Fallback::None
    }
}

fn shift(prev: &DVector<f64>, n_u: usize, tail: &DVector<f64>) -> DVector<f64> {
    let mut out = prev.clone();
    let n = prev.len();
    out.rows_mut(0, n - n_u).copy_from(&prev.rows(n_u, n - n_u));
    out.rows_mut(n - n_u, n_u).copy_from(tail);
    out
}

fn next_trajectory<M: Qlpv + ?Sized>(
    ctrl: &ControllerState,
    cfg: &MpcConfig,
    model: &M,
    x_k: &DVector<f64>,
    rho: &DVector<f64>,
) -> Result<SchedulingTrajectory, MpcError> {
    let set = &model.sets().scheduling;
    let (prev_traj, prev_states) = match (&ctrl.trajectory, &ctrl.predicted_states) {
        (Some(t), Some(s)) if ctrl.k > 0 && t.horizon() == cfg.n_p => (t, s),
        _ => return Ok(init_trajectory(set, rho, cfg.n_p)?),
    };
    if cfg.predictor == Predictor::Frozen {
        return Ok(frozen_trajectory(set, rho, cfg.n_p, ctrl.k)?);
    }
    // x̂(k|k−1), …, x̂(k+N_p−1|k−1)
    let along = prev_states;
    let deltas = build_state_deltas(along, x_k, ctrl.k)?;
    let jac_k = model.proxy_jacobian(x_k)?;
    Ok(match cfg.predictor {
        Predictor::TaylorCarry => taylor_update(set, prev_traj, rho, &jac_k, &deltas)?,
        _ if cfg.relinearize => {
            let mut jacs = Vec::with_capacity(cfg.n_p - 1);
            jacs.push(jac_k.clone());
            for x in along.iter().skip(1).take(cfg.n_p - 2) {
                jacs.push(model.proxy_jacobian(x).unwrap_or_else(|_| jac_k.clone()));
            }
            anchored_taylor(set, rho, &jacs, &deltas)?
        }
        _ => anchored_taylor(set, rho, core::slice::from_ref(&jac_k), &deltas)?,
    })
}

/// Result of one controller sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

/// Runs one sample of the online procedure: measure the scheduling variable,
/// extrapolate the trajectory, build the prediction, solve, apply the first
/// input. QP failures go through the fallback chain and never abort.
pub fn control_step<M: Qlpv + ?Sized, C: Clock + ?Sized>(
    ctrl: &mut ControllerState,
    cfg: &MpcConfig,
    model: &M,
    x_k: &DVector<f64>,
    target: &SteadyStatePair,
    terminal: Option<&TerminalIngredients>,
    clock: &C,
) -> Result<ControlOutput, MpcError> {
    cfg.validate(model)?;
    let d = model.dims();
    dim("measured state", d.n_x, x_k.len())?;
    if cfg.terminal_mode.needs_ingredients() && terminal.is_none() {
        return Err(MpcError::MissingTerminal);
    }
    let sched = scheduling_proxy_clamped(model, x_k)?;
    let traj = next_trajectory(ctrl, cfg, model, x_k, &sched.rho)?;

    let t0 = clock.now();
    let pred = build_prediction(model, &traj)?;
    let ocp = assemble_from_prediction(cfg, model, pred, x_k, target, terminal)?;

    let u_tail = match (terminal, &ctrl.predicted_states) {
        (Some(t), Some(states)) if cfg.terminal_mode == TerminalMode::CostAndSet => {
            &target.u_r + &t.kappa * (&states[cfg.n_p - 1] - &target.x_r)
        }
        _ => target.u_r.clone(),
    };
    let warm = ctrl.inputs.as_ref().filter(|u| u.len() == ocp.qp.n()).map(|u| shift(u, d.n_u, &u_tail));
    let candidate_violation = match (&warm, cfg.terminal_mode, ctrl.k) {
        (Some(w), TerminalMode::CostAndSet, k) if k > 0 => Some(constraint_violation(&ocp, w)),
        _ => None,
    };

    let nominal = qp::solve_with_clock(&ocp.qp, warm.as_ref(), &cfg.qp, clock)?;
    let mut iterations = nominal.iterations;
    let (u_seq, status, fallback) = if nominal.status == QpStatus::Optimal {
        (nominal.x, nominal.status, Fallback::None)
    } else {
        let n = ocp.qp.n();
        let mut found = None;
        for (keep, level) in [(true, Fallback::Softened), (false, Fallback::TerminalDropped)] {
            if !keep && ocp.qp.ellipsoid.is_none() {
                continue;
            }
            let soft = soften(&ocp, cfg.soft_weight, keep);
            let warm_soft = warm.as_ref().map(|w| {
                let mut z = DVector::zeros(soft.n());
                z.rows_mut(0, n).copy_from(w);
                z
            });
            let s = qp::solve_with_clock(&soft, warm_soft.as_ref(), &cfg.qp, clock)?;
            iterations += s.iterations;
            if s.status == QpStatus::Optimal {
                found = Some((s.x.rows(0, n).into_owned(), s.status, level));
                break;
            }
        }
        found.unwrap_or_else(|| {
            let seq = warm
                .clone()
                .unwrap_or_else(|| DVector::from_iterator(n, (0..cfg.n_p).flat_map(|_| target.u_r.iter().copied())));
            let seq = seq.zip_zip_map(&ocp.qp.lower, &ocp.qp.upper, |v, lo, hi| v.clamp(lo, hi));
            (seq, nominal.status, Fallback::Shifted)
        })
    };
    let compute_time = (clock.now() - t0).max(0.0);

    let cost = ocp.qp.objective(&u_seq);
    let stacked = ocp.prediction.predict_states(x_k, &u_seq)?;
    let predicted_states = crate::linalg::unstack(&stacked, d.n_x);
    let u = u_seq.rows(0, d.n_u).into_owned();

    let diagnostics = StepDiagnostics {
        k: ctrl.k,
        rho: sched.rho,
        scheduling_clamped: sched.clamped || traj.any_clamped(),
        trajectory: traj.clone(),
        inputs: u_seq.clone(),
        predicted_states: predicted_states.clone(),
        status,
        iterations,
        compute_time,
        cost,
        fallback,
        candidate_feasible: candidate_violation.map(|v| v <= CANDIDATE_TOL),
        candidate_violation,
    };
    ctrl.trajectory = Some(traj);
    ctrl.predicted_states = Some(predicted_states);
    ctrl.inputs = Some(u_seq);
    ctrl.k += 1;
    Ok(ControlOutput { u, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoxSet, LinearModel};
    use crate::NullClock;

    fn scalar(a: f64, b: f64) -> LinearModel {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LinearModel::new(m(a), m(b), m(1.0), m(0.0)).unwrap()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn lti_steady_state_by_hand() {
        let model = scalar(0.5, 1.0);
        let pair = steady_state_pair(&model, &dv(&[2.0]), &dv(&[0.0]), &dv(&[0.0])).unwrap();
        assert!((pair.x_r[0] - 2.0).abs() < 1e-9 && (pair.u_r[0] - 1.0).abs() < 1e-9);
        assert!(pair.residual <= 1e-8);
    }

    #[test]
    fn autonomous_stable_model_steady_state_at_origin() {
        let model = scalar(0.5, 0.0);
        let pair = steady_state_pair(&model, &dv(&[0.0]), &dv(&[1.0]), &dv(&[0.0])).unwrap();
        assert!(pair.x_r.amax() < 1e-9 && pair.u_r.amax() < 1e-9);
    }

    #[test]
    fn pure_input_penalty_gives_zero_sequence() {
        let model = scalar(0.9, 1.0);
        let mut cfg = MpcConfig::new(3, DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        cfg.predictor = Predictor::Frozen;
        let target = SteadyStatePair::fixed(&model, dv(&[0.0]), dv(&[0.0])).unwrap();
        let traj = init_trajectory(&model.sets().scheduling, &dv(&[0.0]), 3).unwrap();
        let ocp = assemble_ocp(&cfg, &model, &traj, &dv(&[3.0]), &target, None).unwrap();
        let sol = qp::solve(&ocp.qp, None, &cfg.qp).unwrap();
        assert!(sol.x.amax() < 1e-6);
    }

    #[test]
    fn hand_condensed_hessian() {
        let (a, b, q, r, p) = (0.8, 0.5, 2.0, 0.3, 5.0);
        let model = scalar(a, b);
        let mut cfg = MpcConfig::new(2, DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r));
        cfg.terminal_mode = TerminalMode::CostOnly;
        let target = SteadyStatePair::fixed(&model, dv(&[0.0]), dv(&[0.0])).unwrap();
        let traj = init_trajectory(&model.sets().scheduling, &dv(&[0.0]), 2).unwrap();
        let ing = crate::terminal::TerminalIngredients::from_yw(
            DMatrix::from_element(1, 1, 1.0 / p),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            crate::terminal::LmiBounds { x_bar: dv(&[1.0]), u_bar: dv(&[1.0]) },
            crate::terminal::verify(
                &[crate::terminal::Vertex { a: DMatrix::from_element(1, 1, a), b: DMatrix::from_element(1, 1, b) }],
                &DMatrix::from_element(1, 1, q),
                &DMatrix::from_element(1, 1, r),
                &DMatrix::from_element(1, 1, 1.0 / p),
                &DMatrix::zeros(1, 1),
                &crate::terminal::LmiBounds { x_bar: dv(&[1.0]), u_bar: dv(&[1.0]) },
                1e-9,
            )
            .unwrap(),
        )
        .unwrap();
        let ocp = assemble_ocp(&cfg, &model, &traj, &dv(&[1.0]), &target, Some(&ing)).unwrap();
        let cb = DMatrix::from_row_slice(2, 2, &[b, 0.0, a * b, b]);
        let qbar = DMatrix::from_row_slice(2, 2, &[q, 0.0, 0.0, p]);
        let expected = (cb.transpose() * qbar * &cb + DMatrix::identity(2, 2) * r) * 2.0;
        assert!((&ocp.qp.hessian - expected).amax() < 1e-12);
    }

    #[test]
    fn objective_equals_direct_cost() {
        let model = scalar(1.1, 0.7);
        let cfg = MpcConfig::new(3, DMatrix::from_element(1, 1, 1.5), DMatrix::from_element(1, 1, 0.2));
        let target = SteadyStatePair::fixed(&model, dv(&[1.0]), dv(&[-0.1 / 0.7])).unwrap();
        let traj = init_trajectory(&model.sets().scheduling, &dv(&[0.0]), 3).unwrap();
        let x0 = dv(&[2.0]);
        let ocp = assemble_ocp(&cfg, &model, &traj, &x0, &target, None).unwrap();
        let u = dv(&[0.3, -0.2, 0.5]);
        let mut x = x0[0];
        let mut j = 0.0;
        for k in 0..3 {
            j += 1.5 * (x - target.x_r[0]).powi(2) + 0.2 * (u[k] - target.u_r[0]).powi(2);
            x = 1.1 * x + 0.7 * u[k];
        }
        assert!((ocp.qp.objective(&u) - j).abs() < 1e-12);
    }

    #[test]
    fn steady_start_applies_target_input() {
        let model = scalar(0.5, 1.0).with_sets(
            BoxSet::new(dv(&[-10.0]), dv(&[10.0])).unwrap(),
            BoxSet::new(dv(&[-5.0]), dv(&[5.0])).unwrap(),
            BoxSet::unbounded(1),
        );
        let cfg = MpcConfig::new(4, DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        let target = steady_state_pair(&model, &dv(&[2.0]), &dv(&[0.0]), &dv(&[0.0])).unwrap();
        let mut ctrl = ControllerState::new();
        let out = control_step(&mut ctrl, &cfg, &model, &target.x_r, &target, None, &NullClock).unwrap();
        assert!((out.u[0] - 1.0).abs() < 1e-6);
        for x in &out.diagnostics.predicted_states {
            assert!((x[0] - 2.0).abs() < 1e-6);
        }
        assert_eq!(out.u, out.diagnostics.inputs.rows(0, 1).into_owned());
        assert_eq!(ctrl.k, 1);
    }

    #[test]
    fn infeasible_box_falls_back_to_softening() {
        // x ≥ 9 cannot be reached from 0 with |u| ≤ 0.1
        let model = scalar(0.5, 1.0).with_sets(
            BoxSet::new(dv(&[9.0]), dv(&[10.0])).unwrap(),
            BoxSet::new(dv(&[-0.1]), dv(&[0.1])).unwrap(),
            BoxSet::unbounded(1),
        );
        let cfg = MpcConfig::new(3, DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        let target =
            SteadyStatePair { x_r: dv(&[0.0]), u_r: dv(&[0.0]), y_r: dv(&[0.0]), residual: 0.0, iterations: 0 };
        let mut ctrl = ControllerState::new();
        let out = control_step(&mut ctrl, &cfg, &model, &dv(&[0.0]), &target, None, &NullClock).unwrap();
        assert_eq!(out.diagnostics.fallback, Fallback::Softened);
        assert!(out.u[0] <= 0.1 + 1e-9 && out.u[0] >= 0.099);
    }

    #[test]
    fn rejects_short_horizon_and_missing_terminal() {
        let model = scalar(0.5, 1.0);
        let cfg = MpcConfig::new(1, DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        assert!(matches!(cfg.validate(&model), Err(MpcError::Config(_))));
        let mut cfg = MpcConfig::new(2, DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        cfg.terminal_mode = TerminalMode::CostAndSet;
        let target = SteadyStatePair::fixed(&model, dv(&[0.0]), dv(&[0.0])).unwrap();
        let traj = init_trajectory(&model.sets().scheduling, &dv(&[0.0]), 2).unwrap();
        let err = assemble_ocp(&cfg, &model, &traj, &dv(&[0.0]), &target, None).unwrap_err();
        assert_eq!(err, MpcError::MissingTerminal);
    }
}
