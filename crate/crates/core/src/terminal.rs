//! Terminal ingredients: weight `P`, gain `κ_t` and the ellipsoid
//! `X_f = { x | xᵀPx ≤ 1 }`.
//!
//! With `Y = P⁻¹` and `W = κ_t Y`, the three LMI families
//!
//! ```text
//! ⎡ Y        ⋆   ⋆    ⋆   ⎤
//! ⎢ AY + BW  Y   ⋆    ⋆   ⎥ ⪰ 0        ⎡ x̄_j²    e_jᵀY ⎤ ⪰ 0    ⎡ ū_i²    e_iᵀW ⎤ ⪰ 0
//! ⎢ Y        0   Q⁻¹  ⋆   ⎥            ⎣ Y e_j   Y     ⎦        ⎣ Wᵀe_i   Y     ⎦
//! ⎣ W        0   0    R⁻¹ ⎦
//! ```
//!
//! imply invariance of `X_f` under `u = κ_t x`, the Lyapunov decrease
//! `V(x⁺) − V(x) ≤ −ℓ(x, κ_t x)` and admissibility of `X_f` and of its
//! control image. The first family must hold for every scheduling value; it
//! is enforced on a finite set of `(A, B)` pairs and re-checked on denser sets.
//!
//! Synthesis works in coordinates scaled by `S = diag(x̄)`, `T = diag(ū)`,
//! which is a congruence of every block, so margins are reported scale-free.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid;
use crate::linalg::{eigenvalue_floor, min_eigenvalue, symmetrize};
use crate::model::{eval_matrices, scheduling_hull, BoxSet, Qlpv};

/// Eigenvalue floor applied to a singular stage weight before inversion.
pub const WEIGHT_FLOOR: f64 = 1e-8;
/// Certificates accept minimum eigenvalues down to `-CERT_TOL`.
pub const CERT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalError {
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    Invalid(String),
    /// No strictly feasible point was found; carries the smallest shift `s`
    /// for which every block plus `sI` was positive definite.
    SynthesisFailed {
        best_infeasibility: f64,
    },
}

impl fmt::Display for TerminalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalError::Dimension { what, expected, found } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, found {found}")
            }
            TerminalError::Invalid(m) => write!(f, "invalid terminal synthesis input: {m}"),
            TerminalError::SynthesisFailed { best_infeasibility } => {
                write!(f, "terminal LMIs infeasible (best shift {best_infeasibility:e})")
            }
        }
    }
}

impl core::error::Error for TerminalError {}

impl From<crate::error::ModelError> for TerminalError {
    fn from(e: crate::error::ModelError) -> Self {
        TerminalError::Invalid(alloc::format!("{e}"))
    }
}

fn dim(what: &'static str, expected: usize, found: usize) -> Result<(), TerminalError> {
    if expected == found {
        Ok(())
    } else {
        Err(TerminalError::Dimension { what, expected, found })
    }
}

/// Magnitude bounds `|x_j| ≤ x̄_j`, `|u_i| ≤ ū_i` on the terminal region and its control.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBounds {
    pub x_bar: DVector<f64>,
    pub u_bar: DVector<f64>,
}

impl LmiBounds {
    fn validate(&self) -> Result<(), TerminalError> {
        if self.x_bar.iter().chain(self.u_bar.iter()).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(TerminalError::Invalid("bounds must be positive and finite".into()));
        }
        Ok(())
    }
}

/// One `(A, B)` realization of the model family.
#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlocks {
    pub lmi1: DMatrix<f64>,
    pub lmi2: Vec<DMatrix<f64>>,
    pub lmi3: Vec<DMatrix<f64>>,
}

/// The three LMI families at one `(A, B)` pair, exactly as written in the module docs.
pub fn assemble_lmis(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    bounds: &LmiBounds,
) -> Result<LmiBlocks, TerminalError> {
    let (n, m) = (a.nrows(), b.ncols());
    dim("A columns", n, a.ncols())?;
    dim("B rows", n, b.nrows())?;
    dim("Q", n, q.nrows())?;
    dim("R", m, r.nrows())?;
    dim("Y", n, y.nrows())?;
    dim("W rows", m, w.nrows())?;
    dim("W columns", n, w.ncols())?;
    dim("state bounds", n, bounds.x_bar.len())?;
    dim("input bounds", m, bounds.u_bar.len())?;
    let q_inv = q.clone().try_inverse().ok_or_else(|| TerminalError::Invalid("Q is singular".into()))?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| TerminalError::Invalid("R is singular".into()))?;
    let size = 3 * n + m;
    let mut l1 = DMatrix::zeros(size, size);
    let ayw = a * y + b * w;
    l1.view_mut((0, 0), (n, n)).copy_from(y);
    l1.view_mut((n, 0), (n, n)).copy_from(&ayw);
    l1.view_mut((0, n), (n, n)).copy_from(&ayw.transpose());
    l1.view_mut((n, n), (n, n)).copy_from(y);
    l1.view_mut((2 * n, 0), (n, n)).copy_from(y);
    l1.view_mut((0, 2 * n), (n, n)).copy_from(&y.transpose());
    l1.view_mut((2 * n, 2 * n), (n, n)).copy_from(&q_inv);
    l1.view_mut((3 * n, 0), (m, n)).copy_from(w);
    l1.view_mut((0, 3 * n), (n, m)).copy_from(&w.transpose());
    l1.view_mut((3 * n, 3 * n), (m, m)).copy_from(&r_inv);

    let bordered = |corner: f64, row: DVector<f64>| {
        let mut blk = DMatrix::zeros(n + 1, n + 1);
        blk[(0, 0)] = corner;
        for k in 0..n {
            blk[(0, k + 1)] = row[k];
            blk[(k + 1, 0)] = row[k];
        }
        blk.view_mut((1, 1), (n, n)).copy_from(y);
        blk
    };
    let lmi2 = (0..n).map(|j| bordered(bounds.x_bar[j].powi(2), y.row(j).transpose())).collect();
    let lmi3 = (0..m).map(|i| bordered(bounds.u_bar[i].powi(2), w.row(i).transpose())).collect();
    Ok(LmiBlocks { lmi1: l1, lmi2, lmi3 })
}

/// Diagonal scaling `x = S x̃`, `u = T ũ` with `S = diag(x̄)`, `T = diag(ū)`.
#[derive(Debug, Clone)]
struct Scaling {
    s: DVector<f64>,
    t: DVector<f64>,
}

impl Scaling {
    fn vertex(&self, v: &Vertex) -> Vertex {
        let (n, m) = (self.s.len(), self.t.len());
        Vertex {
            a: DMatrix::from_fn(n, n, |i, j| v.a[(i, j)] * self.s[j] / self.s[i]),
            b: DMatrix::from_fn(n, m, |i, j| v.b[(i, j)] * self.t[j] / self.s[i]),
        }
    }

    fn weight_x(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * self.s[i] * self.s[j])
    }

    fn weight_u(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| r[(i, j)] * self.t[i] * self.t[j])
    }

    /// `Ỹ = S⁻¹ Y S⁻¹`
    fn y_to_scaled(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] / (self.s[i] * self.s[j]))
    }

    /// `W̃ = T⁻¹ W S⁻¹`
    fn w_to_scaled(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)] / (self.t[i] * self.s[j]))
    }

    fn y_from_scaled(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * self.s[i] * self.s[j])
    }

    fn w_from_scaled(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)] * self.t[i] * self.s[j])
    }
}

/// Minimum eigenvalues of every block at every vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiCertificate {
    pub lmi1: Vec<f64>,
    pub lmi2: Vec<f64>,
    pub lmi3: Vec<f64>,
    pub margin: f64,
    pub valid: bool,
    pub n_vertices: usize,
    pub reason: Option<String>,
}

impl LmiCertificate {
    fn invalid(reason: String, n_vertices: usize) -> Self {
        Self {
            lmi1: Vec::new(),
            lmi2: Vec::new(),
            lmi3: Vec::new(),
            margin: f64::NEG_INFINITY,
            valid: false,
            n_vertices,
            reason: Some(reason),
        }
    }
}

fn min_eig_fast(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Checks the LMIs at every vertex; valid iff every minimum eigenvalue is at
/// least `-tol` (evaluated in bound-scaled coordinates).
pub fn verify(
    vertices: &[Vertex],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    bounds: &LmiBounds,
    tol: f64,
) -> Result<LmiCertificate, TerminalError> {
    bounds.validate()?;
    if vertices.is_empty() {
        return Err(TerminalError::Invalid("empty vertex set".into()));
    }
    let sc = Scaling { s: bounds.x_bar.clone(), t: bounds.u_bar.clone() };
    let ys = symmetrize(&sc.y_to_scaled(y));
    let ws = sc.w_to_scaled(w);
    if Cholesky::new(ys.clone()).is_none() || min_eigenvalue(&ys) <= 0.0 {
        return Ok(LmiCertificate::invalid("Y is not positive definite".into(), vertices.len()));
    }
    let qs = sc.weight_x(q);
    let rs = sc.weight_u(r);
    let unit = LmiBounds { x_bar: DVector::from_element(y.nrows(), 1.0), u_bar: DVector::from_element(w.nrows(), 1.0) };
    let mut lmi1 = Vec::with_capacity(vertices.len());
    let mut lmi2 = Vec::new();
    let mut lmi3 = Vec::new();
    for (k, v) in vertices.iter().enumerate() {
        let vs = sc.vertex(v);
        let blocks = assemble_lmis(&vs.a, &vs.b, &qs, &rs, &ys, &ws, &unit)?;
        lmi1.push(min_eig_fast(&blocks.lmi1));
        if k == 0 {
            lmi2 = blocks.lmi2.iter().map(min_eig_fast).collect();
            lmi3 = blocks.lmi3.iter().map(min_eig_fast).collect();
        }
    }
    let margin = lmi1.iter().chain(lmi2.iter()).chain(lmi3.iter()).copied().fold(f64::INFINITY, f64::min);
    let valid = margin >= -tol;
    let reason = (!valid).then(|| alloc::format!("minimum eigenvalue {margin:e} below -{tol:e}"));
    Ok(LmiCertificate { lmi1, lmi2, lmi3, margin, valid, n_vertices: vertices.len(), reason })
}

/// Distinct `(A, B)` pairs of `model` over a set of scheduling points.
pub fn vertices_at<M: Qlpv + ?Sized>(model: &M, points: &[DVector<f64>]) -> Result<Vec<Vertex>, TerminalError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in points {
        let m = eval_matrices(model, p)?;
        let key: Vec<u64> = m.a.iter().chain(m.b.iter()).map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(Vertex { a: m.a, b: m.b });
        }
    }
    Ok(out)
}

/// Tensor grid with `points_per_dim` points over a scheduling box.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingGrid {
    pub region: BoxSet,
    pub points_per_dim: usize,
    pub points: Vec<DVector<f64>>,
}

impl SchedulingGrid {
    pub fn new(region: BoxSet, points_per_dim: usize) -> Result<Self, TerminalError> {
        let points = grid::uniform_points(&region, points_per_dim)?;
        Ok(Self { region, points_per_dim, points })
    }

    /// The grid with every interval halved (`2(n−1)+1` points per dimension).
    pub fn densified(&self) -> Result<Self, TerminalError> {
        Self::new(self.region.clone(), 2 * (self.points_per_dim.max(2) - 1) + 1)
    }
}

/// Scheduling box covering the state box `x_r ± x̄` (exact for proxies that are
/// monotone in each state; otherwise increase `points_per_dim`).
pub fn operating_region<M: Qlpv + ?Sized>(
    model: &M,
    x_r: &DVector<f64>,
    x_bar: &DVector<f64>,
    points_per_dim: usize,
) -> Result<BoxSet, TerminalError> {
    let states = BoxSet::new(x_r - x_bar, x_r + x_bar)?;
    Ok(scheduling_hull(model, &states, points_per_dim)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogDetSense {
    /// Maximize `log det Y` (largest terminal ellipsoid).
    #[default]
    MaximizeVolume,
    /// Decrease `log det Y` by successive linearization `tr(Y_k⁻¹ Y)`.
    MinimizeLogDet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisSettings {
    pub sense: LogDetSense,
    /// Barrier weight multiplier between centering steps.
    pub mu: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Stop centering when half the squared Newton decrement drops below this.
    pub newton_tol: f64,
    /// Vertices added to the working set per cutting-plane round.
    pub batch: usize,
    pub max_rounds: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            sense: LogDetSense::MaximizeVolume,
            mu: 10.0,
            max_outer: 12,
            max_newton: 60,
            newton_tol: 1e-10,
            batch: 16,
            max_rounds: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub kappa: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Level of the ellipsoid, always 1.
    pub level: f64,
    /// Stage weights the LMIs were posed with (after flooring).
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub bounds: LmiBounds,
    pub certificate: LmiCertificate,
}

impl TerminalIngredients {
    /// Assembles ingredients from `(Y, W)`: `P = Y⁻¹`, `κ_t = W Y⁻¹`.
    pub fn from_yw(
        y: DMatrix<f64>,
        w: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        bounds: LmiBounds,
        certificate: LmiCertificate,
    ) -> Result<Self, TerminalError> {
        let y = symmetrize(&y);
        let chol =
            Cholesky::new(y.clone()).ok_or_else(|| TerminalError::Invalid("Y is not positive definite".into()))?;
        let p = symmetrize(&chol.inverse());
        let kappa = &w * &p;
        Ok(Self { p, kappa, y, w, level: 1.0, q, r, bounds, certificate })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.value(x) <= self.level + tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub ingredients: TerminalIngredients,
    /// `log det Y` after each centering step of the final solve.
    pub logdet_history: Vec<f64>,
    pub rounds: usize,
    pub working_set: usize,
}

/// `F(v) = F₀ + Σ v_j F_j`.
struct AffineBlock {
    f0: DMatrix<f64>,
    fj: Vec<DMatrix<f64>>,
}

impl AffineBlock {
    fn eval(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (j, fj) in self.fj.iter().enumerate() {
            if v[j] != 0.0 {
                f += fj * v[j];
            }
        }
        f
    }
}

/// Variable layout: upper-triangular entries of `Ỹ`, then entries of `W̃`.
struct Layout {
    n: usize,
    m: usize,
}

impl Layout {
    fn n_y(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn len(&self) -> usize {
        self.n_y() + self.m * self.n
    }

    fn y_basis(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.n_y());
        for a in 0..self.n {
            for b in a..self.n {
                let mut e = DMatrix::zeros(self.n, self.n);
                e[(a, b)] = 1.0;
                e[(b, a)] = 1.0;
                out.push(e);
            }
        }
        out
    }

    fn w_basis(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.m * self.n);
        for i in 0..self.m {
            for j in 0..self.n {
                let mut e = DMatrix::zeros(self.m, self.n);
                e[(i, j)] = 1.0;
                out.push(e);
            }
        }
        out
    }

    fn y_of(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.n, self.n);
        let mut k = 0;
        for a in 0..self.n {
            for b in a..self.n {
                y[(a, b)] = v[k];
                y[(b, a)] = v[k];
                k += 1;
            }
        }
        y
    }

    fn w_of(&self, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.n, |i, j| v[self.n_y() + i * self.n + j])
    }

    fn pack(&self, y: &DMatrix<f64>, w: &DMatrix<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        let mut k = 0;
        for a in 0..self.n {
            for b in a..self.n {
                v[k] = y[(a, b)];
                k += 1;
            }
        }
        for i in 0..self.m {
            for j in 0..self.n {
                v[k] = w[(i, j)];
                k += 1;
            }
        }
        v
    }
}

fn lmi1_block(layout: &Layout, v: &Vertex, q_inv: &DMatrix<f64>, r_inv: &DMatrix<f64>) -> AffineBlock {
    let (n, m) = (layout.n, layout.m);
    let size = 3 * n + m;
    let mut f0 = DMatrix::zeros(size, size);
    f0.view_mut((2 * n, 2 * n), (n, n)).copy_from(q_inv);
    f0.view_mut((3 * n, 3 * n), (m, m)).copy_from(r_inv);
    let mut fj = Vec::with_capacity(layout.len());
    for e in layout.y_basis() {
        let mut f = DMatrix::zeros(size, size);
        let ae = &v.a * &e;
        f.view_mut((0, 0), (n, n)).copy_from(&e);
        f.view_mut((n, 0), (n, n)).copy_from(&ae);
        f.view_mut((0, n), (n, n)).copy_from(&ae.transpose());
        f.view_mut((n, n), (n, n)).copy_from(&e);
        f.view_mut((2 * n, 0), (n, n)).copy_from(&e);
        f.view_mut((0, 2 * n), (n, n)).copy_from(&e);
        fj.push(f);
    }
    for e in layout.w_basis() {
        let mut f = DMatrix::zeros(size, size);
        let be = &v.b * &e;
        f.view_mut((n, 0), (n, n)).copy_from(&be);
        f.view_mut((0, n), (n, n)).copy_from(&be.transpose());
        f.view_mut((3 * n, 0), (m, n)).copy_from(&e);
        f.view_mut((0, 3 * n), (n, m)).copy_from(&e.transpose());
        fj.push(f);
    }
    AffineBlock { f0, fj }
}

fn bound_blocks(layout: &Layout) -> Vec<AffineBlock> {
    let (n, m) = (layout.n, layout.m);
    let mut out = Vec::new();
    let yb = layout.y_basis();
    let wb = layout.w_basis();
    let mut f0 = DMatrix::zeros(n + 1, n + 1);
    f0[(0, 0)] = 1.0;
    for j in 0..n {
        let mut fj = Vec::with_capacity(layout.len());
        for e in &yb {
            let mut f = DMatrix::zeros(n + 1, n + 1);
            for k in 0..n {
                f[(0, k + 1)] = e[(j, k)];
                f[(k + 1, 0)] = e[(j, k)];
            }
            f.view_mut((1, 1), (n, n)).copy_from(e);
            fj.push(f);
        }
        fj.extend(wb.iter().map(|_| DMatrix::zeros(n + 1, n + 1)));
        out.push(AffineBlock { f0: f0.clone(), fj });
    }
    for i in 0..m {
        let mut fj = Vec::with_capacity(layout.len());
        for e in &yb {
            let mut f = DMatrix::zeros(n + 1, n + 1);
            f.view_mut((1, 1), (n, n)).copy_from(e);
            fj.push(f);
        }
        for e in &wb {
            let mut f = DMatrix::zeros(n + 1, n + 1);
            for k in 0..n {
                f[(0, k + 1)] = e[(i, k)];
                f[(k + 1, 0)] = e[(i, k)];
            }
            fj.push(f);
        }
        out.push(AffineBlock { f0: f0.clone(), fj });
    }
    out
}

/// Barrier objective over a set of affine blocks, with an optional shift
/// variable `s` (appended last) entering every block as `+sI`.
struct Barrier<'a> {
    blocks: Vec<&'a AffineBlock>,
    layout: &'a Layout,
    shift: bool,
}

enum Objective<'a> {
    /// `t · s` (phase I)
    Shift,
    /// `−t log det Y`
    NegLogDet,
    /// `t tr(M Y)`
    Linear(&'a DMatrix<f64>),
}

impl Barrier<'_> {
    fn n_vars(&self) -> usize {
        self.layout.len() + usize::from(self.shift)
    }

    fn block_at(&self, b: &AffineBlock, v: &DVector<f64>) -> DMatrix<f64> {
        let base = v.rows(0, self.layout.len()).into_owned();
        let mut f = b.eval(&base);
        if self.shift {
            let s = v[self.layout.len()];
            for i in 0..f.nrows() {
                f[(i, i)] += s;
            }
        }
        f
    }

    /// Value of `t·f₀ − Σ log det F_i`, or `None` outside the domain.
    fn value(&self, v: &DVector<f64>, t: f64, obj: &Objective) -> Option<f64> {
        let mut val = 0.0;
        for b in &self.blocks {
            let chol = Cholesky::new(symmetrize(&self.block_at(b, v)))?;
            val -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        match obj {
            Objective::Shift => val += t * v[self.layout.len()],
            Objective::NegLogDet => {
                let chol = Cholesky::new(self.layout.y_of(v))?;
                val -= t * 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            }
            Objective::Linear(mm) => val += t * (*mm * self.layout.y_of(v)).trace(),
        }
        Some(val)
    }

    fn grad_hess(&self, v: &DVector<f64>, t: f64, obj: &Objective) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let nv = self.n_vars();
        let nl = self.layout.len();
        let mut g = DVector::zeros(nv);
        let mut h = DMatrix::zeros(nv, nv);
        for b in &self.blocks {
            let chol = Cholesky::<f64, Dyn>::new(symmetrize(&self.block_at(b, v)))?;
            let finv = chol.inverse();
            let size = finv.nrows();
            let mut gs: Vec<DMatrix<f64>> = b.fj.iter().map(|fj| &finv * fj).collect();
            if self.shift {
                gs.push(finv.clone());
            }
            debug_assert_eq!(gs.len(), nv);
            for j in 0..nv {
                g[j] -= gs[j].trace();
            }
            for j in 0..nv {
                let gj = &gs[j];
                if gj.iter().all(|x| *x == 0.0) {
                    continue;
                }
                for k in j..nv {
                    let gk = &gs[k];
                    let mut tr = 0.0;
                    for a in 0..size {
                        for c in 0..size {
                            tr += gj[(a, c)] * gk[(c, a)];
                        }
                    }
                    h[(j, k)] += tr;
                    if k != j {
                        h[(k, j)] += tr;
                    }
                }
            }
        }
        match obj {
            Objective::Shift => g[nl] += t,
            Objective::NegLogDet => {
                let yinv = Cholesky::new(self.layout.y_of(v))?.inverse();
                let basis = self.layout.y_basis();
                let gs: Vec<DMatrix<f64>> = basis.iter().map(|e| &yinv * e).collect();
                for j in 0..gs.len() {
                    g[j] -= t * gs[j].trace();
                    for k in 0..gs.len() {
                        h[(j, k)] += t * (&gs[j] * &gs[k]).trace();
                    }
                }
            }
            Objective::Linear(mm) => {
                for (j, e) in self.layout.y_basis().iter().enumerate() {
                    g[j] += t * (*mm * e).trace();
                }
            }
        }
        Some((g, h))
    }

    /// Damped Newton centering; returns the new point (stays strictly feasible).
    fn center(
        &self,
        mut v: DVector<f64>,
        t: f64,
        obj: &Objective,
        st: &SynthesisSettings,
        stop: &dyn Fn(&DVector<f64>) -> bool,
    ) -> DVector<f64> {
        for _ in 0..st.max_newton {
            if stop(&v) {
                break;
            }
            let Some((g, mut h)) = self.grad_hess(&v, t, obj) else { break };
            let reg = 1e-12 * h.diagonal().amax().max(1e-300);
            for i in 0..h.nrows() {
                h[(i, i)] += reg;
            }
            let Some(chol) = Cholesky::new(h) else { break };
            let dv = -chol.solve(&g);
            let decrement = -g.dot(&dv);
            if decrement / 2.0 <= st.newton_tol {
                break;
            }
            let Some(f0) = self.value(&v, t, obj) else { break };
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand = &v + &dv * alpha;
                if let Some(f) = self.value(&cand, t, obj) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        v = cand;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        v
    }
}

fn block_margin(layout: &Layout, blocks: &[&AffineBlock], v: &DVector<f64>) -> f64 {
    let base = v.rows(0, layout.len()).into_owned();
    blocks.iter().map(|b| min_eig_fast(&b.eval(&base))).fold(f64::INFINITY, f64::min)
}

/// Phase I: find `v` with every block positive definite.
fn phase_one(
    layout: &Layout,
    blocks: &[&AffineBlock],
    start: &DVector<f64>,
    st: &SynthesisSettings,
) -> Result<DVector<f64>, TerminalError> {
    let margin0 = block_margin(layout, blocks, start);
    if margin0 > 1e-6 {
        return Ok(start.clone());
    }
    let nl = layout.len();
    let mut v = DVector::zeros(nl + 1);
    v.rows_mut(0, nl).copy_from(start);
    v[nl] = (-margin0).max(0.0) + 1.0;
    let barrier = Barrier { blocks: blocks.to_vec(), layout, shift: true };
    let target = -1e-4;
    let stop = |v: &DVector<f64>| v[nl] < target;
    let mut t = 1.0;
    for _ in 0..st.max_outer + 4 {
        v = barrier.center(v, t, &Objective::Shift, st, &stop);
        if v[nl] < target {
            break;
        }
        t *= st.mu;
    }
    let base = v.rows(0, nl).into_owned();
    let margin = block_margin(layout, blocks, &base);
    if margin > 0.0 {
        Ok(base)
    } else {
        Err(TerminalError::SynthesisFailed { best_infeasibility: -margin })
    }
}

struct Solved {
    v: DVector<f64>,
    history: Vec<f64>,
}

fn logdet(y: &DMatrix<f64>) -> f64 {
    Cholesky::new(y.clone())
        .map_or(f64::NEG_INFINITY, |c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn phase_two(layout: &Layout, blocks: &[&AffineBlock], start: DVector<f64>, st: &SynthesisSettings) -> Solved {
    let barrier = Barrier { blocks: blocks.to_vec(), layout, shift: false };
    let total: usize = blocks.iter().map(|b| b.f0.nrows()).sum();
    let never = |_: &DVector<f64>| false;
    let mut v = start;
    let mut history = Vec::new();
    let mut t = 1.0;
    let mut reference = layout.y_of(&v);
    for _ in 0..st.max_outer {
        v = match st.sense {
            LogDetSense::MaximizeVolume => barrier.center(v, t, &Objective::NegLogDet, st, &never),
            LogDetSense::MinimizeLogDet => {
                let m = Cholesky::new(reference.clone())
                    .map_or_else(|| DMatrix::identity(layout.n, layout.n), |c| c.inverse());
                let next = barrier.center(v, t, &Objective::Linear(&m), st, &never);
                reference = layout.y_of(&next);
                next
            }
        };
        history.push(logdet(&layout.y_of(&v)));
        if (total as f64) / t < 1e-9 {
            break;
        }
        t *= st.mu;
    }
    Solved { v, history }
}

/// Synthesizes `(Y, W)` for the vertex set by a log-barrier path-following
/// method with cutting planes: the LMI1 family is imposed on a working subset
/// of vertices, all vertices are re-checked after each solve and violated
/// ones are added.
pub fn synthesize(
    vertices: &[Vertex],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    bounds: &LmiBounds,
    settings: &SynthesisSettings,
) -> Result<Synthesis, TerminalError> {
    bounds.validate()?;
    if vertices.is_empty() {
        return Err(TerminalError::Invalid("empty vertex set".into()));
    }
    let (n, m) = (vertices[0].a.nrows(), vertices[0].b.ncols());
    dim("state bounds", n, bounds.x_bar.len())?;
    dim("input bounds", m, bounds.u_bar.len())?;
    dim("Q", n, q.nrows())?;
    dim("R", m, r.nrows())?;
    for v in vertices {
        dim("A", n, v.a.nrows())?;
        dim("A", n, v.a.ncols())?;
        dim("B", n, v.b.nrows())?;
        dim("B", m, v.b.ncols())?;
    }
    let q = eigenvalue_floor(q, WEIGHT_FLOOR);
    if min_eigenvalue(r) <= 0.0 {
        return Err(TerminalError::Invalid("R must be positive definite".into()));
    }
    let r = symmetrize(r);
    let sc = Scaling { s: bounds.x_bar.clone(), t: bounds.u_bar.clone() };
    let qs = sc.weight_x(&q);
    let rs = sc.weight_u(&r);
    let q_inv = symmetrize(&qs.clone().try_inverse().ok_or_else(|| TerminalError::Invalid("Q is singular".into()))?);
    let r_inv = symmetrize(&rs.clone().try_inverse().ok_or_else(|| TerminalError::Invalid("R is singular".into()))?);
    let layout = Layout { n, m };
    let scaled: Vec<Vertex> = vertices.iter().map(|v| sc.vertex(v)).collect();
    let lmi1: Vec<AffineBlock> = scaled.iter().map(|v| lmi1_block(&layout, v, &q_inv, &r_inv)).collect();
    let extra = bound_blocks(&layout);

    let mut working: BTreeSet<usize> = initial_working_set(&scaled);
    let mut v = layout.pack(&(DMatrix::identity(n, n) * 0.25), &DMatrix::zeros(m, n));
    let unit = LmiBounds { x_bar: DVector::from_element(n, 1.0), u_bar: DVector::from_element(m, 1.0) };
    for round in 1..=settings.max_rounds {
        let blocks: Vec<&AffineBlock> = extra.iter().chain(working.iter().map(|&i| &lmi1[i])).collect();
        let start = phase_one(&layout, &blocks, &v, settings)?;
        let solved = phase_two(&layout, &blocks, start, settings);
        v = solved.v;
        let ys = layout.y_of(&v);
        let ws = layout.w_of(&v);
        let mut violated: Vec<(f64, usize)> = Vec::new();
        for (i, sv) in scaled.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let blk = assemble_lmis(&sv.a, &sv.b, &qs, &rs, &ys, &ws, &unit)?;
            let e = min_eig_fast(&blk.lmi1);
            if e < 1e-12 {
                violated.push((e, i));
            }
        }
        if violated.is_empty() {
            let y = sc.y_from_scaled(&ys);
            let w = sc.w_from_scaled(&ws);
            let certificate = verify(vertices, &q, &r, &y, &w, bounds, CERT_TOL)?;
            let ingredients = TerminalIngredients::from_yw(y, w, q, r, bounds.clone(), certificate)?;
            return Ok(Synthesis {
                ingredients,
                logdet_history: solved.history,
                rounds: round,
                working_set: working.len(),
            });
        }
        violated.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, i) in violated.into_iter().take(settings.batch) {
            working.insert(i);
        }
    }
    Err(TerminalError::SynthesisFailed { best_infeasibility: f64::NAN })
}

/// Vertices that attain the extreme value of some entry of `(A, B)`.
fn initial_working_set(vertices: &[Vertex]) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    set.insert(0);
    let entries = vertices[0].a.len() + vertices[0].b.len();
    for k in 0..entries {
        let val = |v: &Vertex| if k < v.a.len() { v.a[k] } else { v.b[k - v.a.len()] };
        let (mut lo, mut hi) = (0, 0);
        for (i, v) in vertices.iter().enumerate() {
            if val(v) < val(&vertices[lo]) {
                lo = i;
            }
            if val(v) > val(&vertices[hi]) {
                hi = i;
            }
        }
        set.insert(lo);
        set.insert(hi);
    }
    set
}

/// Outcome of a Monte Carlo check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest value of the checked quantity minus its limit (≤ 0 when satisfied).
    pub worst: f64,
}

fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Uniform sample on the boundary `xᵀPx = 1` (through `P^{-1/2}`).
fn boundary_sample<R: Rng + ?Sized>(rng: &mut R, y_sqrt: &DMatrix<f64>) -> DVector<f64> {
    y_sqrt * unit_sphere(rng, y_sqrt.nrows())
}

/// Uniform sample inside the ellipsoid.
fn interior_sample<R: Rng + ?Sized>(rng: &mut R, y_sqrt: &DMatrix<f64>) -> DVector<f64> {
    let n = y_sqrt.nrows() as f64;
    let radius: f64 = rng.random::<f64>().powf(1.0 / n);
    boundary_sample(rng, y_sqrt) * radius
}

/// Checks `‖(A + Bκ_t)x‖²_P ≤ 1 + 1e-9` for boundary samples `x` against every vertex.
pub fn invariance_check<R: Rng + ?Sized>(
    ing: &TerminalIngredients,
    vertices: &[Vertex],
    n_samples: usize,
    rng: &mut R,
) -> SampleReport {
    let (y_sqrt, _) = crate::linalg::sqrt_and_inv_sqrt(&ing.y);
    let closed: Vec<DMatrix<f64>> = vertices.iter().map(|v| &v.a + &v.b * &ing.kappa).collect();
    let mut report = SampleReport { samples: n_samples, violations: 0, worst: f64::NEG_INFINITY };
    for _ in 0..n_samples {
        let x = boundary_sample(rng, &y_sqrt);
        let mut bad = false;
        for acl in &closed {
            let next = acl * &x;
            let excess = ing.value(&next) - ing.level;
            report.worst = report.worst.max(excess);
            bad |= excess > 1e-9;
        }
        report.violations += usize::from(bad);
    }
    report
}

/// Checks `V(x⁺) − V(x) ≤ −xᵀQx − (κx)ᵀRκx` (within `1e-9`) for interior
/// samples against every vertex.
pub fn lyapunov_decrease_check<R: Rng + ?Sized>(
    ing: &TerminalIngredients,
    vertices: &[Vertex],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    n_samples: usize,
    rng: &mut R,
) -> SampleReport {
    let (y_sqrt, _) = crate::linalg::sqrt_and_inv_sqrt(&ing.y);
    let closed: Vec<DMatrix<f64>> = vertices.iter().map(|v| &v.a + &v.b * &ing.kappa).collect();
    let mut report = SampleReport { samples: n_samples, violations: 0, worst: f64::NEG_INFINITY };
    for _ in 0..n_samples {
        let x = interior_sample(rng, &y_sqrt);
        let u = &ing.kappa * &x;
        let stage = x.dot(&(q * &x)) + u.dot(&(r * &u));
        let v0 = ing.value(&x);
        let mut bad = false;
        for acl in &closed {
            let excess = ing.value(&(acl * &x)) - v0 + stage;
            report.worst = report.worst.max(excess);
            bad |= excess > 1e-9;
        }
        report.violations += usize::from(bad);
    }
    report
}

/// Checks `|κ_t x| ≤ ū` and `|x| ≤ x̄` componentwise on boundary samples.
pub fn admissibility_check<R: Rng + ?Sized>(ing: &TerminalIngredients, n_samples: usize, rng: &mut R) -> SampleReport {
    let (y_sqrt, _) = crate::linalg::sqrt_and_inv_sqrt(&ing.y);
    let mut report = SampleReport { samples: n_samples, violations: 0, worst: f64::NEG_INFINITY };
    for _ in 0..n_samples {
        let x = boundary_sample(rng, &y_sqrt);
        let u = &ing.kappa * &x;
        let mut worst = f64::NEG_INFINITY;
        for j in 0..x.len() {
            worst = worst.max(x[j].abs() / ing.bounds.x_bar[j] - 1.0);
        }
        for i in 0..u.len() {
            worst = worst.max(u[i].abs() / ing.bounds.u_bar[i] - 1.0);
        }
        report.worst = report.worst.max(worst);
        report.violations += usize::from(worst > 1e-9);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn unit_bounds() -> LmiBounds {
        LmiBounds { x_bar: DVector::from_element(1, 1.0), u_bar: DVector::from_element(1, 1.0) }
    }

    #[test]
    fn scalar_schur_reduction_without_feedback() {
        // A = 0.5, B = 1, W = 0: PSD iff 0.25/Y + Q ≤ 1/Y
        let q = 1.0;
        for y in [0.5, 0.74, 0.76, 1.0] {
            let blk = assemble_lmis(&s(0.5), &s(1.0), &s(q), &s(1.0), &s(y), &s(0.0), &unit_bounds()).unwrap();
            let psd = min_eigenvalue(&blk.lmi1) >= -1e-12;
            assert_eq!(psd, 0.25 / y + q <= 1.0 / y, "Y = {y}");
        }
    }

    #[test]
    fn identity_state_bound_block() {
        let bounds = LmiBounds { x_bar: DVector::from_element(2, 1.0), u_bar: DVector::from_element(1, 1.0) };
        let blk = assemble_lmis(
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 1),
            &DMatrix::identity(2, 2),
            &s(1.0),
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(1, 2),
            &bounds,
        )
        .unwrap();
        assert_eq!(blk.lmi1.nrows(), 3 * 2 + 1);
        for b in &blk.lmi2 {
            assert!(min_eigenvalue(b) >= -1e-12);
        }
    }

    #[test]
    fn unstabilizable_scalar_fails() {
        let v = [Vertex { a: s(2.0), b: s(0.0) }];
        let err = synthesize(&v, &s(1.0), &s(1.0), &unit_bounds(), &SynthesisSettings::default()).unwrap_err();
        assert!(matches!(err, TerminalError::SynthesisFailed { .. }));
    }

    #[test]
    fn scalar_synthesis_certifies() {
        let v = [Vertex { a: s(0.9), b: s(1.0) }];
        let syn = synthesize(&v, &s(1.0), &s(1.0), &unit_bounds(), &SynthesisSettings::default()).unwrap();
        let ing = &syn.ingredients;
        assert!(ing.certificate.valid && ing.certificate.margin >= 0.0);
        let (y, k) = (ing.y[(0, 0)], ing.kappa[(0, 0)]);
        assert!(y <= (1.0 - (0.9 + k) * (0.9 + k)) / (1.0 + k * k) + 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(invariance_check(ing, &v, 1000, &mut rng).violations, 0);
        assert_eq!(lyapunov_decrease_check(ing, &v, &ing.q, &ing.r, 1000, &mut rng).violations, 0);
        assert_eq!(admissibility_check(ing, 1000, &mut rng).violations, 0);
        // monotone objective along the central path
        for w in syn.logdet_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn oversized_ellipsoid_fails_state_bound() {
        let v = [Vertex { a: s(0.9), b: s(1.0) }];
        let syn = synthesize(&v, &s(1.0), &s(1.0), &unit_bounds(), &SynthesisSettings::default()).unwrap();
        let ing = &syn.ingredients;
        let cert = verify(&v, &ing.q, &ing.r, &(&ing.y * 1e6), &ing.w, &ing.bounds, CERT_TOL).unwrap();
        assert!(!cert.valid);
    }
}
