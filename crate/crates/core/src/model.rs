//! Quasi-LPV model abstraction.
//!
//! A [`Qlpv`] model is a family of state-space matrices `A(ρ), B(ρ), C(ρ), D(ρ)`
//! together with a state-dependent scheduling proxy `ρ = f_ρ(x)` and its
//! Jacobian. A [`NonlinearPlant`] is the discrete-time system the model is
//! meant to embed exactly.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, ModelError};

/// Absolute tolerance within which a measured scheduling vector is silently
/// clamped back into the scheduling set.
pub const PROXY_CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_rho: usize,
}

impl Dims {
    pub fn new(n_x: usize, n_u: usize, n_y: usize, n_rho: usize) -> Result<Self, ModelError> {
        if n_x == 0 || n_u == 0 || n_y == 0 || n_rho == 0 {
            return Err(ModelError::Invalid(format!(
                "all dimensions must be positive (n_x={n_x}, n_u={n_u}, n_y={n_y}, n_rho={n_rho})"
            )));
        }
        Ok(Self { n_x, n_u, n_y, n_rho })
    }
}

/// Axis-aligned box `{ v | lower ≤ v ≤ upper }`. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, ModelError> {
        check_len("box upper bound", lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(upper.iter()).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(ModelError::Invalid(format!("box component {i}: lower {l} > upper {u}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The symmetric box `|v_j| ≤ bound_j`.
    pub fn symmetric(bounds: DVector<f64>) -> Result<Self, ModelError> {
        Self::new(-bounds.clone(), bounds)
    }

    pub fn unbounded(dim: usize) -> Self {
        Self { lower: DVector::from_element(dim, f64::NEG_INFINITY), upper: DVector::from_element(dim, f64::INFINITY) }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        self.contains_with_tol(v, 0.0)
    }

    pub fn contains_with_tol(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && v.iter().zip(self.lower.iter().zip(self.upper.iter())).all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter().zip(self.lower.iter().zip(self.upper.iter())).map(|(x, (l, u))| x.max(*l).min(*u)),
        )
    }

    /// Largest componentwise distance from `v` to the box (zero inside).
    pub fn excess(&self, v: &DVector<f64>) -> f64 {
        v.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(x, (l, u))| (l - x).max(x - u).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    /// Smallest box containing every given point.
    pub fn hull<'a>(points: impl IntoIterator<Item = &'a DVector<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first.clone(), first.clone());
        for p in it {
            for i in 0..p.len() {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Some(Self { lower: lo, upper: hi })
    }
}

/// The scheduling set `𝒫`: a nonempty, bounded box of admissible scheduling vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingSet(BoxSet);

impl SchedulingSet {
    pub fn new(bounds: BoxSet) -> Result<Self, ModelError> {
        if bounds.dim() == 0 {
            return Err(ModelError::Invalid("empty scheduling set".into()));
        }
        if bounds.lower().iter().chain(bounds.upper().iter()).any(|b| !b.is_finite()) {
            return Err(ModelError::Invalid("scheduling set must be bounded".into()));
        }
        Ok(Self(bounds))
    }

    pub fn bounds(&self) -> &BoxSet {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn contains(&self, rho: &DVector<f64>) -> bool {
        self.0.contains(rho)
    }

    pub fn clamp(&self, rho: &DVector<f64>) -> DVector<f64> {
        self.0.clamp(rho)
    }

    pub fn excess(&self, rho: &DVector<f64>) -> f64 {
        self.0.excess(rho)
    }
}

/// Admissible sets of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSets {
    pub state: BoxSet,
    pub input: BoxSet,
    pub output: BoxSet,
    pub scheduling: SchedulingSet,
}

/// One frozen realization `(A, B, C, D)` of the LPV family.
#[derive(Debug, Clone, PartialEq)]
pub struct LpvMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// A quasi-LPV model with a state-only scheduling proxy.
///
/// Implementations must be deterministic and free of interior mutability.
pub trait Qlpv {
    fn dims(&self) -> Dims;

    /// Matrices at `rho`; callers go through [`eval_matrices`] which checks shapes.
    fn matrices(&self, rho: &DVector<f64>) -> LpvMatrices;

    /// Raw proxy value `f_ρ(x)`, not yet checked against the scheduling set.
    fn proxy(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// `∂f_ρ/∂x` at `x`, an `n_rho × n_x` matrix.
    fn proxy_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ModelError>;

    fn sets(&self) -> &ModelSets;

    fn sample_time(&self) -> f64;

    /// Constant added to the LPV output to obtain the physical output.
    fn output_offset(&self) -> DVector<f64> {
        DVector::zeros(self.dims().n_y)
    }
}

/// Discrete-time nonlinear system `x⁺ = f(x, u)`, `y = g(x, u)`.
pub trait NonlinearPlant {
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
}

/// Evaluates the model matrices at `rho` after checking its dimension.
pub fn eval_matrices<M: Qlpv + ?Sized>(model: &M, rho: &DVector<f64>) -> Result<LpvMatrices, ModelError> {
    let dims = model.dims();
    check_len("scheduling vector", dims.n_rho, rho.len())?;
    let m = model.matrices(rho);
    debug_assert_eq!(m.a.shape(), (dims.n_x, dims.n_x));
    debug_assert_eq!(m.b.shape(), (dims.n_x, dims.n_u));
    debug_assert_eq!(m.c.shape(), (dims.n_y, dims.n_x));
    debug_assert_eq!(m.d.shape(), (dims.n_y, dims.n_u));
    Ok(m)
}

/// A measured scheduling vector with its admissibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduling {
    pub rho: DVector<f64>,
    /// Some component was pulled back into `𝒫`.
    pub clamped: bool,
    /// The state was outside the state box (evaluation still proceeded).
    pub state_outside_box: bool,
}

/// Evaluates `ρ = f_ρ(x)` and enforces membership in `𝒫`.
///
/// Components within [`PROXY_CLAMP_TOL`] of the set are clamped and flagged;
/// anything further out is an error.
pub fn scheduling_proxy<M: Qlpv + ?Sized>(model: &M, x: &DVector<f64>) -> Result<Scheduling, ModelError> {
    let dims = model.dims();
    check_len("state", dims.n_x, x.len())?;
    let raw = model.proxy(x)?;
    let set = &model.sets().scheduling;
    let b = set.bounds();
    for i in 0..raw.len() {
        let (l, u) = (b.lower()[i], b.upper()[i]);
        if raw[i] < l - PROXY_CLAMP_TOL || raw[i] > u + PROXY_CLAMP_TOL {
            return Err(ModelError::OutsideSchedulingSet { index: i, value: raw[i], lower: l, upper: u });
        }
    }
    let rho = set.clamp(&raw);
    let clamped = rho != raw;
    Ok(Scheduling { rho, clamped, state_outside_box: !model.sets().state.contains(x) })
}

/// Like [`scheduling_proxy`] but clamps any excess instead of failing; used
/// by the online controller, which must keep running.
pub fn scheduling_proxy_clamped<M: Qlpv + ?Sized>(model: &M, x: &DVector<f64>) -> Result<Scheduling, ModelError> {
    check_len("state", model.dims().n_x, x.len())?;
    let raw = model.proxy(x)?;
    let rho = model.sets().scheduling.clamp(&raw);
    let clamped = rho != raw;
    Ok(Scheduling { rho, clamped, state_outside_box: !model.sets().state.contains(x) })
}

/// `‖[f(x,u); g(x,u)] − [A(ρ)x + B(ρ)u; C(ρ)x + D(ρ)u]‖₂` with `ρ = f_ρ(x)`.
///
/// Zero (to rounding) certifies that the LPV form reproduces the plant at `(x, u)`.
pub fn embedding_residual<M, P>(model: &M, plant: &P, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, ModelError>
where
    M: Qlpv + ?Sized,
    P: NonlinearPlant + ?Sized,
{
    let (lpv, nl) = embedding_pair(model, plant, x, u)?;
    Ok((lpv - nl).norm())
}

/// Residual of [`embedding_residual`] divided by `‖[f(x,u); g(x,u)]‖₂`.
pub fn relative_embedding_residual<M, P>(
    model: &M,
    plant: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64, ModelError>
where
    M: Qlpv + ?Sized,
    P: NonlinearPlant + ?Sized,
{
    let (lpv, nl) = embedding_pair(model, plant, x, u)?;
    let scale = nl.norm();
    Ok(if scale > 0.0 { (lpv - &nl).norm() / scale } else { (lpv - nl).norm() })
}

fn embedding_pair<M, P>(
    model: &M,
    plant: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), ModelError>
where
    M: Qlpv + ?Sized,
    P: NonlinearPlant + ?Sized,
{
    let dims = model.dims();
    check_len("state", dims.n_x, x.len())?;
    check_len("input", dims.n_u, u.len())?;
    let rho = model.proxy(x)?;
    let m = eval_matrices(model, &rho)?;
    let lpv_next = &m.a * x + &m.b * u;
    let lpv_out = &m.c * x + &m.d * u;
    let nl_next = plant.step(x, u)?;
    let nl_out = plant.output(x, u)?;
    let join = |a: DVector<f64>, b: DVector<f64>| {
        let mut v: Vec<f64> = a.iter().copied().collect();
        v.extend(b.iter().copied());
        DVector::from_vec(v)
    };
    Ok((join(lpv_next, lpv_out), join(nl_next, nl_out)))
}

/// Central finite-difference Jacobian of the proxy with per-component step
/// `rel_step · max(|x_i|, 1)`.
pub fn proxy_jacobian_fd<M: Qlpv + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    rel_step: f64,
) -> Result<DMatrix<f64>, ModelError> {
    let n_rho = model.dims().n_rho;
    let mut jac = DMatrix::zeros(n_rho, x.len());
    for i in 0..x.len() {
        let h = rel_step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (model.proxy(&xp)? - model.proxy(&xm)?) / (2.0 * h);
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// Box hull of `f_ρ` over a uniform grid of the state box (corners included).
///
/// Exact when every proxy component is monotone in each state coordinate.
pub fn scheduling_hull<M: Qlpv + ?Sized>(
    model: &M,
    state_box: &BoxSet,
    points_per_dim: usize,
) -> Result<BoxSet, ModelError> {
    let pts = crate::grid::uniform_points(state_box, points_per_dim.max(2))?;
    let mut images = Vec::with_capacity(pts.len());
    for p in &pts {
        images.push(model.proxy(p)?);
    }
    BoxSet::hull(images.iter()).ok_or_else(|| ModelError::Invalid("empty state box".into()))
}

/// Time-invariant model with constant matrices, used for tests and as a
/// degenerate LPV case (the proxy returns a constant zero scheduling value).
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub matrices: LpvMatrices,
    pub sets: ModelSets,
    pub sample_time: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, ModelError> {
        let (n_x, n_u, n_y) = (a.nrows(), b.ncols(), c.nrows());
        check_len("A columns", n_x, a.ncols())?;
        check_len("B rows", n_x, b.nrows())?;
        check_len("C columns", n_x, c.ncols())?;
        check_len("D rows", n_y, d.nrows())?;
        check_len("D columns", n_u, d.ncols())?;
        let sets = ModelSets {
            state: BoxSet::unbounded(n_x),
            input: BoxSet::unbounded(n_u),
            output: BoxSet::unbounded(n_y),
            scheduling: SchedulingSet::new(BoxSet::new(DVector::zeros(1), DVector::zeros(1))?)?,
        };
        Ok(Self { matrices: LpvMatrices { a, b, c, d }, sets, sample_time: 1.0 })
    }

    pub fn with_sets(mut self, state: BoxSet, input: BoxSet, output: BoxSet) -> Self {
        self.sets.state = state;
        self.sets.input = input;
        self.sets.output = output;
        self
    }
}

impl Qlpv for LinearModel {
    fn dims(&self) -> Dims {
        Dims { n_x: self.matrices.a.nrows(), n_u: self.matrices.b.ncols(), n_y: self.matrices.c.nrows(), n_rho: 1 }
    }

    fn matrices(&self, _rho: &DVector<f64>) -> LpvMatrices {
        self.matrices.clone()
    }

    fn proxy(&self, _x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(DVector::zeros(1))
    }

    fn proxy_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        Ok(DMatrix::zeros(1, x.len()))
    }

    fn sets(&self) -> &ModelSets {
        &self.sets
    }

    fn sample_time(&self) -> f64 {
        self.sample_time
    }
}

impl NonlinearPlant for LinearModel {
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(&self.matrices.a * x + &self.matrices.b * u)
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(&self.matrices.c * x + &self.matrices.d * u)
    }
}
