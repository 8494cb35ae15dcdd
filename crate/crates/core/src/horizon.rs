//! Condensed prediction operators.
//!
//! For a scheduling trajectory `ρ(k|k), …, ρ(k+N_p−1|k)` the predicted states
//! and outputs are affine in the stacked input `U = (u(k|k), …, u(k+N_p−1|k))`:
//!
//! ```text
//! X = 𝒜 x(k) + ℬ U     X = (x̂(k+1|k), …, x̂(k+N_p|k))
//! Y = 𝒞 x(k) + 𝒟 U     Y = (ŷ(k|k),   …, ŷ(k+N_p−1|k))
//! ```

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, ModelError};
use crate::model::{eval_matrices, Dims, LpvMatrices, Qlpv};
use crate::schedule::SchedulingTrajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub cal_a: DMatrix<f64>,
    pub cal_b: DMatrix<f64>,
    pub cal_c: DMatrix<f64>,
    pub cal_d: DMatrix<f64>,
    pub n_p: usize,
    pub origin: usize,
    pub dims: Dims,
}

pub fn build_prediction<M: Qlpv + ?Sized>(
    model: &M,
    traj: &SchedulingTrajectory,
) -> Result<PredictionMatrices, ModelError> {
    let steps = traj.entries.iter().map(|r| eval_matrices(model, r)).collect::<Result<Vec<_>, _>>()?;
    build_from_matrices(&steps, traj.origin)
}

/// Condenses an explicit sequence of per-step matrices.
pub fn build_from_matrices(steps: &[LpvMatrices], origin: usize) -> Result<PredictionMatrices, ModelError> {
    let n_p = steps.len();
    if n_p == 0 {
        return Err(ModelError::Invalid("empty prediction horizon".into()));
    }
    let (n_x, n_u, n_y) = (steps[0].a.nrows(), steps[0].b.ncols(), steps[0].c.nrows());
    for s in steps {
        check_len("A rows", n_x, s.a.nrows())?;
        check_len("A columns", n_x, s.a.ncols())?;
        check_len("B rows", n_x, s.b.nrows())?;
        check_len("B columns", n_u, s.b.ncols())?;
        check_len("C rows", n_y, s.c.nrows())?;
        check_len("C columns", n_x, s.c.ncols())?;
        check_len("D rows", n_y, s.d.nrows())?;
        check_len("D columns", n_u, s.d.ncols())?;
    }
    let mut cal_a = DMatrix::zeros(n_x * n_p, n_x);
    let mut cal_b = DMatrix::zeros(n_x * n_p, n_u * n_p);
    let mut cal_c = DMatrix::zeros(n_y * n_p, n_x);
    let mut cal_d = DMatrix::zeros(n_y * n_p, n_u * n_p);

    // 𝒜_{i−1} and ℬ_{i−1} (the map to x̂(k+i|k)); start from x̂(k|k) = x(k).
    let mut prev_a = DMatrix::<f64>::identity(n_x, n_x);
    let mut prev_b = DMatrix::<f64>::zeros(n_x, n_u * n_p);
    for (i, s) in steps.iter().enumerate() {
        let cr = i * n_y;
        cal_c.view_mut((cr, 0), (n_y, n_x)).copy_from(&(&s.c * &prev_a));
        let mut d_row = &s.c * &prev_b;
        d_row.view_mut((0, i * n_u), (n_y, n_u)).copy_from(&s.d);
        cal_d.view_mut((cr, 0), (n_y, n_u * n_p)).copy_from(&d_row);

        let next_a = &s.a * &prev_a;
        let mut next_b = &s.a * &prev_b;
        next_b.view_mut((0, i * n_u), (n_x, n_u)).copy_from(&s.b);
        let xr = i * n_x;
        cal_a.view_mut((xr, 0), (n_x, n_x)).copy_from(&next_a);
        cal_b.view_mut((xr, 0), (n_x, n_u * n_p)).copy_from(&next_b);
        prev_a = next_a;
        prev_b = next_b;
    }
    Ok(PredictionMatrices { cal_a, cal_b, cal_c, cal_d, n_p, origin, dims: Dims { n_x, n_u, n_y, n_rho: 0 } })
}

impl PredictionMatrices {
    fn check(&self, x_k: &DVector<f64>, u: &DVector<f64>) -> Result<(), ModelError> {
        check_len("state", self.dims.n_x, x_k.len())?;
        check_len("stacked input", self.dims.n_u * self.n_p, u.len())
    }

    /// Stacked `x̂(k+1|k), …, x̂(k+N_p|k)`.
    pub fn predict_states(&self, x_k: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check(x_k, u)?;
        Ok(&self.cal_a * x_k + &self.cal_b * u)
    }

    /// Stacked `ŷ(k|k), …, ŷ(k+N_p−1|k)`.
    pub fn predict_outputs(&self, x_k: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check(x_k, u)?;
        Ok(&self.cal_c * x_k + &self.cal_d * u)
    }

    /// Rows of `(𝒜, ℬ)` producing `x̂(k+i+1|k)`.
    pub fn state_rows(&self, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n_x = self.dims.n_x;
        (self.cal_a.rows(i * n_x, n_x).into_owned(), self.cal_b.rows(i * n_x, n_x).into_owned())
    }
}
