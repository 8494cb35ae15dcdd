//! A small open-loop unstable quasi-LPV system used to exercise the terminal
//! ingredients:
//!
//! ```text
//! x1⁺ = (1.1 + 0.3ρ) x1 + 0.2 x2 + (1 + 0.3ρ) u
//! x2⁺ = 0.9 x2,        ρ = x2 ∈ [−1, 1],    y = x
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, ModelError};
use crate::model::{BoxSet, Dims, LpvMatrices, ModelSets, NonlinearPlant, Qlpv, SchedulingSet};

#[derive(Debug, Clone)]
pub struct DemoLpv {
    sets: ModelSets,
}

impl DemoLpv {
    pub fn new() -> Self {
        let b = |lo: &[f64], hi: &[f64]| {
            BoxSet::new(DVector::from_column_slice(lo), DVector::from_column_slice(hi)).unwrap()
        };
        Self {
            sets: ModelSets {
                state: b(&[-5.0, -1.0], &[5.0, 1.0]),
                input: b(&[-2.0], &[2.0]),
                output: BoxSet::unbounded(2),
                scheduling: SchedulingSet::new(b(&[-1.0], &[1.0])).unwrap(),
            },
        }
    }

    pub fn with_boxes(state: BoxSet, input: BoxSet) -> Result<Self, ModelError> {
        check_len("state box", 2, state.dim())?;
        check_len("input box", 1, input.dim())?;
        let mut m = Self::new();
        let rho = BoxSet::new(DVector::from_element(1, state.lower()[1]), DVector::from_element(1, state.upper()[1]))?;
        m.sets.scheduling = SchedulingSet::new(rho)?;
        m.sets.state = state;
        m.sets.input = input;
        Ok(m)
    }
}

impl Default for DemoLpv {
    fn default() -> Self {
        Self::new()
    }
}

impl Qlpv for DemoLpv {
    fn dims(&self) -> Dims {
        Dims { n_x: 2, n_u: 1, n_y: 2, n_rho: 1 }
    }

    fn matrices(&self, rho: &DVector<f64>) -> LpvMatrices {
        let r = rho[0];
        LpvMatrices {
            a: DMatrix::from_row_slice(2, 2, &[1.1 + 0.3 * r, 0.2, 0.0, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[1.0 + 0.3 * r, 0.0]),
            c: DMatrix::identity(2, 2),
            d: DMatrix::zeros(2, 1),
        }
    }

    fn proxy(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("state", 2, x.len())?;
        Ok(DVector::from_element(1, x[1]))
    }

    fn proxy_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        check_len("state", 2, x.len())?;
        Ok(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]))
    }

    fn sets(&self) -> &ModelSets {
        &self.sets
    }

    fn sample_time(&self) -> f64 {
        1.0
    }
}

impl NonlinearPlant for DemoLpv {
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("state", 2, x.len())?;
        check_len("input", 1, u.len())?;
        let (x1, x2, u) = (x[0], x[1], u[0]);
        Ok(DVector::from_column_slice(&[1.1 * x1 + 0.3 * x2 * x1 + 0.2 * x2 + u + 0.3 * x2 * u, 0.9 * x2]))
    }

    fn output(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("state", 2, x.len())?;
        Ok(x.clone())
    }
}
