//! Simulated plants and their LPV models.

use lpvmpc_core::demo::DemoLpv;
use lpvmpc_core::gaslift::{gaslift_outputs, gaslift_qlpv, GasLift, GasLiftParams, GasLiftPlant, BAR};
use lpvmpc_core::model::LinearModel;
use lpvmpc_core::{BoxSet, ModelError, NonlinearPlant, Qlpv};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scenario::{BoxSpec, PlantSpec};

/// Column name and display scale (`display = SI / scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub unit: String,
    pub scale: f64,
}

impl Channel {
    fn new(name: &str, unit: &str, scale: f64) -> Self {
        Self { name: name.into(), unit: unit.into(), scale }
    }
}

#[derive(Debug, Clone)]
pub enum Plant {
    GasLift { model: GasLift, sim: GasLiftPlant },
    Demo(DemoLpv),
    Linear(LinearModel),
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config(format!("matrix {what} must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn box_of(spec: &Option<BoxSpec>, n: usize, what: &str) -> Result<BoxSet> {
    let Some(b) = spec else { return Ok(BoxSet::unbounded(n)) };
    if b.lower.len() != n || b.upper.len() != n {
        return Err(Error::Config(format!("{what} box must have {n} entries")));
    }
    let lo = DVector::from_iterator(n, b.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
    let hi = DVector::from_iterator(n, b.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)));
    BoxSet::new(lo, hi).map_err(|e| Error::Config(format!("{what} box: {e}")))
}

impl Plant {
    pub fn from_spec(spec: &PlantSpec) -> Result<Self> {
        Ok(match spec {
            PlantSpec::GasLift { params, substeps } => {
                if *substeps == 0 {
                    return Err(Error::Config("substeps must be positive".into()));
                }
                let p: GasLiftParams = (*params).into();
                let model = gaslift_qlpv(p).map_err(|e| Error::Config(e.to_string()))?;
                Plant::GasLift { model, sim: GasLiftPlant::new(p, *substeps) }
            }
            PlantSpec::Demo => Plant::Demo(DemoLpv::new()),
            PlantSpec::Linear { a, b, c, d, state_box, input_box, output_box } => {
                let (a, b, c, d) = (matrix(a, "a")?, matrix(b, "b")?, matrix(c, "c")?, matrix(d, "d")?);
                let (n_x, n_u, n_y) = (a.nrows(), b.ncols(), c.nrows());
                let m = LinearModel::new(a, b, c, d).map_err(|e| Error::Config(e.to_string()))?;
                Plant::Linear(m.with_sets(
                    box_of(state_box, n_x, "state")?,
                    box_of(input_box, n_u, "input")?,
                    box_of(output_box, n_y, "output")?,
                ))
            }
        })
    }

    pub fn model(&self) -> &dyn Qlpv {
        match self {
            Plant::GasLift { model, .. } => model,
            Plant::Demo(m) => m,
            Plant::Linear(m) => m,
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ModelError> {
        match self {
            Plant::GasLift { sim, .. } => sim.step(x, u),
            Plant::Demo(m) => m.step(x, u),
            Plant::Linear(m) => m.step(x, u),
        }
    }

    /// Physical output in SI units; includes the model's output offset.
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ModelError> {
        match self {
            Plant::GasLift { sim, .. } => gaslift_outputs(&sim.params, x, u),
            Plant::Demo(m) => m.output(x, u),
            Plant::Linear(m) => m.output(x, u),
        }
    }

    pub fn states(&self) -> Vec<Channel> {
        match self {
            Plant::GasLift { .. } => {
                vec![Channel::new("m_ga", "kg", 1.0), Channel::new("m_gt", "kg", 1.0), Channel::new("m_ot", "kg", 1.0)]
            }
            _ => numbered("x", self.model().dims().n_x),
        }
    }

    pub fn inputs(&self) -> Vec<Channel> {
        match self {
            Plant::GasLift { .. } => vec![Channel::new("u_gas", "-", 1.0), Channel::new("u_prod", "-", 1.0)],
            _ => numbered("u", self.model().dims().n_u),
        }
    }

    pub fn outputs(&self) -> Vec<Channel> {
        match self {
            Plant::GasLift { .. } => vec![Channel::new("p_fp", "bar", BAR), Channel::new("w_gin", "kg/s", 1.0)],
            _ => numbered("y", self.model().dims().n_y),
        }
    }

    pub fn to_display(&self, y: &DVector<f64>) -> DVector<f64> {
        let ch = self.outputs();
        DVector::from_iterator(y.len(), y.iter().zip(&ch).map(|(v, c)| v / c.scale))
    }

    pub fn from_display(&self, y: &[f64]) -> DVector<f64> {
        let ch = self.outputs();
        DVector::from_iterator(y.len(), y.iter().zip(&ch).map(|(v, c)| v * c.scale))
    }

    /// Equilibrium under a constant input, by simulating the plant until the
    /// state stops moving.
    pub fn equilibrium(&self, u: &DVector<f64>, x_guess: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = x_guess.clone();
        for _ in 0..200_000 {
            let next = self.step(&x, u)?;
            let moved = (&next - &x).amax();
            x = next;
            if moved <= 1e-12 * x.amax().max(1.0) {
                return Ok(x);
            }
        }
        Err(Error::Config("plant did not settle under the trim input".into()))
    }

    /// A state in the middle of the admissible region, used to start searches.
    pub fn nominal_state(&self) -> DVector<f64> {
        match self {
            Plant::GasLift { .. } => DVector::from_column_slice(&[4000.0, 700.0, 1700.0]),
            _ => DVector::zeros(self.model().dims().n_x),
        }
    }
}

fn numbered(prefix: &str, n: usize) -> Vec<Channel> {
    (1..=n).map(|i| Channel::new(&format!("{prefix}{i}"), "-", 1.0)).collect()
}
