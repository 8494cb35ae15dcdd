//! Terminal-ingredient jobs and the JSON artifact shared by `synth-terminal`,
//! `verify-terminal` and scenarios that load ingredients from a file.

use std::path::Path;

use lpvmpc_core::model::eval_matrices;
use lpvmpc_core::mpc::WeightSpace;
use lpvmpc_core::terminal::{
    admissibility_check, invariance_check, lyapunov_decrease_check, operating_region, synthesize, verify, vertices_at,
    LmiBounds, LmiCertificate, SampleReport, SchedulingGrid, SynthesisSettings, TerminalError, TerminalIngredients,
    Vertex, CERT_TOL,
};
use lpvmpc_core::{BoxSet, Qlpv};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::Plant;
use crate::scenario::{PlantSpec, TerminalSpec, WeightSpaceName};

/// Input of `synth-terminal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalJob {
    pub plant: PlantSpec,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    #[serde(default)]
    pub weight_space: WeightSpaceName,
    pub terminal: TerminalSpec,
    #[serde(default = "default_samples")]
    pub monte_carlo: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub valid: bool,
    pub margin: f64,
    pub n_vertices: usize,
    pub points_per_dim: usize,
    pub lmi1_min: f64,
    pub lmi2_min: f64,
    pub lmi3_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl CertificateRecord {
    fn new(c: &LmiCertificate, points_per_dim: usize) -> Self {
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            valid: c.valid,
            margin: c.margin,
            n_vertices: c.n_vertices,
            points_per_dim,
            lmi1_min: min(&c.lmi1),
            lmi2_min: min(&c.lmi2),
            lmi3_min: min(&c.lmi3),
            reason: c.reason.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub samples: usize,
    pub violations: usize,
    pub worst: f64,
}

impl From<SampleReport> for SampleRecord {
    fn from(r: SampleReport) -> Self {
        Self { samples: r.samples, violations: r.violations, worst: r.worst }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRecord {
    pub seed: u64,
    pub invariance: SampleRecord,
    pub lyapunov: SampleRecord,
    pub admissibility: SampleRecord,
}

impl MonteCarloRecord {
    pub fn passed(&self) -> bool {
        self.invariance.violations == 0 && self.lyapunov.violations == 0 && self.admissibility.violations == 0
    }
}

/// Terminal ingredients in deviation coordinates around `(x_r, u_r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalArtifact {
    pub plant: PlantSpec,
    pub x_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub region_lower: Vec<f64>,
    pub region_upper: Vec<f64>,
    pub points_per_dim: usize,
    /// State-space stage weights used in the LMIs, row-major.
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub kappa: Vec<Vec<f64>>,
    pub logdet_history: Vec<f64>,
    pub certificate: CertificateRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_certificate: Option<CertificateRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloRecord>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nc = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn diag(v: &[f64], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if v.len() != n {
        return Err(Error::Config(format!("{what} diagonal must have {n} entries, got {}", v.len())));
    }
    Ok(DMatrix::from_diagonal(&vector(v)))
}

/// Stage weights in state space; output weights are mapped through `C` at the trim.
pub fn state_weights(
    model: &dyn Qlpv,
    q_diag: &[f64],
    r_diag: &[f64],
    space: WeightSpaceName,
    x_r: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = model.dims();
    let r = diag(r_diag, d.n_u, "R")?;
    let q = match WeightSpace::from(space) {
        WeightSpace::State => diag(q_diag, d.n_x, "Q")?,
        WeightSpace::Output => {
            let qy = diag(q_diag, d.n_y, "Q")?;
            let m = eval_matrices(model, &model.proxy(x_r)?)?;
            let q = m.c.transpose() * qy * &m.c;
            (&q + q.transpose()) * 0.5
        }
    };
    Ok((q, r))
}

/// Everything needed to synthesize or re-verify at one trim.
pub struct TerminalSetup {
    pub x_r: DVector<f64>,
    pub u_r: DVector<f64>,
    pub bounds: LmiBounds,
    pub grid: SchedulingGrid,
    pub vertices: Vec<Vertex>,
}

pub fn setup(plant: &Plant, spec: &TerminalSpec) -> Result<TerminalSetup> {
    let model = plant.model();
    let d = model.dims();
    if spec.trim.input.len() != d.n_u {
        return Err(Error::Config(format!("trim input must have {} entries", d.n_u)));
    }
    if spec.x_bar.len() != d.n_x {
        return Err(Error::Config(format!("x_bar must have {} entries", d.n_x)));
    }
    let u_r = vector(&spec.trim.input);
    let x_r = match &spec.trim.state {
        Some(x) if x.len() == d.n_x => vector(x),
        Some(_) => return Err(Error::Config(format!("trim state must have {} entries", d.n_x))),
        None => plant.equilibrium(&u_r, &plant.nominal_state())?,
    };
    let u_bar = match &spec.u_bar {
        Some(u) if u.len() == d.n_u => vector(u),
        Some(_) => return Err(Error::Config(format!("u_bar must have {} entries", d.n_u))),
        None => {
            let b = &model.sets().input;
            DVector::from_fn(d.n_u, |i, _| (u_r[i] - b.lower()[i]).min(b.upper()[i] - u_r[i]))
        }
    };
    let bounds = LmiBounds { x_bar: vector(&spec.x_bar), u_bar };
    let region = operating_region(model, &x_r, &bounds.x_bar, spec.points_per_dim.max(2))?;
    let grid = SchedulingGrid::new(region, spec.points_per_dim)?;
    let vertices = vertices_at(model, &grid.points)?;
    Ok(TerminalSetup { x_r, u_r, bounds, grid, vertices })
}

fn merge(total: &mut SampleReport, r: SampleReport) {
    total.samples += r.samples;
    total.violations += r.violations;
    total.worst = total.worst.max(r.worst);
}

/// Sampling checks; each state sample is paired with an independent uniform
/// draw of the scheduling variable from `region`, so points between grid nodes
/// are exercised too.
fn monte_carlo(
    model: &dyn Qlpv,
    region: &BoxSet,
    ing: &TerminalIngredients,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = || SampleReport { samples: 0, violations: 0, worst: f64::NEG_INFINITY };
    let (mut inv, mut lyap) = (empty(), empty());
    let (lo, hi) = (region.lower(), region.upper());
    for _ in 0..samples {
        let rho =
            DVector::from_fn(lo.len(), |i, _| if hi[i] > lo[i] { rng.random_range(lo[i]..=hi[i]) } else { lo[i] });
        let v = vertices_at(model, std::slice::from_ref(&rho))?;
        merge(&mut inv, invariance_check(ing, &v, 1, &mut rng));
        merge(&mut lyap, lyapunov_decrease_check(ing, &v, &ing.q, &ing.r, 1, &mut rng));
    }
    Ok(MonteCarloRecord {
        seed,
        invariance: inv.into(),
        lyapunov: lyap.into(),
        admissibility: admissibility_check(ing, samples, &mut rng).into(),
    })
}

fn dense_check(plant: &Plant, grid: &SchedulingGrid, ing: &TerminalIngredients) -> Result<CertificateRecord> {
    let dense = grid.densified()?;
    let vertices = vertices_at(plant.model(), &dense.points)?;
    let cert = verify(&vertices, &ing.q, &ing.r, &ing.y, &ing.w, &ing.bounds, CERT_TOL)?;
    Ok(CertificateRecord::new(&cert, dense.points_per_dim))
}

/// Synthesizes ingredients for `job`, re-verifies them on the densified grid
/// and runs the Monte Carlo checks against the dense vertex set.
pub fn run_job(job: &TerminalJob) -> Result<TerminalArtifact> {
    let plant = Plant::from_spec(&job.plant)?;
    let s = setup(&plant, &job.terminal)?;
    let (q, r) = state_weights(plant.model(), &job.q_diag, &job.r_diag, job.weight_space, &s.x_r)?;
    let settings = SynthesisSettings { sense: job.terminal.sense.into(), ..SynthesisSettings::default() };
    let syn = synthesize(&s.vertices, &q, &r, &s.bounds, &settings)?;
    let ing = &syn.ingredients;
    let dense = dense_check(&plant, &s.grid, ing)?;
    let mc = match job.monte_carlo {
        0 => None,
        n => Some(monte_carlo(plant.model(), &s.grid.region, ing, n, job.seed)?),
    };
    Ok(TerminalArtifact {
        plant: job.plant.clone(),
        x_r: s.x_r.iter().copied().collect(),
        u_r: s.u_r.iter().copied().collect(),
        x_bar: s.bounds.x_bar.iter().copied().collect(),
        u_bar: s.bounds.u_bar.iter().copied().collect(),
        region_lower: s.grid.region.lower().iter().copied().collect(),
        region_upper: s.grid.region.upper().iter().copied().collect(),
        points_per_dim: s.grid.points_per_dim,
        q: rows(&ing.q),
        r: rows(&ing.r),
        y: rows(&ing.y),
        w: rows(&ing.w),
        p: rows(&ing.p),
        kappa: rows(&ing.kappa),
        logdet_history: syn.logdet_history.clone(),
        certificate: CertificateRecord::new(&ing.certificate, s.grid.points_per_dim),
        dense_certificate: Some(dense),
        monte_carlo: mc,
    })
}

/// Result of `verify-terminal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub grid: CertificateRecord,
    pub dense: CertificateRecord,
    pub monte_carlo: Option<MonteCarloRecord>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.grid.valid && self.dense.valid && self.monte_carlo.as_ref().is_none_or(MonteCarloRecord::passed)
    }
}

impl TerminalArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json { path: path.into(), source })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn bounds(&self) -> LmiBounds {
        LmiBounds { x_bar: vector(&self.x_bar), u_bar: vector(&self.u_bar) }
    }

    /// Rebuilds the ingredients from `(Y, W)`; `P` and `κ_t` are recomputed.
    pub fn ingredients(&self) -> Result<TerminalIngredients> {
        let y = matrix(&self.y, "Y")?;
        let w = matrix(&self.w, "W")?;
        let q = matrix(&self.q, "Q")?;
        let r = matrix(&self.r, "R")?;
        let bounds = self.bounds();
        let placeholder = LmiCertificate {
            lmi1: Vec::new(),
            lmi2: Vec::new(),
            lmi3: Vec::new(),
            margin: self.certificate.margin,
            valid: self.certificate.valid,
            n_vertices: self.certificate.n_vertices,
            reason: self.certificate.reason.clone(),
        };
        let (n, m) = (y.nrows(), w.nrows());
        if y.ncols() != n || w.ncols() != n || q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(TerminalError::Dimension { what: "terminal artifact", expected: n, found: w.ncols() }.into());
        }
        Ok(TerminalIngredients::from_yw(y, w, q, r, bounds, placeholder)?)
    }

    /// Re-verifies the stored `(Y, W)` on the synthesis grid and its
    /// densification, then reruns the Monte Carlo checks.
    pub fn verify(&self, samples: usize, seed: u64) -> Result<VerifyReport> {
        let plant = Plant::from_spec(&self.plant)?;
        let ing = self.ingredients()?;
        let region = BoxSet::new(vector(&self.region_lower), vector(&self.region_upper))
            .map_err(|e| Error::Config(format!("scheduling region: {e}")))?;
        let grid = SchedulingGrid::new(region, self.points_per_dim)?;
        let vertices = vertices_at(plant.model(), &grid.points)?;
        let cert = verify(&vertices, &ing.q, &ing.r, &ing.y, &ing.w, &ing.bounds, CERT_TOL)?;
        let dense = dense_check(&plant, &grid, &ing)?;
        let mc = match samples {
            0 => None,
            n => Some(monte_carlo(plant.model(), &grid.region, &ing, n, seed)?),
        };
        Ok(VerifyReport { grid: CertificateRecord::new(&cert, self.points_per_dim), dense, monte_carlo: mc })
    }
}
