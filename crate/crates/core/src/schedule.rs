//! Scheduling-trajectory extrapolation over the prediction horizon.
//!
//! At sample `k` the controller needs a guess `ρ(k+j|k)`, `j = 0..N_p−1`, to
//! freeze the LPV model into a time-varying linear one. Two predictors are
//! provided: the frozen guess (repeat the measured value) and a first-order
//! Taylor extrapolation that reuses the state trajectory predicted at `k−1`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, ModelError};
use crate::model::SchedulingSet;

/// Clamping beyond this excess is reported through the trajectory flags.
pub const CLAMP_REPORT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Predictor {
    /// `ρ(k+j|k) = ρ(k)` for every `j`.
    Frozen,
    /// Taylor extrapolation anchored at the measurement:
    /// `ρ(k+j|k) = ρ(k+j−1|k) + J(x(k)) δ_{j−1}`, `ρ(k|k) = f_ρ(x(k))`.
    #[default]
    Taylor,
    /// Entrywise carry of the previous trajectory:
    /// `ρ(k+j|k) = ρ(k+j|k−1) + J(x(k)) δ_{j−1}`, see [`taylor_update`].
    TaylorCarry,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Frozen => "frozen",
            Predictor::Taylor => "taylor",
            Predictor::TaylorCarry => "taylor-carry",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(Predictor::Frozen),
            "taylor" => Some(Predictor::Taylor),
            "taylor-carry" => Some(Predictor::TaylorCarry),
            _ => None,
        }
    }
}

/// `ρ(k|k), …, ρ(k+N_p−1|k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingTrajectory {
    pub entries: Vec<DVector<f64>>,
    pub origin: usize,
    /// Per entry: the unclamped value left `𝒫` by more than [`CLAMP_REPORT_TOL`].
    pub clamped: Vec<bool>,
}

impl SchedulingTrajectory {
    pub fn horizon(&self) -> usize {
        self.entries.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|c| *c)
    }

    fn from_raw(set: &SchedulingSet, raw: Vec<DVector<f64>>, origin: usize) -> Self {
        let mut entries = Vec::with_capacity(raw.len());
        let mut clamped = Vec::with_capacity(raw.len());
        for r in raw {
            clamped.push(set.excess(&r) > CLAMP_REPORT_TOL);
            entries.push(set.clamp(&r));
        }
        Self { entries, origin, clamped }
    }
}

/// Differences of the state trajectory predicted at `k−1`, length `N_p−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDeltaTrajectory {
    pub deltas: Vec<DVector<f64>>,
    pub origin: usize,
}

fn check_horizon(n_p: usize) -> Result<(), ModelError> {
    if n_p < 2 {
        return Err(ModelError::Invalid(alloc::format!("horizon must be at least 2, got {n_p}")));
    }
    Ok(())
}

/// `N_p` copies of the measured `rho0`; used at the first sample.
pub fn init_trajectory(
    set: &SchedulingSet,
    rho0: &DVector<f64>,
    n_p: usize,
) -> Result<SchedulingTrajectory, ModelError> {
    frozen_trajectory(set, rho0, n_p, 0)
}

/// The frozen-parameter guess at sample `k`.
pub fn frozen_trajectory(
    set: &SchedulingSet,
    rho_k: &DVector<f64>,
    n_p: usize,
    k: usize,
) -> Result<SchedulingTrajectory, ModelError> {
    check_horizon(n_p)?;
    check_len("scheduling vector", set.dim(), rho_k.len())?;
    Ok(SchedulingTrajectory::from_raw(set, alloc::vec![rho_k.clone(); n_p], k))
}

/// Deltas from the states `x̂(k|k−1), …, x̂(k+N_p−1|k−1)` predicted at `k−1`.
///
/// `δ_0 = x̂(k+1|k−1) − x(k)` and `δ_j = x̂(k+j+1|k−1) − x̂(k+j|k−1)`.
pub fn build_state_deltas(
    prev_predicted: &[DVector<f64>],
    x_measured: &DVector<f64>,
    k: usize,
) -> Result<StateDeltaTrajectory, ModelError> {
    check_horizon(prev_predicted.len())?;
    let n_x = x_measured.len();
    for p in prev_predicted {
        check_len("predicted state", n_x, p.len())?;
    }
    let mut deltas = Vec::with_capacity(prev_predicted.len() - 1);
    deltas.push(&prev_predicted[1] - x_measured);
    for j in 1..prev_predicted.len() - 1 {
        deltas.push(&prev_predicted[j + 1] - &prev_predicted[j]);
    }
    Ok(StateDeltaTrajectory { deltas, origin: k })
}

/// Entrywise recursion `ρ(k+j|k) = ρ(k+j|k−1) + J δ_{j−1}` for `j ≥ 1`, with
/// `ρ(k|k)` replaced by the measurement `rho_k`.
///
/// Every entry of the new trajectory has a counterpart in `prev`, so no tail
/// closure is needed.
pub fn taylor_update(
    set: &SchedulingSet,
    prev: &SchedulingTrajectory,
    rho_k: &DVector<f64>,
    jac_k: &DMatrix<f64>,
    deltas: &StateDeltaTrajectory,
) -> Result<SchedulingTrajectory, ModelError> {
    let n_p = prev.horizon();
    check_horizon(n_p)?;
    check_deltas(set, rho_k, jac_k, deltas, n_p)?;
    let mut raw = Vec::with_capacity(n_p);
    raw.push(rho_k.clone());
    for j in 1..n_p {
        raw.push(&prev.entries[j] + jac_k * &deltas.deltas[j - 1]);
    }
    Ok(SchedulingTrajectory::from_raw(set, raw, deltas.origin))
}

/// Taylor extrapolation anchored at the measurement: `ρ(k|k) = rho_k` and
/// `ρ(k+j|k) = ρ(k+j−1|k) + J_{j−1} δ_{j−1}`.
///
/// `jacs` holds either one Jacobian (evaluated at `x(k)`, used for the whole
/// horizon) or `N_p−1` Jacobians along the predicted states.
pub fn anchored_taylor(
    set: &SchedulingSet,
    rho_k: &DVector<f64>,
    jacs: &[DMatrix<f64>],
    deltas: &StateDeltaTrajectory,
) -> Result<SchedulingTrajectory, ModelError> {
    let n_p = deltas.deltas.len() + 1;
    check_horizon(n_p)?;
    if jacs.is_empty() || (jacs.len() != 1 && jacs.len() != n_p - 1) {
        return Err(ModelError::Dimension { what: "Jacobian list", expected: n_p - 1, found: jacs.len() });
    }
    for jac in jacs {
        check_deltas(set, rho_k, jac, deltas, n_p)?;
    }
    let mut raw = Vec::with_capacity(n_p);
    let mut acc = rho_k.clone();
    raw.push(acc.clone());
    for (j, d) in deltas.deltas.iter().enumerate() {
        let jac = if jacs.len() == 1 { &jacs[0] } else { &jacs[j] };
        acc += jac * d;
        raw.push(acc.clone());
    }
    Ok(SchedulingTrajectory::from_raw(set, raw, deltas.origin))
}

fn check_deltas(
    set: &SchedulingSet,
    rho_k: &DVector<f64>,
    jac: &DMatrix<f64>,
    deltas: &StateDeltaTrajectory,
    n_p: usize,
) -> Result<(), ModelError> {
    check_len("scheduling vector", set.dim(), rho_k.len())?;
    check_len("Jacobian rows", set.dim(), jac.nrows())?;
    check_len("state delta count", n_p - 1, deltas.deltas.len())?;
    for d in &deltas.deltas {
        check_len("state delta", jac.ncols(), d.len())?;
    }
    Ok(())
}

/// Realized extrapolation errors `‖ρ(k+j|k) − ρ(k+j)‖₂`.
#[derive(Debug, Clone, Default)]
pub struct PredictorDiagnostics {
    predictions: Vec<SchedulingTrajectory>,
    realized: Vec<Option<DVector<f64>>>,
}

impl PredictorDiagnostics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_prediction(&mut self, traj: &SchedulingTrajectory) {
        self.predictions.push(traj.clone());
    }

    pub fn record_realized(&mut self, k: usize, rho: &DVector<f64>) {
        if self.realized.len() <= k {
            self.realized.resize(k + 1, None);
        }
        self.realized[k] = Some(rho.clone());
    }

    /// Errors of the trajectory issued at `origin`, for every lead `j` already realized.
    pub fn errors(&self, origin: usize) -> Option<Vec<f64>> {
        let traj = self.predictions.iter().find(|t| t.origin == origin)?;
        let mut out = Vec::with_capacity(traj.horizon());
        for (j, r) in traj.entries.iter().enumerate() {
            match self.realized.get(origin + j).and_then(|v| v.as_ref()) {
                Some(real) => out.push((r - real).norm()),
                None => break,
            }
        }
        Some(out)
    }

    /// Mean error over leads `1..N_p` of the fully realized trajectories whose
    /// origin lies in `[from, to)`.
    pub fn mean_error(&self, from: usize, to: usize) -> Option<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        for t in self.predictions.iter().filter(|t| t.origin >= from && t.origin < to) {
            let e = self.errors(t.origin)?;
            if e.len() < t.horizon() {
                continue;
            }
            sum += e[1..].iter().sum::<f64>();
            count += e.len() - 1;
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Largest error over all leads of fully realized trajectories with origin in `[from, to)`.
    pub fn max_error(&self, from: usize, to: usize) -> Option<f64> {
        let mut worst: Option<f64> = None;
        for t in self.predictions.iter().filter(|t| t.origin >= from && t.origin < to) {
            let e = self.errors(t.origin)?;
            if e.len() < t.horizon() {
                continue;
            }
            let m = e.iter().copied().fold(0.0, f64::max);
            worst = Some(worst.map_or(m, |w: f64| w.max(m)));
        }
        worst
    }

    /// Largest deviation `max_j ‖ρ(k+j|k) − ρ(k|k)‖` of the trajectory issued at `origin`.
    pub fn spread(&self, origin: usize) -> Option<f64> {
        let t = self.predictions.iter().find(|t| t.origin == origin)?;
        Some(t.entries.iter().map(|r| (r - &t.entries[0]).norm()).fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoxSet;
    use alloc::vec;

    fn set1(lo: f64, hi: f64) -> SchedulingSet {
        SchedulingSet::new(BoxSet::new(DVector::from_element(1, lo), DVector::from_element(1, hi)).unwrap()).unwrap()
    }

    fn s(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn init_repeats_measurement() {
        let t = init_trajectory(&set1(-10.0, 10.0), &s(0.5), 6).unwrap();
        assert_eq!(t.entries, vec![s(0.5); 6]);
        assert!(init_trajectory(&set1(-10.0, 10.0), &s(0.5), 1).is_err());
    }

    #[test]
    fn init_clamps_and_flags() {
        let t = init_trajectory(&set1(0.0, 1.0), &s(2.0), 2).unwrap();
        assert_eq!(t.entries, vec![s(1.0); 2]);
        assert!(t.any_clamped());
    }

    #[test]
    fn scalar_carry_example() {
        let set = set1(-10.0, 10.0);
        let prev = SchedulingTrajectory { entries: vec![s(1.0), s(2.0)], origin: 0, clamped: vec![false; 2] };
        let deltas = StateDeltaTrajectory { deltas: vec![s(0.1)], origin: 1 };
        let next = taylor_update(&set, &prev, &s(1.0), &DMatrix::from_element(1, 1, 3.0), &deltas).unwrap();
        assert!((next.entries[1][0] - 2.3).abs() < 1e-15);
    }

    #[test]
    fn zero_jacobian_persists_previous() {
        let set = set1(-10.0, 10.0);
        let prev = SchedulingTrajectory { entries: vec![s(1.0), s(2.0), s(3.0)], origin: 4, clamped: vec![false; 3] };
        let deltas = StateDeltaTrajectory { deltas: vec![s(0.7), s(-0.2)], origin: 5 };
        let next = taylor_update(&set, &prev, &s(1.5), &DMatrix::zeros(1, 1), &deltas).unwrap();
        assert_eq!(next.entries, vec![s(1.5), s(2.0), s(3.0)]);
    }

    #[test]
    fn arithmetic_progression_gives_constant_deltas() {
        let xs: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64 * 0.5, -(i as f64)])).collect();
        let d = build_state_deltas(&xs, &xs[0], 3).unwrap();
        assert_eq!(d.deltas.len(), 4);
        for v in &d.deltas {
            assert_eq!(*v, DVector::from_vec(vec![0.5, -1.0]));
        }
    }

    #[test]
    fn anchored_taylor_accumulates() {
        let set = set1(-10.0, 10.0);
        let deltas = StateDeltaTrajectory { deltas: vec![s(0.1), s(0.2)], origin: 1 };
        let t = anchored_taylor(&set, &s(1.0), &[DMatrix::from_element(1, 1, 2.0)], &deltas).unwrap();
        let got: Vec<f64> = t.entries.iter().map(|v| v[0]).collect();
        assert!((got[1] - 1.2).abs() < 1e-15 && (got[2] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_measure_realized_error() {
        let mut d = PredictorDiagnostics::new();
        d.record_prediction(&SchedulingTrajectory {
            entries: vec![s(0.0), s(1.0)],
            origin: 0,
            clamped: vec![false; 2],
        });
        d.record_realized(0, &s(0.0));
        d.record_realized(1, &s(0.5));
        assert_eq!(d.errors(0).unwrap(), vec![0.0, 0.5]);
        assert_eq!(d.mean_error(0, 1), Some(0.5));
    }
}
