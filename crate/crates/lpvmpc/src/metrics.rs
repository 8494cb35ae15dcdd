//! Summary statistics of a closed-loop log.
//!
//! Standard deviations are sample standard deviations (divisor `n − 1`, zero
//! for a single sample). Output quantities are in display units.

use serde::{Deserialize, Serialize};

use crate::log::ClosedLoopLog;

/// Increases of `J*_k` larger than this count as increases.
pub const COST_INCREASE_TOL: f64 = 1e-9;

/// Tracking over one piecewise-constant reference segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTracking {
    pub start: usize,
    /// One past the last sample of the segment that was simulated.
    pub end: usize,
    pub reference: Vec<f64>,
    /// Reference minus the output at the segment start (or the previous reference).
    pub change: Vec<f64>,
    /// `|y − y_r|` at the last sample of the segment.
    pub final_error: Vec<f64>,
    /// `final_error / |change|`; `None` where the change is zero.
    pub relative_error: Vec<Option<f64>>,
    /// First sample after which every output stays within 1 % of its change
    /// (at least `1e-8·max(|y_r|, 1)`).
    pub settling_sample: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub mean_tc: f64,
    pub std_tc: f64,
    pub max_tc: f64,
    /// Per output, over samples from the second reference step on (all samples
    /// if there is only one).
    pub rmse: Vec<f64>,
    pub segments: Vec<SegmentTracking>,
    pub softened_samples: usize,
    pub optimal_fraction: f64,
    pub mean_qp_iterations: f64,
    /// Mean `‖ρ̂(k+j|k) − ρ(k+j)‖`, `j = 1..N_p−1`, over fully realized horizons.
    pub scheduling_error: Option<f64>,
    /// Largest such error over the last tenth of the run.
    pub late_scheduling_error: Option<f64>,
    pub cost_increases: usize,
    pub max_cost_increase: f64,
    pub candidate_infeasible: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `‖ρ̂(k+j|k) − ρ(k+j)‖₂` for the horizon issued at row `k`; `None` if not fully realized.
pub fn horizon_errors(log: &ClosedLoopLog, k: usize) -> Option<Vec<f64>> {
    let n_rho = log.meta.n_rho;
    let n_p = log.meta.horizon;
    let row = log.rows.get(k)?;
    if k + n_p > log.rows.len() || row.rho_hat.len() != n_rho * n_p {
        return None;
    }
    Some(
        (0..n_p)
            .map(|j| {
                let hat = &row.rho_hat[j * n_rho..(j + 1) * n_rho];
                let real = &log.rows[k + j].rho;
                hat.iter().zip(real).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect(),
    )
}

/// Mean error over leads `1..N_p` of horizons issued in `[from, to)`.
pub fn scheduling_error(log: &ClosedLoopLog, from: usize, to: usize) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for k in from..to.min(log.rows.len()) {
        if let Some(e) = horizon_errors(log, k) {
            sum += e[1..].iter().sum::<f64>();
            count += e.len() - 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Largest error over all leads of horizons issued in `[from, to)`.
pub fn max_scheduling_error(log: &ClosedLoopLog, from: usize, to: usize) -> Option<f64> {
    (from..to.min(log.rows.len()))
        .filter_map(|k| horizon_errors(log, k))
        .map(|e| e.into_iter().fold(0.0, f64::max))
        .reduce(f64::max)
}

fn segments(log: &ClosedLoopLog) -> Vec<SegmentTracking> {
    let rows = &log.rows;
    let refs = &log.meta.references;
    let mut out = Vec::new();
    for (i, (start, y_r)) in refs.iter().enumerate() {
        if *start >= rows.len() {
            break;
        }
        let end = refs.get(i + 1).map_or(rows.len(), |r| r.0).min(rows.len());
        let before = match i {
            0 => rows[0].y.clone(),
            _ => refs[i - 1].1.clone(),
        };
        let change: Vec<f64> = y_r.iter().zip(&before).map(|(r, b)| r - b).collect();
        let last = &rows[end - 1].y;
        let final_error: Vec<f64> = last.iter().zip(y_r).map(|(y, r)| (y - r).abs()).collect();
        let relative_error =
            final_error.iter().zip(&change).map(|(e, c)| (c.abs() > 0.0).then(|| e / c.abs())).collect();
        let within = |k: usize| {
            // a small floor keeps zero-change segments from never settling
            rows[k]
                .y
                .iter()
                .zip(y_r)
                .zip(&change)
                .all(|((y, r), c)| (y - r).abs() <= 0.01 * c.abs().max(1e-6 * r.abs().max(1.0)))
        };
        let mut settling = None;
        for k in (*start..end).rev() {
            if !within(k) {
                break;
            }
            settling = Some(k);
        }
        out.push(SegmentTracking {
            start: *start,
            end,
            reference: y_r.clone(),
            change,
            final_error,
            relative_error,
            settling_sample: settling,
        });
    }
    out
}

pub fn metrics(log: &ClosedLoopLog) -> Metrics {
    let rows = &log.rows;
    let n = rows.len();
    let times: Vec<f64> = rows.iter().map(|r| r.solve_time).collect();
    let (mean_tc, std_tc) = mean_std(&times);
    let max_tc = times.iter().copied().fold(f64::NAN, f64::max);

    let from = log.meta.references.get(1).map_or(0, |r| r.0);
    let n_y = log.meta.outputs.len();
    let mut sq = vec![0.0; n_y];
    let mut count = 0usize;
    for r in rows.iter().skip(from) {
        let y_r = &log.meta.references.iter().rev().find(|(s, _)| *s <= r.k).expect("reference at 0").1;
        for ((s, y), t) in sq.iter_mut().zip(&r.y).zip(y_r) {
            *s += (y - t).powi(2);
        }
        count += 1;
    }
    let rmse = sq.iter().map(|s| if count > 0 { (s / count as f64).sqrt() } else { f64::NAN }).collect();

    let mut cost_increases = 0;
    let mut max_cost_increase = f64::NEG_INFINITY;
    for w in rows.windows(2) {
        let inc = w[1].cost - w[0].cost;
        max_cost_increase = max_cost_increase.max(inc);
        if inc > COST_INCREASE_TOL {
            cost_increases += 1;
        }
    }

    let iters: Vec<f64> = rows.iter().map(|r| r.qp_iterations as f64).collect();
    Metrics {
        samples: n,
        mean_tc,
        std_tc,
        max_tc,
        rmse,
        segments: segments(log),
        softened_samples: rows.iter().filter(|r| r.softened).count(),
        optimal_fraction: if n > 0 {
            rows.iter().filter(|r| r.status == "optimal" && !r.softened).count() as f64 / n as f64
        } else {
            0.0
        },
        mean_qp_iterations: mean_std(&iters).0,
        scheduling_error: scheduling_error(log, 0, n),
        late_scheduling_error: max_scheduling_error(log, n - n / 10, n),
        cost_increases,
        max_cost_increase,
        candidate_infeasible: log.events.iter().filter(|e| e.kind == "candidate-infeasible").count(),
    }
}
