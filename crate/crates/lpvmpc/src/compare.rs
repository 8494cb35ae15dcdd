//! Runs several arms of one scenario side by side.

use serde::{Deserialize, Serialize};

use crate::log::ClosedLoopLog;
use crate::metrics::{metrics, Metrics};
use crate::sim::{run_arm, Arm, Setup, WallClock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    /// Set when the arm aborted; its metrics then cover the partial log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub log: Option<ClosedLoopLog>,
}

/// Differences `b − a` of the headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub a: String,
    pub b: String,
    pub rmse: Vec<f64>,
    pub mean_tc: f64,
    pub scheduling_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    pub deltas: Vec<Delta>,
}

fn delta(a: &ArmResult, b: &ArmResult) -> Option<Delta> {
    let (ma, mb) = (a.metrics.as_ref()?, b.metrics.as_ref()?);
    if a.error.is_some() || b.error.is_some() {
        return None;
    }
    Some(Delta {
        a: a.arm.clone(),
        b: b.arm.clone(),
        rmse: ma.rmse.iter().zip(&mb.rmse).map(|(x, y)| y - x).collect(),
        mean_tc: mb.mean_tc - ma.mean_tc,
        scheduling_error: ma.scheduling_error.zip(mb.scheduling_error).map(|(x, y)| y - x),
    })
}

/// Runs every arm on its own thread with the same seed. A failing arm is
/// reported in place and does not affect the others.
pub fn compare(setup: &Setup, arms: &[Arm], seed: Option<u64>) -> Comparison {
    let results: Vec<ArmResult> = std::thread::scope(|s| {
        let handles: Vec<_> = arms
            .iter()
            .map(|arm| {
                s.spawn(move || {
                    let label = arm.label();
                    match run_arm(setup, arm, seed, &WallClock::new()) {
                        Ok(log) => ArmResult { arm: label, metrics: Some(metrics(&log)), error: None, log: Some(log) },
                        Err(e) => ArmResult {
                            arm: label,
                            metrics: (!e.log.rows.is_empty()).then(|| metrics(&e.log)),
                            error: Some(e.to_string()),
                            log: Some(e.log),
                        },
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .zip(arms)
            .map(|(h, arm)| {
                h.join().unwrap_or_else(|_| ArmResult {
                    arm: arm.label(),
                    metrics: None,
                    error: Some("arm panicked".into()),
                    log: None,
                })
            })
            .collect()
    });
    let mut deltas = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            deltas.extend(delta(&results[i], &results[j]));
        }
    }
    Comparison {
        scenario: setup.scenario.name.clone(),
        seed: seed.unwrap_or(setup.scenario.seed),
        arms: results,
        deltas,
    }
}
