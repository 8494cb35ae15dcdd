use std::path::Path;

use lpvmpc::compare::compare;
use lpvmpc::log::{read_csv_rows, read_json, write_csv, write_json, ClosedLoopLog};
use lpvmpc::metrics::{mean_std, metrics};
use lpvmpc::plot::{plotted_columns, script};
use lpvmpc::scenario::Scenario;
use lpvmpc::sim::{run, Arm, Setup};

fn scenarios() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"))
}

fn demo() -> (Scenario, Setup) {
    let path = scenarios().join("demo.json");
    let s = Scenario::load(&path).unwrap();
    let setup = Setup::new(&s, path.parent()).unwrap();
    (s, setup)
}

fn demo_log() -> ClosedLoopLog {
    run(&demo().1, None).unwrap()
}

#[test]
fn csv_has_one_column_per_logged_quantity() {
    let log = demo_log();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.csv");
    write_csv(&log, &path).unwrap();
    let (header, rows) = read_csv_rows(&path).unwrap();
    let m = &log.meta;
    let expected = 1 + m.states.len() + m.inputs.len() + m.outputs.len() + m.n_rho + m.n_rho * m.horizon + 5;
    assert_eq!(header.len(), expected);
    assert_eq!(header, log.csv_header());
    assert_eq!(rows, log.rows);
}

#[test]
fn json_round_trip_is_bit_identical() {
    let log = demo_log();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.json");
    write_json(&log, &path).unwrap();
    let back = read_json(&path).unwrap();
    assert_eq!(back, log);
    for (a, b) in back.rows.iter().zip(&log.rows) {
        assert!(a.x.iter().zip(&b.x).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
    }
}

#[test]
fn plot_script_only_uses_exported_columns() {
    let log = demo_log();
    let header = log.csv_header();
    for c in plotted_columns(&log) {
        assert!(header.contains(&c), "{c} is not exported");
    }
    let text = script(&log, "demo.csv");
    assert!(text.contains("demo.csv"));
    let listed = text.lines().find_map(|l| l.strip_prefix("COLUMNS = ")).unwrap();
    let listed: Vec<&str> = listed.trim_matches(['[', ']']).split(", ").map(|c| c.trim_matches('\'')).collect();
    assert_eq!(listed, plotted_columns(&log));
    // literal lookups into the data table
    for part in text.split("data[\"").skip(1) {
        let col = &part[..part.find('"').unwrap()];
        assert!(header.iter().any(|h| h == col), "{col} is not exported");
    }
}

#[test]
fn mean_and_sample_deviation() {
    let (m, s) = mean_std(&[1.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    assert!(mean_std(&[]).0.is_nan());
}

#[test]
fn demo_metrics_reflect_the_run() {
    let log = demo_log();
    let m = metrics(&log);
    assert_eq!(m.samples, 40);
    assert_eq!(m.optimal_fraction, 1.0);
    assert_eq!(m.cost_increases, 0);
    assert_eq!(m.candidate_infeasible, 0);
    assert_eq!(m.segments.len(), 1);
}

#[test]
fn runs_are_deterministic() {
    let (_, setup) = demo();
    let a = run(&setup, Some(5)).unwrap().without_timing();
    let b = run(&setup, Some(5)).unwrap().without_timing();
    assert_eq!(a, b);
}

#[test]
fn identical_arms_have_zero_deltas() {
    let (_, setup) = demo();
    let arm = Arm::parse("taylor:cost-and-set").unwrap();
    let report = compare(&setup, &[arm, arm], None);
    assert_eq!(report.deltas.len(), 1);
    let d = &report.deltas[0];
    assert!(d.rmse.iter().all(|v| *v == 0.0));
    assert_eq!(d.scheduling_error, Some(0.0));
    let logs: Vec<_> = report.arms.iter().map(|r| r.log.as_ref().unwrap().without_timing().rows).collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn a_failing_arm_does_not_stop_the_others() {
    let (mut s, _) = demo();
    s.terminal = None;
    s.controller.terminal_mode = lpvmpc::scenario::TerminalModeName::None;
    let setup = Setup::new(&s, None).unwrap();
    let arms = [Arm::parse("taylor:cost-and-set").unwrap(), Arm::parse("frozen").unwrap()];
    let report = compare(&setup, &arms, None);
    assert!(report.arms[0].error.is_some());
    assert!(report.arms[1].error.is_none());
    assert_eq!(report.arms[1].metrics.as_ref().unwrap().samples, 40);
    assert!(report.deltas.is_empty());
}

#[test]
fn invalid_scenarios_are_configuration_errors() {
    let text = std::fs::read_to_string(scenarios().join("demo.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["controller"]["horizon"] = 0.into();
    let s: Scenario = serde_json::from_value(v.clone()).unwrap();
    let e = s.validate().unwrap_err();
    assert_eq!(e.exit_code(), 2);
    v["controller"]["horizon"] = 5.into();
    v["references"][0]["start"] = 3.into();
    let s: Scenario = serde_json::from_value(v).unwrap();
    assert_eq!(s.validate().unwrap_err().exit_code(), 2);
    assert!(Arm::parse("taylor:bogus").is_err());
}
