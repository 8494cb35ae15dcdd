use lpvmpc_core::demo::DemoLpv;
use lpvmpc_core::gaslift::{gaslift_qlpv, GasLiftParams, GasLiftPlant, BAR};
use lpvmpc_core::mpc::{
    control_step, steady_residual, steady_state_pair, ControllerState, MpcConfig, SteadyStatePair, TerminalMode,
    WeightSpace,
};
use lpvmpc_core::terminal::{synthesize, vertices_at, LmiBounds, SchedulingGrid, SynthesisSettings};
use lpvmpc_core::{BoxSet, NonlinearPlant, NullClock, Qlpv};
use nalgebra::{DMatrix, DVector};

#[test]
fn demo_candidate_stays_feasible_and_cost_decreases() {
    let m = DemoLpv::new();
    let region = BoxSet::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)).unwrap();
    let grid = SchedulingGrid::new(region, 9).unwrap();
    let vertices = vertices_at(&m, &grid.points).unwrap();
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::identity(1, 1);
    let bounds = LmiBounds { x_bar: DVector::from_vec(vec![5.0, 1.0]), u_bar: DVector::from_element(1, 2.0) };
    let ing = synthesize(&vertices, &q, &r, &bounds, &SynthesisSettings::default()).unwrap().ingredients;
    assert!(ing.certificate.valid);

    let mut cfg = MpcConfig::new(5, q, r);
    cfg.terminal_mode = TerminalMode::CostAndSet;
    let origin = SteadyStatePair::fixed(&m, DVector::zeros(2), DVector::zeros(1)).unwrap();
    let mut ctrl = ControllerState::new();
    let mut x = DVector::from_vec(vec![2.0, 0.5]);
    let mut last = f64::INFINITY;
    for k in 0..30 {
        let out = control_step(&mut ctrl, &cfg, &m, &x, &origin, Some(&ing), &NullClock).unwrap();
        let d = &out.diagnostics;
        assert!(!d.softened(), "fallback at {k}");
        if k > 0 {
            assert_eq!(d.candidate_feasible, Some(true), "candidate infeasible at {k}");
        }
        assert!(d.cost <= last + 1e-9, "cost rose at {k}: {} -> {}", last, d.cost);
        assert!(out.u[0].abs() <= 2.0 + 1e-9);
        last = d.cost;
        x = m.step(&x, &out.u).unwrap();
    }
    // x2 is uncontrollable and decays on its own
    assert!((x[1] - 0.5 * 0.9f64.powi(30)).abs() < 1e-12);
    assert!(x[0].abs() < 1e-2, "{x}");
}

fn trim_target() -> (GasLiftParams, SteadyStatePair) {
    let p = GasLiftParams::default();
    let model = gaslift_qlpv(p).unwrap();
    let plant = GasLiftPlant::new(p, 1);
    let u = DVector::from_vec(vec![0.1, 0.5]);
    // settle the plant at constant input
    let mut x = DVector::from_vec(vec![4000.0, 700.0, 1700.0]);
    for _ in 0..200_000 {
        x = plant.step(&x, &u).unwrap();
    }
    let target = SteadyStatePair::fixed(&model, x, u).unwrap();
    (p, target)
}

#[test]
fn steady_state_pair_recovers_the_trim() {
    let (p, trim) = trim_target();
    let model = gaslift_qlpv(p).unwrap();
    assert!((trim.x_r[0] - 3933.2057).abs() < 1e-2, "{}", trim.x_r);
    assert!((trim.y_r[0] / BAR - 104.0865).abs() < 1e-3);
    let guess_x = &trim.x_r + DVector::from_vec(vec![30.0, -10.0, 40.0]);
    let pair = steady_state_pair(&model, &trim.y_r, &guess_x, &DVector::from_vec(vec![0.2, 0.4])).unwrap();
    assert!((&pair.x_r - &trim.x_r).norm() / trim.x_r.norm() < 1e-6);
    assert!((&pair.u_r - &trim.u_r).norm() < 1e-6);
    let res = steady_residual(&model, &pair.x_r, &pair.u_r, &trim.y_r).unwrap();
    assert!(res[3].abs() / trim.y_r[0] < 1e-8 && pair.residual <= 1e-8);
}

#[test]
fn controller_holds_the_equilibrium() {
    let (p, trim) = trim_target();
    let model = gaslift_qlpv(p).unwrap();
    let mut cfg =
        MpcConfig::new(6, DMatrix::from_diagonal(&DVector::from_vec(vec![1e-12, 8e-3])), DMatrix::identity(2, 2));
    cfg.weight_space = WeightSpace::Output;
    let mut ctrl = ControllerState::new();
    for _ in 0..5 {
        let out = control_step(&mut ctrl, &cfg, &model, &trim.x_r, &trim, None, &NullClock).unwrap();
        assert!((&out.u - &trim.u_r).amax() <= 1e-6, "u = {} vs {}", out.u, trim.u_r);
    }
}

#[test]
fn missing_ingredients_are_a_configuration_error() {
    let m = DemoLpv::new();
    let mut cfg = MpcConfig::new(5, DMatrix::identity(2, 2), DMatrix::identity(1, 1));
    cfg.terminal_mode = TerminalMode::CostAndSet;
    let origin = SteadyStatePair::fixed(&m, DVector::zeros(2), DVector::zeros(1)).unwrap();
    let x = DVector::from_vec(vec![1.0, 0.0]);
    assert!(control_step(&mut ControllerState::new(), &cfg, &m, &x, &origin, None, &NullClock).is_err());
    let short = MpcConfig::new(1, DMatrix::identity(2, 2), DMatrix::identity(1, 1));
    assert!(short.validate(&m).is_err());
    assert_eq!(m.dims().n_x, 2);
}
