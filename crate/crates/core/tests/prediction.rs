use lpvmpc_core::demo::DemoLpv;
use lpvmpc_core::horizon::{build_from_matrices, build_prediction};
use lpvmpc_core::schedule::{anchored_taylor, build_state_deltas, frozen_trajectory, taylor_update};
use lpvmpc_core::{BoxSet, LpvMatrices, Qlpv, SchedulingSet};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, m: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

fn instance() -> impl Strategy<Value = (Vec<LpvMatrices>, DVector<f64>, DVector<f64>)> {
    (1usize..=4, 1usize..=4, 1usize..=4, 1usize..=8).prop_flat_map(|(n_x, n_u, n_y, n_p)| {
        let step = (matrix(n_x, n_x, 1.0), matrix(n_x, n_u, 1.0), matrix(n_y, n_x, 1.0), matrix(n_y, n_u, 1.0))
            .prop_map(|(a, b, c, d)| LpvMatrices { a, b, c, d });
        (
            prop::collection::vec(step, n_p),
            prop::collection::vec(-2.0..2.0f64, n_x).prop_map(DVector::from_vec),
            prop::collection::vec(-2.0..2.0f64, n_u * n_p).prop_map(DVector::from_vec),
        )
    })
}

/// Step-by-step simulation of the time-varying system.
fn recursion(steps: &[LpvMatrices], x0: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n_u = steps[0].b.ncols();
    let mut x = x0.clone();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, s) in steps.iter().enumerate() {
        let ui = u.rows(i * n_u, n_u).into_owned();
        ys.extend((&s.c * &x + &s.d * &ui).iter().copied());
        x = &s.a * &x + &s.b * &ui;
        xs.extend(x.iter().copied());
    }
    (DVector::from_vec(xs), DVector::from_vec(ys))
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stacked_prediction_equals_recursion((steps, x0, u) in instance()) {
        let p = build_from_matrices(&steps, 0).unwrap();
        let (xs, ys) = recursion(&steps, &x0, &u);
        prop_assert!(rel(&p.predict_states(&x0, &u).unwrap(), &xs) <= 1e-10);
        prop_assert!(rel(&p.predict_outputs(&x0, &u).unwrap(), &ys) <= 1e-10);
    }

    #[test]
    fn prediction_is_causal((steps, _x0, _u) in instance()) {
        let p = build_from_matrices(&steps, 0).unwrap();
        let (n_x, n_u) = (steps[0].a.nrows(), steps[0].b.ncols());
        for i in 0..steps.len() {
            let blk = p.cal_b.view((i * n_x, (i + 1) * n_u), (n_x, (steps.len() - i - 1) * n_u));
            prop_assert!(blk.iter().all(|v| *v == 0.0));
        }
        prop_assert_eq!(p.cal_a.nrows(), n_x * steps.len());
    }
}

#[test]
fn model_prediction_uses_each_scheduling_entry() {
    let m = DemoLpv::new();
    let set = &m.sets().scheduling;
    let rhos = [-1.0, -0.3, 0.4, 1.0];
    let mut traj = frozen_trajectory(set, &DVector::from_element(1, 0.0), rhos.len(), 3).unwrap();
    traj.entries = rhos.iter().map(|r| DVector::from_element(1, *r)).collect();
    let p = build_prediction(&m, &traj).unwrap();
    let steps: Vec<LpvMatrices> = rhos.iter().map(|r| m.matrices(&DVector::from_element(1, *r))).collect();
    let x0 = DVector::from_vec(vec![0.3, -0.2]);
    let u = DVector::from_vec(vec![0.1, -0.4, 0.7, 0.0]);
    let (xs, ys) = recursion(&steps, &x0, &u);
    assert!(rel(&p.predict_states(&x0, &u).unwrap(), &xs) < 1e-14);
    assert!(rel(&p.predict_outputs(&x0, &u).unwrap(), &ys) < 1e-14);
    assert_eq!(p.origin, 3);
}

fn unit_set(n: usize) -> SchedulingSet {
    SchedulingSet::new(BoxSet::new(DVector::from_element(n, -10.0), DVector::from_element(n, 10.0)).unwrap()).unwrap()
}

#[test]
fn frozen_repeats_the_measurement() {
    let rho = DVector::from_vec(vec![0.5, -2.0]);
    let t = frozen_trajectory(&unit_set(2), &rho, 4, 7).unwrap();
    assert_eq!(t.entries.len(), 4);
    assert!(t.entries.iter().all(|e| e == &rho));
    assert_eq!(t.origin, 7);
}

#[test]
fn anchored_taylor_accumulates_jacobian_steps() {
    // ρ = J x with a linear proxy, so the extrapolation is exact
    let jac = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
    let x_k = DVector::from_vec(vec![1.0, 1.0]);
    let prev = vec![
        DVector::from_vec(vec![0.9, 1.1]),
        DVector::from_vec(vec![1.2, 0.8]),
        DVector::from_vec(vec![1.5, 0.6]),
        DVector::from_vec(vec![1.7, 0.5]),
    ];
    let deltas = build_state_deltas(&prev, &x_k, 1).unwrap();
    assert_eq!(deltas.deltas.len(), 3);
    let rho_k = &jac * &x_k;
    let t = anchored_taylor(&unit_set(1), &rho_k, std::slice::from_ref(&jac), &deltas).unwrap();
    let expect = [&jac * &x_k, &jac * &prev[1], &jac * &prev[2], &jac * &prev[3]];
    for (e, t) in expect.iter().zip(&t.entries) {
        assert!((e - t).norm() < 1e-12);
    }
}

#[test]
fn carried_taylor_updates_the_previous_guess() {
    let set = unit_set(1);
    let jac = DMatrix::from_row_slice(1, 1, &[3.0]);
    let prev_traj = frozen_trajectory(&set, &DVector::from_element(1, 1.0), 3, 0).unwrap();
    let prev_states = vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.5), DVector::from_element(1, 0.7)];
    let x_k = DVector::from_element(1, 0.2);
    let deltas = build_state_deltas(&prev_states, &x_k, 1).unwrap();
    let t = taylor_update(&set, &prev_traj, &DVector::from_element(1, 0.4), &jac, &deltas).unwrap();
    assert!((t.entries[0][0] - 0.4).abs() < 1e-15);
    assert!((t.entries[1][0] - (1.0 + 3.0 * 0.3)).abs() < 1e-12);
    assert!((t.entries[2][0] - (1.0 + 3.0 * 0.2)).abs() < 1e-12);
}

#[test]
fn extrapolated_entries_are_clamped_into_the_set() {
    let set = SchedulingSet::new(BoxSet::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)).unwrap())
        .unwrap();
    let jac = DMatrix::from_row_slice(1, 1, &[10.0]);
    let prev = vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0), DVector::from_element(1, 2.0)];
    let deltas = build_state_deltas(&prev, &DVector::from_element(1, 0.0), 1).unwrap();
    let t = anchored_taylor(&set, &DVector::from_element(1, 0.0), std::slice::from_ref(&jac), &deltas).unwrap();
    assert!(t.entries.iter().all(|e| e[0].abs() <= 1.0));
    assert!(t.any_clamped());
}

#[test]
fn short_horizons_are_rejected() {
    assert!(frozen_trajectory(&unit_set(1), &DVector::from_element(1, 0.0), 1, 0).is_err());
    assert!(build_from_matrices(&[], 0).is_err());
}
