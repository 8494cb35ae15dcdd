use lpvmpc_core::qp::{kkt_residuals, solve, EllipsoidConstraint, QpError, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

/// Minimizes over every active set of `A x ≤ b` by solving the equality KKT
/// system; returns the best feasible stationary point.
fn enumerate(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let (n, m) = (g.len(), b.len());
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u64..(1u64 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        if act.len() > n {
            continue;
        }
        let k = n + act.len();
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        rhs.rows_mut(0, n).copy_from(&(-g));
        for (r, &i) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        if sol.rows(n, act.len()).iter().any(|l| *l < -1e-9) || (a * &x - b).iter().any(|v| *v > 1e-9) {
            continue;
        }
        let f = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    best
}

fn tight() -> QpSettings {
    QpSettings { eps: 1e-9, eps_infeasible: 1e-9, max_iter: 50_000, ..QpSettings::default() }
}

/// Box bounds folded into the inequality list for the oracle.
fn with_box_rows(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.ncols();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..a.nrows()).map(|i| (a.row(i).iter().copied().collect(), b[i])).collect();
    for j in 0..n {
        let mut e = vec![0.0; n];
        if hi[j].is_finite() {
            e[j] = 1.0;
            rows.push((e.clone(), hi[j]));
        }
        if lo[j].is_finite() {
            e[j] = -1.0;
            rows.push((e, -lo[j]));
        }
    }
    let m = rows.len();
    (DMatrix::from_fn(m, n, |i, j| rows[i].0[j]), DVector::from_fn(m, |i, _| rows[i].1))
}

#[test]
fn random_problems_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = std::time::Instant::now();
    let (mut gap, mut kkt) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(0..=5);
        let l = random(&mut rng, n, n, 1.0);
        // every fourth problem is only semidefinite
        let h = if case % 4 == 0 && n > 1 {
            let v = random(&mut rng, n, 1, 1.0);
            &v * v.transpose()
        } else {
            &l * l.transpose() + DMatrix::identity(n, n) * 0.05
        };
        let g = random(&mut rng, n, 1, 2.0).column(0).into_owned();
        let a = random(&mut rng, m, n, 1.0);
        let b = DVector::from_fn(m, |_, _| rng.random_range(0.05..1.0));
        let lo =
            DVector::from_fn(
                n,
                |_, _| if rng.random_bool(0.7) { rng.random_range(-2.0..-0.1) } else { f64::NEG_INFINITY },
            );
        let hi =
            DVector::from_fn(n, |_, _| if rng.random_bool(0.7) { rng.random_range(0.1..2.0) } else { f64::INFINITY });
        let (aa, bb) = with_box_rows(&a, &b, &lo, &hi);
        let problem = QpProblem::new(h.clone(), g.clone()).with_inequalities(a, b).with_bounds(lo, hi);
        let Some((_, best)) = enumerate(&h, &g, &aa, &bb) else {
            // unbounded semidefinite case without an attained minimum; skip it
            continue;
        };
        let sol = solve(&problem, None, &tight()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        gap = gap.max((sol.objective - best).abs() / best.abs().max(1.0));
        kkt = kkt.max(sol.residuals.max());
        let recomputed = kkt_residuals(&problem, &sol.x, &sol.duals);
        assert!(recomputed.max() <= 1e-6);
    }
    assert!(gap <= 1e-7, "objective gap {gap:e}");
    assert!(kkt <= 1e-6, "KKT residual {kkt:e}");
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn unconstrained_problem_is_a_linear_solve() {
    let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
    let g = DVector::from_vec(vec![1.0, 2.0]);
    let sol = solve(&QpProblem::new(h.clone(), g.clone()), None, &tight()).unwrap();
    let exact = h.lu().solve(&(-g)).unwrap();
    assert!((sol.x - exact).norm() < 1e-8);
}

#[test]
fn infeasible_constraints_are_detected() {
    let h = DMatrix::identity(1, 1);
    let g = DVector::zeros(1);
    let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
    let b = DVector::from_vec(vec![-1.0, -1.0]);
    let sol = solve(&QpProblem::new(h, g).with_inequalities(a, b), None, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Infeasible);
    assert!(sol.certificate.is_some());
}

#[test]
fn warm_start_does_not_change_the_answer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = random(&mut rng, 3, 3, 1.0);
    let h = &l * l.transpose() + DMatrix::identity(3, 3);
    let g = DVector::from_vec(vec![3.0, -2.0, 1.0]);
    let p = QpProblem::new(h, g).with_bounds(DVector::from_element(3, -0.5), DVector::from_element(3, 0.5));
    let cold = solve(&p, None, &tight()).unwrap();
    let warm = solve(&p, Some(&cold.x), &tight()).unwrap();
    assert!((cold.x - &warm.x).norm() < 1e-7);
    assert!(warm.iterations <= cold.iterations);
}

#[test]
fn ellipsoid_constraint_projects_onto_the_ball() {
    // min ‖x − c‖² over the unit ball: the solution is c / ‖c‖
    let c = DVector::from_vec(vec![3.0, 4.0]);
    let p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, -2.0 * &c).with_ellipsoid(EllipsoidConstraint::on_variables(
        DVector::zeros(2),
        DMatrix::identity(2, 2),
        1.0,
    ));
    let sol = solve(&p, None, &tight()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!((sol.x - DVector::from_vec(vec![0.6, 0.8])).norm() < 1e-6);
}

#[test]
fn malformed_problems_are_rejected() {
    let bad = QpProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), DVector::zeros(2));
    assert!(matches!(solve(&bad, None, &QpSettings::default()), Err(QpError::NotSymmetric(_))));
    let neg = QpProblem::new(-DMatrix::identity(2, 2), DVector::zeros(2));
    assert!(matches!(solve(&neg, None, &QpSettings::default()), Err(QpError::NotPsd { .. })));
    let bounds = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1))
        .with_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, 0.0));
    assert!(matches!(solve(&bounds, None, &QpSettings::default()), Err(QpError::InvalidBounds(0))));
}
