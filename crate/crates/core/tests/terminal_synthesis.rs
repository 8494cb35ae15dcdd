use lpvmpc_core::terminal::{
    admissibility_check, invariance_check, lyapunov_decrease_check, synthesize, verify, LmiBounds, LogDetSense,
    SynthesisSettings, TerminalIngredients, Vertex, CERT_TOL,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Largest invariant interval for `x⁺ = (a + bκ)x` under the cost decrease and
/// bounds, maximized over a fine grid of gains.
fn scalar_oracle(a: f64, b: f64, q: f64, r: f64, x_bar: f64, u_bar: f64) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=400_000 {
        let k = -2.0 + 4.0 * i as f64 / 400_000.0;
        let cl = a + b * k;
        let decrease = (1.0 - cl * cl) / (q + r * k * k);
        let y = decrease.min(x_bar * x_bar).min(if k == 0.0 { f64::INFINITY } else { (u_bar / k).powi(2) });
        if y > best.0 {
            best = (y, k);
        }
    }
    best
}

#[test]
fn scalar_case_matches_the_gain_sweep() {
    let vertices = vec![Vertex { a: one(1.2), b: one(1.0) }];
    let bounds = LmiBounds { x_bar: DVector::from_element(1, 1.0), u_bar: DVector::from_element(1, 1.0) };
    let syn = synthesize(&vertices, &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()).unwrap();
    let ing = &syn.ingredients;
    let (y_best, k_best) = scalar_oracle(1.2, 1.0, 1.0, 1.0, 1.0, 1.0);
    assert!((ing.y[(0, 0)] - y_best).abs() < 1e-4, "Y {} vs {}", ing.y[(0, 0)], y_best);
    assert!((ing.kappa[(0, 0)] - k_best).abs() < 1e-3, "kappa {} vs {}", ing.kappa[(0, 0)], k_best);
    assert!((ing.p[(0, 0)] * ing.y[(0, 0)] - 1.0).abs() < 1e-12);
    assert!(ing.certificate.valid);
}

/// Closed-loop decrease, invariance and bound conditions checked directly by
/// eigenvalues and support functions.
fn independent_check(ing: &TerminalIngredients, vertices: &[Vertex], q: &DMatrix<f64>, r: &DMatrix<f64>) {
    let p = &ing.p;
    for v in vertices {
        let acl = &v.a + &v.b * &ing.kappa;
        let m = acl.transpose() * p * &acl - p + q + ing.kappa.transpose() * r * &ing.kappa;
        let m = (&m + m.transpose()) * 0.5;
        let top = m.symmetric_eigenvalues().max();
        assert!(top <= 1e-7 * p.norm(), "decrease condition violated by {top:e}");
    }
    for j in 0..ing.y.nrows() {
        assert!(ing.y[(j, j)].sqrt() <= ing.bounds.x_bar[j] * (1.0 + 1e-7));
    }
    for i in 0..ing.kappa.nrows() {
        let row = ing.kappa.row(i);
        let reach = (row * &ing.y * row.transpose())[(0, 0)].sqrt();
        assert!(reach <= ing.bounds.u_bar[i] * (1.0 + 1e-7));
    }
}

fn polytope() -> Vec<Vertex> {
    let mut out = Vec::new();
    for r in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        out.push(Vertex {
            a: DMatrix::from_row_slice(2, 2, &[1.1 + 0.3 * r, 0.2, 0.0, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[1.0 + 0.3 * r, 0.0]),
        });
    }
    out
}

#[test]
fn polytopic_family_is_certified_and_checked_independently() {
    let vertices = polytope();
    let q = DMatrix::identity(2, 2);
    let r = one(1.0);
    let bounds = LmiBounds { x_bar: DVector::from_vec(vec![5.0, 1.0]), u_bar: DVector::from_element(1, 2.0) };
    let syn = synthesize(&vertices, &q, &r, &bounds, &SynthesisSettings::default()).unwrap();
    let ing = &syn.ingredients;
    assert!(ing.certificate.valid, "{:?}", ing.certificate.reason);
    independent_check(ing, &vertices, &q, &r);
    let hist = &syn.logdet_history;
    assert!(hist.windows(2).all(|w| w[1] >= w[0] - 1e-9), "log det not increasing: {hist:?}");
}

#[test]
fn sampling_finds_no_violations() {
    let vertices = polytope();
    let q = DMatrix::identity(2, 2);
    let r = one(1.0);
    let bounds = LmiBounds { x_bar: DVector::from_vec(vec![5.0, 1.0]), u_bar: DVector::from_element(1, 2.0) };
    let ing = synthesize(&vertices, &q, &r, &bounds, &SynthesisSettings::default()).unwrap().ingredients;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let start = std::time::Instant::now();
    assert_eq!(invariance_check(&ing, &vertices, 10_000, &mut rng).violations, 0);
    assert_eq!(lyapunov_decrease_check(&ing, &vertices, &q, &r, 10_000, &mut rng).violations, 0);
    assert_eq!(admissibility_check(&ing, 10_000, &mut rng).violations, 0);
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn logdet_minimization_gives_a_smaller_certified_set() {
    let vertices = polytope();
    let q = DMatrix::identity(2, 2);
    let r = one(1.0);
    let bounds = LmiBounds { x_bar: DVector::from_vec(vec![5.0, 1.0]), u_bar: DVector::from_element(1, 2.0) };
    let max = synthesize(&vertices, &q, &r, &bounds, &SynthesisSettings::default()).unwrap().ingredients;
    let settings = SynthesisSettings { sense: LogDetSense::MinimizeLogDet, ..SynthesisSettings::default() };
    let min = synthesize(&vertices, &q, &r, &bounds, &settings).unwrap().ingredients;
    assert!(min.certificate.valid);
    assert!(min.y.determinant() <= max.y.determinant() * (1.0 + 1e-9));
    independent_check(&min, &vertices, &q, &r);
}

#[test]
fn perturbed_ingredients_fail_verification() {
    let vertices = vec![Vertex { a: one(1.2), b: one(1.0) }];
    let bounds = LmiBounds { x_bar: DVector::from_element(1, 1.0), u_bar: DVector::from_element(1, 1.0) };
    let ing = synthesize(&vertices, &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()).unwrap().ingredients;
    // a larger ellipsoid with the same gain cannot satisfy the active bound
    let cert = verify(&vertices, &ing.q, &ing.r, &(&ing.y * 1.5), &(&ing.w * 1.5), &bounds, CERT_TOL).unwrap();
    assert!(!cert.valid);
    assert!(cert.reason.is_some());
}

#[test]
fn unstabilizable_family_is_reported() {
    // b has opposite signs across vertices, so no common linear gain stabilizes both
    let vertices = vec![Vertex { a: one(2.0), b: one(1.0) }, Vertex { a: one(2.0), b: one(-1.0) }];
    let bounds = LmiBounds { x_bar: DVector::from_element(1, 1.0), u_bar: DVector::from_element(1, 1.0) };
    assert!(synthesize(&vertices, &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()).is_err());
}

#[test]
fn invalid_bounds_are_rejected() {
    let vertices = vec![Vertex { a: one(0.5), b: one(1.0) }];
    let bounds = LmiBounds { x_bar: DVector::from_element(1, -1.0), u_bar: DVector::from_element(1, 1.0) };
    assert!(synthesize(&vertices, &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()).is_err());
    assert!(synthesize(&[], &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()).is_err());
}
