//! Quick oracle checks run by `lpvmpc selftest`.

use std::time::Instant;

use lpvmpc_core::gaslift::{gaslift_qlpv, GasLiftParams, GasLiftPlant};
use lpvmpc_core::horizon::build_from_matrices;
use lpvmpc_core::model::relative_embedding_residual;
use lpvmpc_core::qp::{solve, QpProblem, QpSettings, QpStatus};
use lpvmpc_core::terminal::{
    invariance_check, lyapunov_decrease_check, synthesize, verify, LmiBounds, SynthesisSettings, Vertex, CERT_TOL,
};
use lpvmpc_core::{LpvMatrices, Qlpv};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (passed, detail) = f();
    Check { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn embedding(rng: &mut ChaCha8Rng) -> (bool, String) {
    let p = GasLiftParams::default();
    let model = gaslift_qlpv(p).expect("default gas-lift model");
    let plant = GasLiftPlant::new(p, 1);
    let b = &model.sets().state;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = DVector::from_fn(3, |i, _| rng.random_range(b.lower()[i]..b.upper()[i]));
        let u = DVector::from_fn(2, |_, _| rng.random_range(0.05..1.0));
        match relative_embedding_residual(&model, &plant, &x, &u) {
            Ok(r) => worst = worst.max(r),
            Err(e) => return (false, format!("model error at x = {x:?}: {e}")),
        }
    }
    (worst <= 1e-8, format!("worst relative residual {worst:e} over 1000 samples"))
}

fn prediction(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n_x, n_u, n_y) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let n_p = rng.random_range(1..=8);
        let steps: Vec<LpvMatrices> = (0..n_p)
            .map(|_| LpvMatrices {
                a: random_matrix(rng, n_x, n_x, 0.6),
                b: random_matrix(rng, n_x, n_u, 1.0),
                c: random_matrix(rng, n_y, n_x, 1.0),
                d: random_matrix(rng, n_y, n_u, 1.0),
            })
            .collect();
        let pm = build_from_matrices(&steps, 0).expect("consistent shapes");
        let x0 = random_matrix(rng, n_x, 1, 1.0).column(0).into_owned();
        let u = random_matrix(rng, n_u * n_p, 1, 1.0).column(0).into_owned();
        let xs = &pm.cal_a * &x0 + &pm.cal_b * &u;
        let ys = &pm.cal_c * &x0 + &pm.cal_d * &u;
        let mut x = x0.clone();
        let (mut xr, mut yr) = (Vec::new(), Vec::new());
        for (i, s) in steps.iter().enumerate() {
            let ui = u.rows(i * n_u, n_u);
            yr.extend((&s.c * &x + &s.d * ui).iter().copied());
            x = &s.a * &x + &s.b * ui;
            xr.extend(x.iter().copied());
        }
        let (xr, yr) = (DVector::from_vec(xr), DVector::from_vec(yr));
        let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm().max(1.0);
        worst = worst.max(rel(&xs, &xr)).max(rel(&ys, &yr));
    }
    (worst <= 1e-10, format!("worst relative deviation {worst:e} over 200 instances"))
}

/// Exhaustive active-set enumeration for `min ½xᵀHx + gᵀx  s.t.  Gx ≤ h`.
fn enumerate(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<f64> {
    let (n, m) = (g.len(), b.len());
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
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
        let x = sol.rows(0, n).into_owned();
        let lam = sol.rows(n, act.len());
        if lam.iter().any(|l| *l < -1e-9) || (a * &x - b).iter().any(|v| *v > 1e-9) {
            continue;
        }
        let f = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
        best = Some(best.map_or(f, |bst: f64| bst.min(f)));
    }
    best
}

fn qp(rng: &mut ChaCha8Rng) -> (bool, String) {
    let settings = QpSettings { eps: 1e-9, eps_infeasible: 1e-9, max_iter: 20_000, ..QpSettings::default() };
    let (mut gap, mut kkt): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=6);
        let l = random_matrix(rng, n, n, 1.0);
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = random_matrix(rng, n, 1, 2.0).column(0).into_owned();
        let a = random_matrix(rng, m, n, 1.0);
        let b = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
        let Some(best) = enumerate(&h, &g, &a, &b) else {
            return (false, "enumeration found no feasible point of a feasible problem".into());
        };
        let p = QpProblem::new(h.clone(), g.clone()).with_inequalities(a.clone(), b.clone());
        let sol = match solve(&p, None, &settings) {
            Ok(s) if s.status == QpStatus::Optimal => s,
            Ok(s) => return (false, format!("solver status {}", s.status.name())),
            Err(e) => return (false, e.to_string()),
        };
        gap = gap.max((sol.objective - best).abs());
        kkt = kkt.max(sol.residuals.max());
    }
    (gap <= 1e-7 && kkt <= 1e-6, format!("objective gap {gap:e}, KKT residual {kkt:e} over 100 problems"))
}

fn terminal(rng: &mut ChaCha8Rng) -> (bool, String) {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let vertices = vec![Vertex { a: one(1.2), b: one(1.0) }];
    let bounds = LmiBounds { x_bar: DVector::from_element(1, 1.0), u_bar: DVector::from_element(1, 1.0) };
    let syn = match synthesize(&vertices, &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()) {
        Ok(s) => s,
        Err(e) => return (false, e.to_string()),
    };
    let ing = &syn.ingredients;
    let cert = match verify(&vertices, &ing.q, &ing.r, &ing.y, &ing.w, &bounds, CERT_TOL) {
        Ok(c) => c,
        Err(e) => return (false, e.to_string()),
    };
    let inv = invariance_check(ing, &vertices, 10_000, rng);
    let lyap = lyapunov_decrease_check(ing, &vertices, &ing.q, &ing.r, 10_000, rng);
    (
        cert.valid && inv.violations == 0 && lyap.violations == 0,
        format!(
            "P = {:.6}, kappa = {:.6}, margin {:e}, MC violations {}/{}",
            ing.p[(0, 0)],
            ing.kappa[(0, 0)],
            cert.margin,
            inv.violations,
            lyap.violations
        ),
    )
}

/// Runs every check with a fixed seed.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        timed("embedding", || embedding(&mut rng)),
        timed("prediction", || prediction(&mut rng)),
        timed("qp", || qp(&mut rng)),
        timed("terminal", || terminal(&mut rng)),
    ]
}
