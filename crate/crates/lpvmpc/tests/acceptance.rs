//! One PASS/FAIL line per acceptance criterion. Every check uses its own
//! oracle or recomputes its figures from the raw log.

use std::path::Path;
use std::time::Instant;

use lpvmpc::compare::compare;
use lpvmpc::log::ClosedLoopLog;
use lpvmpc::metrics::{metrics, scheduling_error};
use lpvmpc::scenario::Scenario;
use lpvmpc::sim::{run, Arm, Setup};
use lpvmpc::terminal_io::{run_job, TerminalJob};
use lpvmpc_core::gaslift::{gaslift_qlpv, GasLiftParams};
use lpvmpc_core::horizon::build_from_matrices;
use lpvmpc_core::model::eval_matrices;
use lpvmpc_core::qp::{solve, QpProblem, QpSettings, QpStatus};
use lpvmpc_core::terminal::{
    invariance_check, lyapunov_decrease_check, synthesize, verify, LmiBounds, SynthesisSettings, Vertex, CERT_TOL,
};
use lpvmpc_core::{LpvMatrices, Qlpv};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn scenarios() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"))
}

fn setup(name: &str) -> Setup {
    let path = scenarios().join(name);
    let s = Scenario::load(&path).unwrap();
    Setup::new(&s, path.parent()).unwrap()
}

// 1 ------------------------------------------------------------------------

fn euler_oracle(p: &GasLiftParams, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
    let (m_ga, m_gt, m_ot) = (x[0], x[1], x[2]);
    let p_a = (p.r * p.t_a / (p.v_a * p.m_g) + p.g * p.h_a / p.v_a) * m_ga;
    let rho_a = p.m_g * p_a / (p.r * p.t_a);
    let rho_m = (m_gt + m_ot) / p.v_t;
    let p_tt = m_gt * p.r * p.t_t / (p.m_g * (p.v_t - m_ot / p.mu_o));
    let p_t = p_tt + (m_gt + m_ot) * p.g / p.a_t;
    let p_fp = p_t + p.mu_o * p.g * p.h_fp;
    let w_gin = p.k_cgl * (rho_a * (p.p_fg - p_a)).max(0.0).sqrt() * u[0];
    let w_ginj = p.k_inj * (rho_a * (p_a - p_t)).max(0.0).sqrt();
    let w_ores = p.i_p * (p.p_r - p_fp).max(0.0);
    let w_mix = p.k_cp * (rho_m * (p_tt - p.p_s)).max(0.0).sqrt() * u[1];
    let share = |m: f64| m / (m_gt + m_ot) * w_mix;
    vec![
        m_ga + p.ts * (w_gin - w_ginj),
        m_gt + p.ts * (w_ginj + p.g_go * w_ores - share(m_gt)),
        m_ot + p.ts * (w_ores - share(m_ot)),
    ]
}

fn embedding() -> Outcome {
    let p = GasLiftParams::default();
    let model = gaslift_qlpv(p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = DVector::from_vec(vec![
            rng.random_range(500.0..5500.0),
            rng.random_range(200.0..3000.0),
            rng.random_range(200.0..0.85 * p.v_t * p.mu_o),
        ]);
        let u = DVector::from_vec(vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
        let m = eval_matrices(&model, &model.proxy(&x).unwrap()).unwrap();
        let lpv = &m.a * &x + &m.b * &u;
        let exact = DVector::from_vec(euler_oracle(&p, &x, &u));
        worst = worst.max((lpv - &exact).norm() / exact.norm());
    }
    let t = start.elapsed().as_secs_f64();
    (worst <= 1e-8 && t < 5.0, format!("worst relative residual {worst:.2e} over 1000 samples in {t:.2} s"))
}

// 2 ------------------------------------------------------------------------

fn prediction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let rand_mat =
        |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    for _ in 0..200 {
        let (n_x, n_u, n_y, n_p) =
            (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=8));
        let steps: Vec<LpvMatrices> = (0..n_p)
            .map(|_| LpvMatrices {
                a: rand_mat(&mut rng, n_x, n_x),
                b: rand_mat(&mut rng, n_x, n_u),
                c: rand_mat(&mut rng, n_y, n_x),
                d: rand_mat(&mut rng, n_y, n_u),
            })
            .collect();
        let x0 = rand_mat(&mut rng, n_x, 1).column(0).into_owned();
        let u = rand_mat(&mut rng, n_u * n_p, 1).column(0).into_owned();
        let (mut x, mut xs) = (x0.clone(), Vec::new());
        for (i, s) in steps.iter().enumerate() {
            x = &s.a * &x + &s.b * u.rows(i * n_u, n_u);
            xs.extend(x.iter().copied());
        }
        let oracle = DVector::from_vec(xs);
        let stacked = build_from_matrices(&steps, 0).unwrap().predict_states(&x0, &u).unwrap();
        worst = worst.max((stacked - &oracle).norm() / oracle.norm().max(1.0));
    }
    let t = start.elapsed().as_secs_f64();
    (worst <= 1e-10 && t < 10.0, format!("worst relative error {worst:.2e} over 200 instances in {t:.2} s"))
}

// 3 ------------------------------------------------------------------------

fn enumerate(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let (n, m) = (g.len(), b.len());
    let mut best = f64::INFINITY;
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
        let Some(z) = kkt.lu().solve(&rhs) else { continue };
        let x = z.rows(0, n).into_owned();
        if z.rows(n, act.len()).iter().any(|l| *l < -1e-9) || (a * &x - b).iter().any(|v| *v > 1e-9) {
            continue;
        }
        best = best.min(0.5 * x.dot(&(h * &x)) + g.dot(&x));
    }
    best
}

fn qp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let start = Instant::now();
    let settings = QpSettings { eps: 1e-9, eps_infeasible: 1e-9, max_iter: 50_000, ..QpSettings::default() };
    let (mut gap, mut kkt, mut failed) = (0.0f64, 0.0f64, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=6);
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(m, |_, _| rng.random_range(0.05..1.0));
        let best = enumerate(&h, &g, &a, &b);
        let sol = solve(&QpProblem::new(h, g).with_inequalities(a, b), None, &settings).unwrap();
        if sol.status != QpStatus::Optimal {
            failed += 1;
            continue;
        }
        gap = gap.max((sol.objective - best).abs() / best.abs().max(1.0));
        kkt = kkt.max(sol.residuals.max());
    }
    let t = start.elapsed().as_secs_f64();
    (
        failed == 0 && gap <= 1e-7 && kkt <= 1e-6 && t < 30.0,
        format!("objective gap {gap:.2e}, KKT residual {kkt:.2e}, {failed} not optimal, {t:.2} s"),
    )
}

// 4, 6, 7 -------------------------------------------------------------------

fn benchmark_logs() -> (Option<ClosedLoopLog>, Option<ClosedLoopLog>) {
    let setup = setup("benchmark.json");
    let arms = [Arm::parse("taylor").unwrap(), Arm::parse("frozen").unwrap()];
    let mut report = compare(&setup, &arms, None);
    let frozen = report.arms.pop().and_then(|r| r.log);
    let taylor = report.arms.pop().and_then(|r| r.log);
    (taylor, frozen)
}

fn predictor_dominance(taylor: &ClosedLoopLog, frozen: &ClosedLoopLog) -> Outcome {
    let n = taylor.rows.len();
    let (Some(et), Some(ef)) = (scheduling_error(taylor, 0, n), scheduling_error(frozen, 0, frozen.rows.len())) else {
        return (false, "no complete horizon in the logs".into());
    };
    let late = metrics(taylor).late_scheduling_error.unwrap_or(f64::INFINITY);
    (et < ef && late < 1e-6, format!("mean error taylor {et:.4} vs frozen {ef:.4}; taylor late max {late:.2e}"))
}

fn tracking(log: &ClosedLoopLog) -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let refs = &log.meta.references;
    for (i, (start, y_r)) in refs.iter().enumerate().skip(1) {
        let end = refs.get(i + 1).map_or(log.rows.len(), |r| r.0);
        let prev = &refs[i - 1].1;
        let last = &log.rows[end - 1].y;
        for j in 0..y_r.len() {
            let change = (y_r[j] - prev[j]).abs();
            let rel = (last[j] - y_r[j]).abs() / change;
            worst = worst.max(rel);
            ok &= rel <= 0.01;
        }
        ok &= end > *start;
    }
    let optimal =
        log.rows.iter().filter(|r| r.status == "optimal" && !r.softened).count() as f64 / log.rows.len() as f64;
    (
        ok && optimal >= 0.99,
        format!(
            "worst final error {:.2e} of the change, optimal at {:.2} % of {} samples",
            worst,
            100.0 * optimal,
            log.rows.len()
        ),
    )
}

fn real_time(log: &ClosedLoopLog) -> Outcome {
    let mean = log.rows.iter().map(|r| r.solve_time).sum::<f64>() / log.rows.len() as f64;
    let limit = 0.1 * log.meta.sample_time;
    (mean < limit, format!("mean compute time {:.3} ms, limit {:.0} ms", 1e3 * mean, 1e3 * limit))
}

// 5 ------------------------------------------------------------------------

fn terminal() -> Outcome {
    let start = Instant::now();
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let vertices = vec![Vertex { a: one(1.2), b: one(1.0) }];
    let bounds = LmiBounds { x_bar: DVector::from_element(1, 1.0), u_bar: DVector::from_element(1, 1.0) };
    let ing = synthesize(&vertices, &one(1.0), &one(1.0), &bounds, &SynthesisSettings::default()).unwrap().ingredients;
    // best invariant interval over a sweep of linear gains
    let y_sweep = (0..=200_000)
        .map(|i| -2.0 + 4.0 * i as f64 / 200_000.0)
        .map(|k: f64| ((1.0 - (1.2 + k).powi(2)) / (1.0 + k * k)).min(1.0).min(1.0 / (k * k)))
        .fold(f64::NEG_INFINITY, f64::max);
    let cert = verify(&vertices, &ing.q, &ing.r, &ing.y, &ing.w, &bounds, CERT_TOL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let inv = invariance_check(&ing, &vertices, 10_000, &mut rng).violations;
    let lyap = lyapunov_decrease_check(&ing, &vertices, &ing.q, &ing.r, 10_000, &mut rng).violations;
    let scalar_ok = cert.margin >= 0.0 && inv == 0 && lyap == 0 && (ing.y[(0, 0)] - y_sweep).abs() < 1e-4;

    let text = std::fs::read_to_string(scenarios().join("terminal_gaslift.json")).unwrap();
    let mut job: TerminalJob = serde_json::from_str(&text).unwrap();
    job.monte_carlo = 10_000;
    let (gas_ok, gas) = match run_job(&job) {
        Ok(art) => {
            let dense = art.dense_certificate.as_ref();
            let mc = art.monte_carlo.as_ref();
            let ok = dense.is_some_and(|d| d.margin >= 0.0 && d.valid)
                && mc.is_some_and(|m| m.invariance.violations == 0 && m.lyapunov.violations == 0);
            let desc = format!(
                "gas-lift dense margin {:.1e} on {} vertices, MC violations {}/{}",
                dense.map_or(f64::NAN, |d| d.margin),
                dense.map_or(0, |d| d.n_vertices),
                mc.map_or(usize::MAX, |m| m.invariance.violations),
                mc.map_or(usize::MAX, |m| m.lyapunov.violations)
            );
            (ok, desc)
        }
        Err(e) => (false, format!("gas-lift synthesis failed: {e}")),
    };
    let t = start.elapsed().as_secs_f64();
    (
        scalar_ok && gas_ok && t < 60.0,
        format!(
            "scalar P {:.6} kappa {:.6} margin {:.1e} MC {}/{}; {gas}; {t:.1} s",
            ing.p[(0, 0)],
            ing.kappa[(0, 0)],
            cert.margin,
            inv,
            lyap
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn recursive_feasibility() -> Outcome {
    let log = match run(&setup("demo.json"), None) {
        Ok(log) => log,
        Err(e) => return (false, e.to_string()),
    };
    let infeasible = log.events.iter().filter(|e| e.kind == "candidate-infeasible").count();
    let softened = log.rows.iter().filter(|r| r.softened).count();
    let rises = log.rows.windows(2).filter(|w| w[1].cost - w[0].cost > 1e-9).count();
    (
        infeasible == 0 && softened == 0 && rises == 0,
        format!("{} samples, {infeasible} infeasible candidates, {rises} cost increases", log.rows.len()),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 embedding exactness", embedding()),
        ("2 prediction equivalence", prediction()),
        ("3 QP correctness", qp()),
    ];
    let (taylor, frozen) = benchmark_logs();
    match (&taylor, &frozen) {
        (Some(t), Some(f)) => results.push(("4 predictor dominance", predictor_dominance(t, f))),
        _ => results.push(("4 predictor dominance", (false, "a benchmark arm produced no log".into()))),
    }
    results.push(("5 terminal certification", terminal()));
    match &taylor {
        Some(t) => {
            results.push(("6 closed-loop tracking", tracking(t)));
            results.push(("7 real-time", real_time(t)));
        }
        None => {
            results.push(("6 closed-loop tracking", (false, "no log".into())));
            results.push(("7 real-time", (false, "no log".into())));
        }
    }
    results.push(("8 recursive feasibility", recursive_feasibility()));

    for (name, (pass, detail)) in &results {
        println!("{} {name}: {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|(_, (pass, _))| !pass) {
        std::process::exit(1);
    }
}
