//! Acceptance run: one PASS/FAIL line per criterion, with supporting detail.
//!
//! The binary exits 0 after reporting so that the workspace test suite stays
//! usable while a criterion is red. Set `QNAC_ACCEPTANCE_STRICT=1` to turn any
//! failed criterion into a nonzero exit status.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;

use qnac::actor::{estimate_hess, Method};
use qnac::config::{EnvConfig, ExperimentConfig};
use qnac::critic::quad_features;
use qnac::envs::LqrEnv;
use qnac::linalg::{condition_number, project_psd, vec_mat, Mat, Vector};
use qnac::lstd::{fit_baseline, fit_critic, fit_curvature, fit_gradient, CriticSample, CriticSamples, CurvatureMode, LstdOptions};
use qnac::mdp::rollout_batch;
use qnac::oracle::{closed_form_j_theta, fd_grad, fd_grad_second_order, fd_hess, lqr_optimum, value_matrix, FD_STEP};
use qnac::policies::LinearPolicy;
use qnac::trainer::{train, RunRecord, RunStatus, TrainOutcome};
use qnac::critic::QuadraticFeatures;

use common::{lqr_samples, sampled_gradient, stable_gain, PROPERTIES};

struct Tally {
    results: Vec<(&'static str, bool)>,
}

impl Tally {
    fn report(&mut self, id: &'static str, title: &str, pass: bool, secs: f64, limit: f64, detail: &str) {
        let in_time = secs <= limit;
        let pass = pass && in_time;
        let word = if pass { "PASS" } else { "FAIL" };
        let timing = if in_time {
            format!("{secs:.1} s, limit {limit} s")
        } else {
            format!("{secs:.1} s, OVER the {limit} s limit")
        };
        println!("{id} {word}  {title}: {detail} [{timing}]");
        self.results.push((id, pass));
    }
}

fn info(line: impl AsRef<str>) {
    println!("      info: {}", line.as_ref());
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn noise_free_benchmark() -> LqrEnv {
    LqrEnv::benchmark().with_noise_cov(Mat::zeros(3, 3)).unwrap()
}

fn rel_err(est: &Vector, exact: &Vector) -> f64 {
    (est - exact).norm() / exact.norm()
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Expected discounted cost of the first `horizon` steps under `u = −Ks`
/// without noise: `tr(P_K (Σ₀ + m₀m₀ᵀ))` with
/// `P_{j+1} = Q + KᵀRK + γ(A − BK)ᵀ P_j (A − BK)`, `P_0 = 0`.
fn truncated_cost(env: &LqrEnv, theta: &Vector, horizon: usize) -> qnac::Result<f64> {
    let k = qnac::linalg::unvec(theta, env.b.ncols(), env.a.nrows())?;
    let a_cl = &env.a - &env.b * &k;
    let stage = &env.q + k.transpose() * &env.r * &k;
    let mut p = Mat::zeros(env.a.nrows(), env.a.nrows());
    for _ in 0..horizon {
        p = &stage + a_cl.transpose() * &p * &a_cl * env.gamma;
    }
    let second = &env.init_cov + &env.init_mean * env.init_mean.transpose();
    Ok((p * second).trace())
}

fn ac1(t: &mut Tally) {
    let start = Instant::now();
    let env = LqrEnv::benchmark();
    let sol = lqr_optimum(&env).unwrap();
    let theta = vec_mat(&sol.k_star);
    let f = |th: &Vector| closed_form_j_theta(&env, th);
    let grad = fd_grad(f, &theta, FD_STEP).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = sol.bellman_residual < 1e-9 && grad.norm() < 1e-6;
    t.report(
        "AC1",
        "Riccati oracle validity",
        pass,
        secs,
        1.0,
        &format!(
            "Bellman residual {:.2e} (< 1e-9), ‖fd ∇J(θ⋆)‖ {:.2e} (< 1e-6)",
            sol.bellman_residual,
            grad.norm()
        ),
    );
    info(format!(
        "J⋆ = {:.6}, closed-loop radius {:.4}, K⋆ rows {:?}",
        sol.j_star,
        sol.closed_loop_radius,
        sol.k_star.row_iter().map(|r| r.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()).collect::<Vec<_>>()
    ));
    let second = fd_grad_second_order(f, &theta, FD_STEP).unwrap();
    info(format!(
        "three-point stencil at the same step gives ‖fd ∇J(θ⋆)‖ = {:.2e} (O(h²) truncation)",
        second.norm()
    ));
}

fn ac2(t: &mut Tally) {
    let start = Instant::now();
    let env = noise_free_benchmark();
    let theta0 = vec_mat(&LqrEnv::benchmark_initial_gain());
    let opts = LstdOptions::default();
    let samples = lqr_samples(&env, &theta0, 2000, 50, 0.05, 2024);
    let est = sampled_gradient(&samples, &opts);
    let reference = fd_grad(|th| closed_form_j_theta(&env, th), &theta0, FD_STEP);
    let secs = start.elapsed().as_secs_f64();
    match reference {
        Ok(exact) => {
            let (rel, cos) = (rel_err(&est, &exact), cosine(&est, &exact));
            t.report(
                "AC2",
                "gradient compatibility at K₀",
                rel <= 0.1 && cos >= 0.99,
                secs,
                120.0,
                &format!("relative error {rel:.4} (≤ 0.1), cosine {cos:.5} (≥ 0.99)"),
            );
        }
        Err(e) => t.report(
            "AC2",
            "gradient compatibility at K₀",
            false,
            secs,
            120.0,
            &format!("reference gradient undefined, J is infinite at K₀ ({e}); sampled estimate ‖∇J‖ = {:.3e}", est.norm()),
        ),
    }
    let trunc = fd_grad(|th| truncated_cost(&env, th, 50), &theta0, FD_STEP).unwrap();
    info(format!(
        "against the exact gradient of the 50-step truncated cost at K₀: relative error {:.4}, cosine {:.5} (‖∇J_50‖ = {:.3e})",
        rel_err(&est, &trunc),
        cosine(&est, &trunc),
        trunc.norm()
    ));
    let ks = vec_mat(&stable_gain());
    let samples = lqr_samples(&env, &ks, 2000, 50, 0.05, 2024);
    let est = sampled_gradient(&samples, &opts);
    let exact = fd_grad(|th| closed_form_j_theta(&env, th), &ks, FD_STEP).unwrap();
    info(format!(
        "supplementary, stabilizing gain {:?}: relative error {:.4}, cosine {:.5}",
        stable_gain().as_slice(),
        rel_err(&est, &exact),
        cosine(&est, &exact)
    ));
}

fn ac3(t: &mut Tally) {
    let start = Instant::now();
    let env = noise_free_benchmark();
    let sol = lqr_optimum(&env).unwrap();
    let theta = vec_mat(&sol.k_star);
    let samples = lqr_samples(&env, &theta, 2000, 50, 0.05, 77);
    let exact = fd_hess(|th| closed_form_j_theta(&env, th), &theta, FD_STEP).unwrap();
    let hess_err = |mode: CurvatureMode| {
        let opts = LstdOptions {
            curvature: mode,
            ..LstdOptions::default()
        };
        let fit = fit_critic(&samples, &opts, true).unwrap();
        let h = estimate_hess(&samples, &(&fit.params.w * mode.hessian_scale())).unwrap();
        ((&h - &exact).norm() / exact.norm(), fit.diagnostics.clamped_eigs)
    };
    let (err, clamped) = hess_err(CurvatureMode::Centered);
    let secs = start.elapsed().as_secs_f64();
    t.report(
        "AC3",
        "Hessian at the optimum",
        err <= 0.15,
        secs,
        120.0,
        &format!("relative Frobenius error {err:.4} (≤ 0.15), centered curvature fit, {clamped} eigenvalues clamped"),
    );
    let (literal, clamped) = hess_err(CurvatureMode::Projected);
    info(format!(
        "projected-only curvature fit (uncentered regressors, W used unscaled): relative error {literal:.4}, {clamped} eigenvalues clamped"
    ));
}

fn ac4(t: &mut Tally) {
    let start = Instant::now();
    let env = noise_free_benchmark();
    let opts = LstdOptions::default();
    let baseline_error = |k: &Mat| -> (Result<f64, String>, f64) {
        let theta = vec_mat(k);
        let policy = LinearPolicy::new(3, 2);
        let batch = rollout_batch(&env, &policy, &theta, 50, 200, 0.0, 404, 0).unwrap();
        let samples =
            CriticSamples::from_batch(&batch, &policy, &theta, &QuadraticFeatures::new(3), env.gamma, 0.0).unwrap();
        let fit = fit_baseline(&samples, &opts).unwrap();
        let cond = condition_number(&fit.system.a);
        let p = match value_matrix(&env, k, None) {
            Ok(p) => p,
            Err(e) => return (Err(e.to_string()), cond),
        };
        let states: Vec<&Vector> = batch.iter().flat_map(|t| t.transitions.iter().map(|x| &x.state)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let worst = (0..100)
            .map(|_| {
                let s = *states.choose(&mut rng).unwrap();
                let exact = (s.transpose() * &p * s)[0];
                (fit.v.dot(&quad_features(s)) - exact).abs() / exact.abs()
            })
            .fold(0.0, f64::max);
        (Ok(worst), cond)
    };
    let (result, cond) = baseline_error(&LqrEnv::benchmark_initial_gain());
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(worst) => t.report(
            "AC4",
            "LSTD baseline exactness at K₀",
            worst <= 1e-4,
            secs,
            30.0,
            &format!("max relative error {worst:.2e} (≤ 1e-4) over 100 visited states"),
        ),
        Err(e) => t.report(
            "AC4",
            "LSTD baseline exactness at K₀",
            false,
            secs,
            30.0,
            &format!("no Lyapunov value exists at K₀ ({e}); cond(A_v) = {cond:.2e}"),
        ),
    }
    let (result, cond) = baseline_error(&stable_gain());
    info(format!(
        "supplementary, stabilizing gain: max relative error {:.2e}, cond(A_v) = {cond:.2e}",
        result.unwrap()
    ));
}

fn ac5(t: &mut Tally) {
    let start = Instant::now();
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut normal = || rng.random_range(-1.0..1.0);
    let g0 = Vector::from_fn(n, |_, _| normal());
    let l = Mat::from_fn(n, n, |_, _| normal());
    let w_psd = &l * l.transpose() / n as f64;
    let u = Vector::from_fn(n, |_, _| normal()).normalize();
    let lambda_max = qnac::linalg::sym_eig(&w_psd).unwrap().eigenvalues.max();
    let w_indef = &w_psd - &u * u.transpose() * (2.0 * lambda_max);

    let mut psis = Vec::new();
    for _ in 0..300 {
        let p = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        psis.push(-&p);
        psis.push(p);
    }
    let samples = CriticSamples::new(
        vec![psis
            .iter()
            .map(|p| CriticSample {
                weight: 1.0,
                phi: Vector::from_element(1, 1.0),
                phi_next: Vector::from_element(1, 1.0),
                cost: 0.0,
                psi: p.clone(),
                jac: Mat::zeros(n, 1),
            })
            .collect()],
        0.99,
        0.0,
    )
    .unwrap();
    let opts = LstdOptions {
        curvature: CurvatureMode::Projected,
        ..LstdOptions::default()
    };
    let recover = |w0: &Mat| {
        let deltas: Vec<f64> = psis.iter().map(|p| p.dot(&g0) + (p.transpose() * w0 * p)[0]).collect();
        let deltas = [deltas];
        let g = fit_gradient(&samples, &deltas, &opts).unwrap().g;
        let w = fit_curvature(&samples, &deltas, &g, &opts).unwrap().w;
        ((&g - &g0).amax(), w)
    };
    let (g_err_psd, w) = recover(&w_psd);
    let w_err_psd = (&w - &w_psd).amax();
    let (g_err_ind, w) = recover(&w_indef);
    let w_err_ind = (&w - project_psd(&w_indef).unwrap()).amax();
    let secs = start.elapsed().as_secs_f64();
    let worst = g_err_psd.max(w_err_psd).max(g_err_ind).max(w_err_ind);
    t.report(
        "AC5",
        "curvature-regression identifiability",
        worst <= 1e-6,
        secs,
        10.0,
        &format!(
            "PSD W₀: g error {g_err_psd:.1e}, W error {w_err_psd:.1e}; indefinite W₀: g error {g_err_ind:.1e}, \
             error to project_psd(W₀) {w_err_ind:.1e} (all ≤ 1e-6)"
        ),
    );
}

struct MethodRuns {
    method: Method,
    seed: u64,
    outcome: TrainOutcome,
}

fn run_config(cfg: &ExperimentConfig) -> Vec<MethodRuns> {
    let specs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let theta_star = cfg.theta_star();
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|&(method, seed)| {
                let theta_star = theta_star.clone();
                scope.spawn(move || {
                    let mut tc = cfg.train_config(method, seed);
                    tc.keep_batches = false;
                    let outcome = train(
                        cfg.env.as_env(),
                        &cfg.policy(),
                        &cfg.features(),
                        &cfg.theta0(),
                        &tc,
                        theta_star.as_ref(),
                    )
                    .unwrap();
                    MethodRuns { method, seed, outcome }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// Record standing for iteration `i`: the record itself, or the final one
/// when the run converged earlier. `None` when the run failed before `i`.
fn at_iteration(run: &TrainOutcome, i: usize) -> Option<&RunRecord> {
    match run.records.get(i - 1) {
        Some(r) => Some(r),
        None if matches!(run.status, RunStatus::Converged { .. }) => run.records.last(),
        None => None,
    }
}

fn describe(run: &TrainOutcome) -> String {
    match &run.status {
        RunStatus::Converged { iteration } => format!("converged at {iteration}"),
        RunStatus::BudgetExhausted => format!("{} iterations", run.records.len()),
        RunStatus::Failed { iteration, reason } => format!("failed at {iteration} ({reason})"),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `(pass, lines)` for the convergence-speed comparison.
fn convergence_comparison(cfg: &ExperimentConfig, runs: &[MethodRuns]) -> (bool, Vec<String>) {
    let theta_star = cfg.theta_star().expect("LQR optimum");
    let d0 = (cfg.theta0() - &theta_star).norm();
    let last = cfg.max_iters;
    let mut pass = true;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let get = |m: Method| runs.iter().find(|r| r.method == m && r.seed == seed).unwrap();
        let (qn, fo) = (get(Method::QuasiNewton), get(Method::FirstOrder));
        let final_dist = |r: &MethodRuns| at_iteration(&r.outcome, last).and_then(|x| x.dist_to_opt);
        let half = |r: &MethodRuns| {
            r.outcome
                .records
                .iter()
                .find(|x| x.dist_to_opt.is_some_and(|d| d <= 0.5 * d0))
                .map(|x| x.iteration)
        };
        let (dq, df) = (final_dist(qn), final_dist(fo));
        let (hq, hf) = (half(qn), half(fo));
        let closer = matches!((dq, df), (Some(a), Some(b)) if a < b);
        let faster = match (hq, hf) {
            (Some(a), Some(b)) => 2 * a <= b,
            (Some(_), None) => true,
            _ => false,
        };
        pass &= closer && faster;
        let fmt_d = |d: Option<f64>| d.map_or("n/a".to_string(), |d| format!("{d:.3e}"));
        let fmt_h = |h: Option<usize>| h.map_or("never".to_string(), |h| h.to_string());
        lines.push(format!(
            "seed {seed}: ‖θ−θ⋆‖ at {last}: QN {} vs FO {} ({}); half-distance iteration: QN {} vs FO {} ({}); QN {}, FO {}",
            fmt_d(dq),
            fmt_d(df),
            if closer { "ok" } else { "not met" },
            fmt_h(hq),
            fmt_h(hf),
            if faster { "ok" } else { "not met" },
            describe(&qn.outcome),
            describe(&fo.outcome),
        ));
    }
    lines.insert(0, format!("‖θ₀−θ⋆‖ = {d0:.4}"));
    (pass, lines)
}

fn gradient_decay(cfg: &ExperimentConfig, runs: &[MethodRuns]) -> (bool, Vec<String>) {
    let mut pass = true;
    let mut lines = Vec::new();
    for r in runs {
        let first = r.outcome.records.first().map(|x| x.grad_norm);
        let last = at_iteration(&r.outcome, cfg.max_iters).map(|x| x.grad_norm);
        let ok = matches!((first, last), (Some(a), Some(b)) if b < 0.1 * a);
        pass &= ok;
        let j: Vec<f64> = r.outcome.records.iter().map(|x| x.j_hat).collect();
        let trend = if j.len() >= 10 {
            format!(
                "median J first 10 {:.4e}, last 10 {:.4e}",
                median(&j[..10]),
                median(&j[j.len() - 10..])
            )
        } else {
            format!("{} of {} iterations logged", j.len(), cfg.max_iters)
        };
        lines.push(format!(
            "{} seed {}: ‖∇J‖ iteration 1 {} → iteration {} {} ({}); {trend}",
            r.method.name(),
            r.seed,
            first.map_or("n/a".into(), |v| format!("{v:.3e}")),
            cfg.max_iters,
            last.map_or("n/a".into(), |v| format!("{v:.3e}")),
            if ok { "ok" } else { "not met" },
        ));
    }
    (pass, lines)
}

fn ac6_ac7(t: &mut Tally) {
    let start = Instant::now();
    let cfg = ExperimentConfig::load(&config_path("lqr_paper.cfg")).unwrap();
    let runs = run_config(&cfg);
    let secs = start.elapsed().as_secs_f64();
    let (pass6, lines6) = convergence_comparison(&cfg, &runs);
    t.report(
        "AC6",
        "convergence speed, quasi-Newton vs first-order (lqr_paper.cfg)",
        pass6,
        secs,
        600.0,
        "QN closer to θ⋆ at iteration 60 and reaching half the initial distance in at most half the FO iterations, every seed",
    );
    for l in &lines6 {
        info(l);
    }
    let (pass7, lines7) = gradient_decay(&cfg, &runs);
    t.report(
        "AC7",
        "gradient-magnitude decay (lqr_paper.cfg)",
        pass7,
        secs,
        600.0,
        "‖∇J‖ at iteration 60 below 10% of iteration 1 for both methods and all seeds",
    );
    for l in &lines7 {
        info(l);
    }

    let start = Instant::now();
    let cfg = ExperimentConfig::load(&config_path("lqr_stable.cfg")).unwrap();
    let runs = run_config(&cfg);
    let (p6, l6) = convergence_comparison(&cfg, &runs);
    let (p7, l7) = gradient_decay(&cfg, &runs);
    info(format!(
        "supplementary, lqr_stable.cfg (stabilizing start, {:.1} s): speed comparison {}, gradient decay {}",
        start.elapsed().as_secs_f64(),
        if p6 { "met" } else { "not met" },
        if p7 { "met" } else { "not met" }
    ));
    for l in l6.iter().chain(&l7) {
        info(format!("  {l}"));
    }
}

fn ac8(t: &mut Tally) {
    let start = Instant::now();
    let cfg = ExperimentConfig::load(&config_path("cartpend.cfg")).unwrap();
    assert!(matches!(cfg.env, EnvConfig::CartPend(_)));
    let runs = run_config(&cfg);
    let secs = start.elapsed().as_secs_f64();
    let mut pass = true;
    let mut lines = Vec::new();
    for r in &runs {
        let recs = &r.outcome.records;
        let complete = recs.len() == cfg.max_iters && cfg.max_iters >= 10;
        let j: Vec<f64> = recs.iter().map(|x| x.j_hat).collect();
        let (m_first, m_last) = if j.len() >= 10 {
            (median(&j[..10]), median(&j[j.len() - 10..]))
        } else {
            (f64::NAN, f64::NAN)
        };
        let cost_down = complete && m_last < m_first;
        let (p_first, p_last) = (
            recs.first().map_or(f64::NAN, |x| x.penalty_hat),
            recs.last().map_or(f64::NAN, |x| x.penalty_hat),
        );
        let penalty_down = complete && p_last < p_first;
        pass &= cost_down && penalty_down;
        lines.push(format!(
            "{} seed {}: {}; median J first 10 {m_first:.4} → last 10 {m_last:.4} ({}); penalty iteration 1 {p_first:.4} → final {p_last:.4} ({})",
            r.method.name(),
            r.seed,
            describe(&r.outcome),
            if cost_down { "ok" } else { "not met" },
            if penalty_down { "ok" } else { "not met" },
        ));
    }
    t.report(
        "AC8",
        "cart-pendulum training (cartpend.cfg)",
        pass,
        secs,
        300.0,
        "50 updates lower the median J (first 10 vs last 10) and the final batch penalty is below the initial one, every run",
    );
    for l in &lines {
        info(l);
    }
}

fn ac9(t: &mut Tally) {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for (name, check) in PROPERTIES {
        let s = Instant::now();
        let result = check();
        let status = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("FAILED: {e}"),
        };
        lines.push(format!("{name}: {status} ({:.2} s)", s.elapsed().as_secs_f64()));
        if result.is_err() {
            failures.push(name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    t.report(
        "AC9",
        "invariant property suites",
        failures.is_empty(),
        secs,
        120.0,
        &format!("{} of {} properties hold", PROPERTIES.len() - failures.len(), PROPERTIES.len()),
    );
    for l in &lines {
        info(l);
    }
}

fn main() {
    let mut tally = Tally { results: Vec::new() };
    ac1(&mut tally);
    ac2(&mut tally);
    ac3(&mut tally);
    ac4(&mut tally);
    ac5(&mut tally);
    ac6_ac7(&mut tally);
    ac8(&mut tally);
    ac9(&mut tally);

    let passed = tally.results.iter().filter(|(_, p)| *p).count();
    let failed: Vec<&str> = tally.results.iter().filter(|(_, p)| !*p).map(|(id, _)| *id).collect();
    println!("acceptance: {passed} of {} criteria passed", tally.results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if std::env::var_os("QNAC_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
