//! Property checks shared by the integration tests and the acceptance run.
//!
//! Every check drives a deterministic proptest runner and returns the first
//! counterexample as an error string.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qnac::actor::{estimate_grad, estimate_hess, fo_update, qn_update, Method};
use qnac::critic::QuadraticFeatures;
use qnac::envs::LqrEnv;
use qnac::linalg::{min_sym_eigenvalue, project_psd, solve_or_pinv, symmetrize, unvec, vec_mat, Mat, Vector};
use qnac::lstd::{fit_critic, CriticSamples, CurvatureMode, LstdOptions};
use qnac::mdp::{episode_rng, rollout, rollout_batch, DiffPolicy, Trajectory};
use qnac::policies::LinearPolicy;
use qnac::trainer::{train, TrainConfig};

/// A stabilizing gain for the benchmark LQR (closed-loop radius ≈ 0.99).
pub fn stable_gain() -> Mat {
    Mat::from_row_slice(2, 3, &[0.2, 0.4, 0.0, -0.2, -0.4, -0.4])
}

pub fn lqr_batch(env: &LqrEnv, theta: &Vector, episodes: usize, horizon: usize, sigma: f64, seed: u64) -> Vec<Trajectory> {
    let policy = LinearPolicy::new(3, 2);
    rollout_batch(env, &policy, theta, episodes, horizon, sigma, seed, 0).expect("rollout")
}

pub fn lqr_samples(env: &LqrEnv, theta: &Vector, episodes: usize, horizon: usize, sigma: f64, seed: u64) -> CriticSamples {
    let n = env.a.nrows();
    let m = env.b.ncols();
    let policy = LinearPolicy::new(n, m);
    let batch = rollout_batch(env, &policy, theta, episodes, horizon, sigma, seed, 0).expect("rollout");
    CriticSamples::from_batch(&batch, &policy, theta, &QuadraticFeatures::new(n), env.gamma, sigma).expect("samples")
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| match e {
        TestError::Fail(reason, value) => format!("{reason} at {value:?}"),
        TestError::Abort(reason) => format!("aborted: {reason}"),
    })
}

fn sym_strategy(max_n: usize) -> impl Strategy<Value = Mat> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| symmetrize(&Mat::from_vec(n, n, v)))
    })
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    let rank = rng.random_range(0..=n);
    let l = Mat::from_fn(n, rank.max(1), |_, _| rng.random_range(-1.0..1.0) * scale);
    if rank == 0 {
        Mat::zeros(n, n)
    } else {
        &l * l.transpose()
    }
}

/// `project_psd` is idempotent and no sampled PSD matrix is closer to `M`.
pub fn psd_projection() -> Result<(), String> {
    check(48, (sym_strategy(6), any::<u64>()), |(m, seed)| {
        let p = project_psd(&m).unwrap();
        let pp = project_psd(&p).unwrap();
        prop_assert!((&pp - &p).norm() <= 1e-10, "not idempotent");
        prop_assert!(min_sym_eigenvalue(&p).unwrap() >= -1e-10);
        let best = (&p - &m).norm();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let scale = rng.random_range(0.05..1.5);
            let q = random_psd(&mut rng, m.nrows(), scale);
            prop_assert!(best <= (&q - &m).norm() + 1e-12, "a sampled PSD matrix is closer");
        }
        Ok(())
    })
}

/// `unvec(vec(M)) = M` exactly for every shape up to 8×8.
pub fn vec_round_trip() -> Result<(), String> {
    let strategy = (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e6f64..1e6, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
    });
    check(128, strategy, |m| {
        let back = unvec(&vec_mat(&m), m.nrows(), m.ncols()).unwrap();
        prop_assert_eq!(back, m);
        Ok(())
    })
}

/// `solve_or_pinv(A, A x)` returns `x` for well-conditioned `A`.
pub fn solve_recovers() -> Result<(), String> {
    let strategy = (1usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
            .prop_map(move |(a, x)| {
                let a = Mat::from_vec(n, n, a) + Mat::identity(n, n) * (2.0 * n as f64);
                (a, Vector::from_vec(x))
            })
    });
    check(128, strategy, |(a, x)| {
        let got = solve_or_pinv(&a, &(&a * &x)).unwrap();
        prop_assert!((&got - &x).amax() <= 1e-8 * (1.0 + x.amax()));
        Ok(())
    })
}

/// Identical seeds give bit-identical batches, independent of scheduling.
pub fn rollout_determinism() -> Result<(), String> {
    let env = LqrEnv::benchmark();
    let policy = LinearPolicy::new(3, 2);
    let strategy = (any::<u64>(), prop::collection::vec(-0.5f64..0.5, 6), 0.0f64..0.5);
    check(16, strategy, |(seed, dtheta, sigma)| {
        let theta = vec_mat(&stable_gain()) + Vector::from_vec(dtheta) * 0.1;
        let a = rollout_batch(&env, &policy, &theta, 8, 20, sigma, seed, 3).unwrap();
        let b = rollout_batch(&env, &policy, &theta, 8, 20, sigma, seed, 3).unwrap();
        prop_assert_eq!(&a, &b);
        for (e, traj) in a.iter().enumerate() {
            let mut rng = episode_rng(seed, 3, e);
            let single = rollout(&env, &policy, &theta, 20, sigma, &mut rng, e).unwrap();
            prop_assert_eq!(traj, &single);
        }
        Ok(())
    })
}

/// Central differences of `act` in `θ` match `jacobian`, which does not
/// depend on `θ`.
pub fn jacobian_contract() -> Result<(), String> {
    let strategy = (1usize..=4, 1usize..=3).prop_flat_map(|(n_s, n_a)| {
        (
            Just((n_s, n_a)),
            prop::collection::vec(-3.0f64..3.0, n_s * n_a),
            prop::collection::vec(-3.0f64..3.0, n_s * n_a),
            prop::collection::vec(-5.0f64..5.0, n_s),
        )
    });
    check(96, strategy, |((n_s, n_a), t1, t2, s)| {
        let policy = LinearPolicy::new(n_s, n_a);
        let (t1, t2, s) = (Vector::from_vec(t1), Vector::from_vec(t2), Vector::from_vec(s));
        let jac = policy.jacobian(&t1, &s).unwrap();
        prop_assert_eq!(&jac, &policy.jacobian(&t2, &s).unwrap());
        let h = 1e-4;
        for i in 0..t1.len() {
            let mut plus = t1.clone();
            let mut minus = t1.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (policy.act(&plus, &s).unwrap() - policy.act(&minus, &s).unwrap()) / (2.0 * h);
            let exact = jac.row(i).transpose();
            prop_assert!((&fd - &exact).amax() <= 1e-8 * (1.0 + exact.amax()));
        }
        Ok(())
    })
}

/// Shuffling the episodes of a batch leaves the critic fit unchanged.
pub fn order_independence() -> Result<(), String> {
    let env = LqrEnv::benchmark();
    let policy = LinearPolicy::new(3, 2);
    let theta = vec_mat(&stable_gain());
    let features = QuadraticFeatures::new(3);
    let batch = lqr_batch(&env, &theta, 60, 15, 0.1, 11);
    let opts = LstdOptions {
        curvature: CurvatureMode::Projected,
        ..LstdOptions::default()
    };
    let fit = |b: &[Trajectory]| {
        let samples = CriticSamples::from_batch(b, &policy, &theta, &features, env.gamma, 0.1).unwrap();
        fit_critic(&samples, &opts, true).unwrap().params
    };
    let reference = fit(&batch);
    check(8, Just(batch.clone()).prop_shuffle(), |shuffled| {
        let p = fit(&shuffled);
        prop_assert!((&p.v - &reference.v).amax() <= 1e-12 * (1.0 + reference.v.amax()));
        prop_assert!((&p.g - &reference.g).amax() <= 1e-12 * (1.0 + reference.g.amax()));
        prop_assert!((&p.w - &reference.w).amax() <= 1e-12 * (1.0 + reference.w.amax()));
        Ok(())
    })
}

/// Scaling every stage cost by `c` scales `v`, `g` and the unprojected `W`
/// by `c`.
pub fn cost_scaling() -> Result<(), String> {
    let env = LqrEnv::benchmark();
    let theta = vec_mat(&stable_gain());
    let base = lqr_samples(&env, &theta, 60, 15, 0.1, 5);
    let opts = LstdOptions {
        curvature: CurvatureMode::Projected,
        ..LstdOptions::default()
    };
    let reference = fit_critic(&base, &opts, true).unwrap();
    let w0 = reference.accumulators.curvature.clone().unwrap();
    let w0 = qnac::linalg::solve_detailed(&w0.a, &w0.b, opts.rcond).unwrap().x;
    check(12, 0.1f64..10.0, |c| {
        let mut scaled = base.clone();
        for s in scaled.episodes.iter_mut().flatten() {
            s.cost *= c;
        }
        let fit = fit_critic(&scaled, &opts, true).unwrap();
        let close = |a: &Vector, b: &Vector| (a - b * c).amax() <= 1e-7 * (1.0 + (b * c).amax());
        prop_assert!(close(&fit.params.v, &reference.params.v), "v");
        prop_assert!(close(&fit.params.g, &reference.params.g), "g");
        let sys = fit.accumulators.curvature.unwrap();
        let w = qnac::linalg::solve_detailed(&sys.a, &sys.b, opts.rcond).unwrap().x;
        prop_assert!(close(&w, &w0), "unprojected W");
        Ok(())
    })
}

/// `estimate_hess` is symmetric and PSD for PSD `W`.
pub fn hessian_symmetric_psd() -> Result<(), String> {
    let env = LqrEnv::benchmark();
    let samples = lqr_samples(&env, &vec_mat(&stable_gain()), 10, 10, 0.1, 2);
    check(64, (any::<u64>(), 0.01f64..10.0), |(seed, scale)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_psd(&mut rng, 6, scale);
        let h = estimate_hess(&samples, &w).unwrap();
        prop_assert!((&h - h.transpose()).norm() <= 1e-12);
        prop_assert!(min_sym_eigenvalue(&h).unwrap() >= -1e-10 * (1.0 + h.amax()));
        Ok(())
    })
}

/// The quasi-Newton direction is a descent direction, and `H = cI` gives
/// the first-order step with rate `α / c`.
pub fn descent_direction() -> Result<(), String> {
    let strategy = (2usize..=6).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
            any::<u64>(),
            0.1f64..10.0,
        )
    });
    check(128, strategy, |(grad, theta, seed, c)| {
        let n = grad.len();
        let (grad, theta) = (Vector::from_vec(grad), Vector::from_vec(theta));
        prop_assume!(grad.norm() > 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_psd(&mut rng, n, 1.0) + Mat::identity(n, n) * 1e-3;
        let step = qn_update(&theta, &grad, &h, 0.5, 1e-8, 1).unwrap();
        prop_assert!(grad.dot(&step.direction) > 0.0);
        let iso = qn_update(&theta, &grad, &(Mat::identity(n, n) * c), 0.5, 1e-8, 1).unwrap();
        let fo = fo_update(&theta, &grad, 0.5 / c);
        prop_assert!((&iso.theta - &fo).amax() <= 1e-12 * (1.0 + fo.amax()));
        Ok(())
    })
}

/// Two training runs with the same configuration agree bit for bit.
pub fn run_determinism() -> Result<(), String> {
    let env = LqrEnv::benchmark();
    let policy = LinearPolicy::new(3, 2);
    let features = QuadraticFeatures::new(3);
    let theta0 = vec_mat(&stable_gain());
    let strategy = (any::<u64>(), prop::bool::ANY);
    check(4, strategy, |(seed, qn)| {
        let mut cfg = TrainConfig::new(if qn { Method::QuasiNewton } else { Method::FirstOrder });
        cfg.episodes = 30;
        cfg.horizon = 15;
        cfg.max_iters = 4;
        cfg.seed = seed;
        cfg.alpha = if qn { 0.5 } else { 3e-6 };
        let a = train(&env, &policy, &features, &theta0, &cfg, None).unwrap();
        let b = train(&env, &policy, &features, &theta0, &cfg, None).unwrap();
        prop_assert_eq!(a.records.len(), b.records.len());
        prop_assert_eq!(&a.status, &b.status);
        for (x, y) in a.records.iter().zip(&b.records) {
            prop_assert!(x.same_result(y), "records differ at iteration {}", x.iteration);
        }
        Ok(())
    })
}

/// Sampled gradient estimate for a given `(v, g)` fit, exposed for the
/// oracle comparisons.
pub fn sampled_gradient(samples: &CriticSamples, opts: &LstdOptions) -> Vector {
    let fit = fit_critic(samples, opts, false).unwrap();
    estimate_grad(samples, &fit.params.g).unwrap()
}

pub type Property = (&'static str, fn() -> Result<(), String>);

pub const PROPERTIES: [Property; 10] = [
    ("PSD projection idempotence and optimality", psd_projection),
    ("vec/unvec round trip", vec_round_trip),
    ("solve_or_pinv recovery", solve_recovers),
    ("rollout determinism", rollout_determinism),
    ("jacobian finite-difference contract", jacobian_contract),
    ("accumulator order independence", order_independence),
    ("cost-scaling linearity", cost_scaling),
    ("Hessian estimate symmetric and PSD", hessian_symmetric_psd),
    ("quasi-Newton descent direction", descent_direction),
    ("training run determinism", run_determinism),
];
