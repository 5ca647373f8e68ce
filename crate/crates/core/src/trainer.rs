//! The outer actor-critic loop: rollouts, the three critic regressions, the
//! actor estimates and the parameter update, repeated until convergence or
//! an iteration budget runs out.

use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::actor::{estimate_grad, estimate_hess, fo_update, qn_update, ActorStep, Method};
use crate::critic::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::lstd::{fit_critic, CriticDiagnostics, CriticSamples, LstdOptions};
use crate::mdp::{discounted_sum, rollout_batch, DiffPolicy, Environment, Trajectory};

/// Batch ids at or above this offset are used for evaluation rollouts, so
/// they never share a stream with training batches.
const EVAL_BATCH_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Episodes per batch `E`.
    pub episodes: usize,
    /// Steps per episode `K`.
    pub horizon: usize,
    pub max_iters: usize,
    /// Exploration scale `σ`.
    pub sigma: f64,
    /// Step size `α_θ`.
    pub alpha: f64,
    /// First nonzero rung of the damping ladder.
    pub mu_min: f64,
    pub tol_theta: f64,
    pub seed: u64,
    pub lstd: LstdOptions,
    /// Episodes of an extra exploration-free batch evaluating each iterate;
    /// 0 disables it.
    pub eval_episodes: usize,
    /// Keep the first and last training batches in the outcome.
    pub keep_batches: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            episodes: 500,
            horizon: 50,
            max_iters: 60,
            sigma: 0.1,
            alpha: match method {
                Method::QuasiNewton => 1.0,
                Method::FirstOrder => 1e-3,
            },
            mu_min: 1e-8,
            tol_theta: 1e-6,
            seed: 1,
            lstd: LstdOptions::default(),
            eval_episodes: 0,
            keep_batches: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes as f64),
            ("horizon", self.horizon as f64),
            ("alpha", self.alpha),
            ("mu_min", self.mu_min),
            ("tol_theta", self.tol_theta),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {value}")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("must be finite and ≥ 0, got {}", self.sigma)));
        }
        if !(self.lstd.ridge >= 0.0 && self.lstd.ridge.is_finite()) {
            return Err(Error::config("ridge", format!("must be finite and ≥ 0, got {}", self.lstd.ridge)));
        }
        Ok(())
    }
}

/// Log entry of one RL iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// 1-based update index.
    pub iteration: usize,
    /// Parameters after this iteration's update.
    pub theta: Vector,
    /// `‖∇J‖` estimated from this iteration's batch.
    pub grad_norm: f64,
    /// Batch average of the `γ^{k-1}`-weighted return.
    pub j_hat: f64,
    /// Batch average of the discounted soft-constraint penalty.
    pub penalty_hat: f64,
    /// Exploration-free evaluation return of the pre-update parameters.
    pub j_eval: Option<f64>,
    /// `‖θ − θ⋆‖` after the update, when `θ⋆` is known.
    pub dist_to_opt: Option<f64>,
    pub step_norm: f64,
    pub critic: CriticDiagnostics,
    pub mu: f64,
    pub method: Method,
    pub wall_time: Duration,
}

impl RunRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &RunRecord) -> bool {
        RunRecord {
            wall_time: other.wall_time,
            ..self.clone()
        } == *other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Converged { iteration: usize },
    BudgetExhausted,
    /// Rollout blow-up or diverged update; the records up to the failure are
    /// kept.
    Failed { iteration: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub status: RunStatus,
    pub initial_theta: Vector,
    pub final_theta: Vector,
    pub first_batch: Option<Vec<Trajectory>>,
    pub last_batch: Option<Vec<Trajectory>>,
    /// Last actor step, for inspection.
    pub last_step: Option<ActorStep>,
}

/// True when the last `min(3, available)` step norms in `history` are all
/// below `tol`. Needs at least two entries.
pub fn check_converged(history: &[Vector], tol: f64) -> bool {
    if history.len() < 2 {
        return false;
    }
    let steps = (history.len() - 1).min(3);
    history
        .windows(2)
        .rev()
        .take(steps)
        .all(|w| (&w[1] - &w[0]).norm() < tol)
}

struct Iterate {
    theta: Vector,
    grad_norm: f64,
    j_hat: f64,
    penalty_hat: f64,
    critic: CriticDiagnostics,
    step: ActorStep,
    batch: Vec<Trajectory>,
}

fn one_iteration(
    env: &dyn Environment,
    policy: &dyn DiffPolicy,
    features: &dyn FeatureMap,
    theta: &Vector,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Iterate> {
    let gamma = env.discount();
    let batch = rollout_batch(env, policy, theta, cfg.episodes, cfg.horizon, cfg.sigma, cfg.seed, iteration as u64)?;
    let e = batch.len() as f64;
    let j_hat = batch.iter().map(|t| t.discounted_cost(gamma)).sum::<f64>() / e;
    let penalty_hat = batch
        .iter()
        .map(|t| {
            discounted_sum(
                t.transitions.iter().map(|tr| env.constraint_penalty(&tr.state, &tr.action)),
                gamma,
            )
        })
        .sum::<f64>()
        / e;

    let samples = CriticSamples::from_batch(&batch, policy, theta, features, gamma, cfg.sigma)?;
    let curvature = cfg.method == Method::QuasiNewton;
    let fit = fit_critic(&samples, &cfg.lstd, curvature)?;
    let grad = estimate_grad(&samples, &fit.params.g)?;
    let n = theta.len();

    let (next, direction, hess, mu) = match cfg.method {
        Method::QuasiNewton => {
            let w = &fit.params.w * fit.mode.hessian_scale();
            let hess = estimate_hess(&samples, &w)?;
            let step = qn_update(theta, &grad, &hess, cfg.alpha, cfg.mu_min, iteration)?;
            (step.theta, step.direction, hess, step.mu)
        }
        Method::FirstOrder => {
            let next = fo_update(theta, &grad, cfg.alpha);
            if !next.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged {
                    iteration,
                    reason: "non-finite parameters after a first-order step".into(),
                });
            }
            (next, grad.clone(), Mat::zeros(n, n), 0.0)
        }
    };
    Ok(Iterate {
        theta: next,
        grad_norm: grad.norm(),
        j_hat,
        penalty_hat,
        critic: fit.diagnostics,
        step: ActorStep {
            iteration,
            grad,
            hess,
            direction,
            method: cfg.method,
            mu,
        },
        batch,
    })
}

fn evaluate(
    env: &dyn Environment,
    policy: &dyn DiffPolicy,
    theta: &Vector,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<f64> {
    let batch = rollout_batch(
        env,
        policy,
        theta,
        cfg.eval_episodes,
        cfg.horizon,
        0.0,
        cfg.seed,
        EVAL_BATCH_OFFSET + iteration as u64,
    )?;
    let gamma = env.discount();
    Ok(batch.iter().map(|t| t.discounted_cost(gamma)).sum::<f64>() / batch.len() as f64)
}

/// Runs the actor-critic loop from `theta0`. Rollout and update failures end
/// the run with [`RunStatus::Failed`] and keep the records so far; invalid
/// configurations and dimension mismatches are returned as errors.
pub fn train(
    env: &dyn Environment,
    policy: &dyn DiffPolicy,
    features: &dyn FeatureMap,
    theta0: &Vector,
    cfg: &TrainConfig,
    theta_star: Option<&Vector>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if theta0.len() != policy.param_dim() {
        return Err(Error::contract(format!(
            "initial parameters have length {}, policy expects {}",
            theta0.len(),
            policy.param_dim()
        )));
    }
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        return Err(Error::contract("policy and environment dimensions differ"));
    }
    if let Some(ts) = theta_star {
        if ts.len() != theta0.len() {
            return Err(Error::contract("reference optimum has the wrong dimension"));
        }
    }

    let mut theta = theta0.clone();
    let mut history = vec![theta.clone()];
    let mut records = Vec::with_capacity(cfg.max_iters);
    let mut status = RunStatus::BudgetExhausted;
    let mut first_batch = None;
    let mut last_batch = None;
    let mut last_step = None;

    for iteration in 1..=cfg.max_iters {
        let started = Instant::now();
        let j_eval = if cfg.eval_episodes > 0 {
            match evaluate(env, policy, &theta, cfg, iteration) {
                Ok(j) => Some(j),
                Err(e) => {
                    warn!("{} seed {}: evaluation failed at iteration {iteration}: {e}", cfg.method, cfg.seed);
                    status = RunStatus::Failed {
                        iteration,
                        reason: e.to_string(),
                    };
                    break;
                }
            }
        } else {
            None
        };
        let it = match one_iteration(env, policy, features, &theta, cfg, iteration) {
            Ok(it) => it,
            Err(e @ (Error::Contract(_) | Error::Capacity(_) | Error::Config { .. })) => return Err(e),
            Err(e) => {
                warn!("{} seed {}: run failed at iteration {iteration}: {e}", cfg.method, cfg.seed);
                status = RunStatus::Failed {
                    iteration,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let step_norm = (&it.theta - &theta).norm();
        let dist_to_opt = theta_star.map(|ts| (&it.theta - ts).norm());
        debug!(
            "{} seed {} iter {iteration}: J_hat {:.6e} |grad| {:.3e} step {:.3e} mu {:e}",
            cfg.method, cfg.seed, it.j_hat, it.grad_norm, step_norm, it.step.mu
        );
        records.push(RunRecord {
            iteration,
            theta: it.theta.clone(),
            grad_norm: it.grad_norm,
            j_hat: it.j_hat,
            penalty_hat: it.penalty_hat,
            j_eval,
            dist_to_opt,
            step_norm,
            critic: it.critic,
            mu: it.step.mu,
            method: cfg.method,
            wall_time: started.elapsed(),
        });
        if cfg.keep_batches {
            if iteration == 1 {
                first_batch = Some(it.batch.clone());
            }
            last_batch = Some(it.batch);
        }
        last_step = Some(it.step);
        theta = it.theta;
        history.push(theta.clone());
        if history.len() >= 4 && check_converged(&history, cfg.tol_theta) {
            status = RunStatus::Converged { iteration };
            break;
        }
    }
    info!("{} seed {}: {:?} after {} iterations", cfg.method, cfg.seed, status, records.len());
    Ok(TrainOutcome {
        records,
        status,
        initial_theta: theta0.clone(),
        final_theta: theta,
        first_batch,
        last_batch,
        last_step,
    })
}
