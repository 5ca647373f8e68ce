//! Environment and policy abstractions, trajectories, and the exploratory
//! rollout engine.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// A discounted MDP with explicit noise sources.
///
/// `step` and `initial_state` draw all randomness from the supplied generator,
/// so an environment holds no mutable state and can be shared across threads.
pub trait Environment: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn discount(&self) -> f64;
    fn stage_cost(&self, state: &Vector, action: &Vector) -> f64;
    fn step(&self, state: &Vector, action: &Vector, rng: &mut dyn RngCore) -> Vector;
    fn initial_state(&self, rng: &mut dyn RngCore) -> Vector;

    /// Soft-constraint part of the stage cost, reported separately in run logs.
    fn constraint_penalty(&self, _state: &Vector, _action: &Vector) -> f64 {
        0.0
    }
}

/// A deterministic policy differentiable in its parameters.
pub trait DiffPolicy: Sync {
    fn param_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, theta: &Vector, state: &Vector) -> Result<Vector>;
    /// `∇_θ π_θ(s)`, shaped `param_dim × action_dim`.
    fn jacobian(&self, theta: &Vector, state: &Vector) -> Result<Mat>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vector,
    pub action: Vector,
    pub cost: f64,
    pub next_state: Vector,
    /// 1-based time index.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: usize,
    /// Identifier of the generator stream the episode consumed.
    pub stream: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        discounted_sum(self.transitions.iter().map(|t| t.cost), gamma)
    }
}

/// `Σ_k γ^{k-1} values_k` with `k` starting at 1.
pub fn discounted_sum(values: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for v in values {
        total += weight * v;
        weight *= gamma;
    }
    total
}

/// Generator for one episode of one batch, independent of execution order.
pub fn episode_rng(seed: u64, batch: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(batch)));
    rng.set_stream(episode as u64);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal_vector(rng: &mut dyn RngCore, dim: usize) -> Vector {
    Vector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

fn check_dims(env: &dyn Environment, policy: &dyn DiffPolicy, theta: &Vector) -> Result<()> {
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        return Err(Error::contract(format!(
            "policy maps {}-d states to {}-d actions, environment has {}-d states and {}-d actions",
            policy.state_dim(),
            policy.action_dim(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    if theta.len() != policy.param_dim() {
        return Err(Error::contract(format!(
            "θ has length {}, policy expects {}",
            theta.len(),
            policy.param_dim()
        )));
    }
    Ok(())
}

/// Runs one episode of `horizon` steps with actions `π_θ(s) + σ ε`,
/// `ε ~ N(0, I)`.
pub fn rollout(
    env: &dyn Environment,
    policy: &dyn DiffPolicy,
    theta: &Vector,
    horizon: usize,
    sigma: f64,
    rng: &mut dyn RngCore,
    episode: usize,
) -> Result<Trajectory> {
    check_dims(env, policy, theta)?;
    if horizon == 0 {
        return Err(Error::Input("horizon must be at least 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("exploration scale must be finite and ≥ 0, got {sigma}")));
    }

    let n_a = env.action_dim();
    let mut state = env.initial_state(rng);
    let mut transitions = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let fail = |reason: &str| Error::Rollout {
            episode,
            step: k,
            reason: reason.to_string(),
        };
        if !state.iter().all(|x| x.is_finite()) {
            return Err(fail("non-finite state"));
        }
        let mut action = policy.act(theta, &state)?;
        if sigma > 0.0 {
            action += standard_normal_vector(rng, n_a) * sigma;
        }
        if !action.iter().all(|x| x.is_finite()) {
            return Err(fail("non-finite action"));
        }
        let cost = env.stage_cost(&state, &action);
        let next_state = env.step(&state, &action, rng);
        if !cost.is_finite() || !next_state.iter().all(|x| x.is_finite()) {
            return Err(fail("non-finite cost or successor state"));
        }
        transitions.push(Transition {
            state,
            action,
            cost,
            next_state: next_state.clone(),
            k,
        });
        state = next_state;
    }
    Ok(Trajectory {
        episode,
        stream: episode as u64,
        transitions,
    })
}

/// Rolls out `episodes` independent episodes, possibly in parallel. Episode
/// `e` uses `episode_rng(seed, batch, e)`; the output is ordered by episode
/// and is identical to a sequential run.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch(
    env: &dyn Environment,
    policy: &dyn DiffPolicy,
    theta: &Vector,
    episodes: usize,
    horizon: usize,
    sigma: f64,
    seed: u64,
    batch: u64,
) -> Result<Vec<Trajectory>> {
    let results: Vec<Result<Trajectory>> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = episode_rng(seed, batch, e);
            rollout(env, policy, theta, horizon, sigma, &mut rng, e)
        })
        .collect();
    results.into_iter().collect()
}

/// Writes `episode,k,s0..,a0..,cost,s_next0..` rows with a header.
pub fn write_trajectories_csv<W: Write>(out: W, batch: &[Trajectory]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let Some(first) = batch.iter().find_map(|t| t.transitions.first()) else {
        wtr.write_record(["episode", "k", "cost"])?;
        wtr.flush()?;
        return Ok(());
    };
    let (n_s, n_a) = (first.state.len(), first.action.len());
    let mut header = vec!["episode".to_string(), "k".to_string()];
    header.extend((0..n_s).map(|i| format!("s{i}")));
    header.extend((0..n_a).map(|i| format!("a{i}")));
    header.push("cost".into());
    header.extend((0..n_s).map(|i| format!("s_next{i}")));
    wtr.write_record(&header)?;

    for traj in batch {
        for t in &traj.transitions {
            let mut row = vec![traj.episode.to_string(), t.k.to_string()];
            row.extend(t.state.iter().map(|x| x.to_string()));
            row.extend(t.action.iter().map(|x| x.to_string()));
            row.push(t.cost.to_string());
            row.extend(t.next_state.iter().map(|x| x.to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
