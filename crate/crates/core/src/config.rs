//! Experiment configuration files.
//!
//! A config is a TOML document: top-level keys for the run, plus an optional
//! `[lqr]` or `[cartpend]` table overriding environment parameters.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::actor::Method;
use crate::critic::QuadraticFeatures;
use crate::envs::{CartPendEnv, CartPendParams, LqrEnv};
use crate::error::{Error, Result};
use crate::linalg::{vec_mat, Mat, Vector};
use crate::lstd::{CurvatureMode, LstdOptions};
use crate::mdp::Environment;
use crate::oracle::lqr_optimum;
use crate::policies::{gain_from_rows, LinearPolicy};
use crate::trainer::TrainConfig;

/// Overrides relative `output_dir` values when set.
pub const OUTPUT_ROOT_ENV: &str = "QNAC_OUTPUT_ROOT";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    env: String,
    method: Option<String>,
    episodes: Option<usize>,
    horizon: Option<usize>,
    max_iters: Option<usize>,
    gamma: Option<f64>,
    sigma: Option<f64>,
    alpha_qn: Option<f64>,
    alpha_fo: Option<f64>,
    tol_theta: Option<f64>,
    mu_min: Option<f64>,
    seeds: Option<Vec<u64>>,
    output_dir: Option<String>,
    plot: Option<bool>,
    initial_gain: Option<Vec<Vec<f64>>>,
    curvature: Option<String>,
    ridge: Option<f64>,
    max_param_dim: Option<usize>,
    eval_episodes: Option<usize>,
    dump_trajectories: Option<bool>,
    lqr: Option<RawLqr>,
    cartpend: Option<RawCartPend>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLqr {
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<Vec<f64>>>,
    q: Option<Vec<Vec<f64>>>,
    r: Option<Vec<Vec<f64>>>,
    noise_cov: Option<Vec<Vec<f64>>>,
    init_mean: Option<Vec<f64>>,
    init_cov: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCartPend {
    cart_mass: Option<f64>,
    pole_mass: Option<f64>,
    length: Option<f64>,
    gravity: Option<f64>,
    dt: Option<f64>,
    penalty_weight: Option<f64>,
    action_weight: Option<f64>,
    noise_var: Option<[f64; 4]>,
    init_state: Option<[f64; 4]>,
    init_var: Option<[f64; 4]>,
}

/// The environment an experiment runs on.
#[derive(Debug, Clone)]
pub enum EnvConfig {
    Lqr(LqrEnv),
    CartPend(CartPendEnv),
}

impl EnvConfig {
    pub fn as_env(&self) -> &dyn Environment {
        match self {
            EnvConfig::Lqr(e) => e,
            EnvConfig::CartPend(e) => e,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Lqr(_) => "lqr",
            EnvConfig::CartPend(_) => "cartpend",
        }
    }
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub methods: Vec<Method>,
    /// Initial gain `K₀`, `n_a × n_s`.
    pub initial_gain: Mat,
    pub episodes: usize,
    pub horizon: usize,
    pub max_iters: usize,
    pub sigma: f64,
    pub alpha_qn: f64,
    pub alpha_fo: f64,
    pub tol_theta: f64,
    pub mu_min: f64,
    pub seeds: Vec<u64>,
    /// Output directory as written in the file.
    pub output_dir: PathBuf,
    pub plot: bool,
    pub lstd: LstdOptions,
    pub eval_episodes: usize,
    pub dump_trajectories: bool,
}

fn matrix(field: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Mat> {
    let m = gain_from_rows(rows).map_err(|_| Error::config(field, "rows must be non-empty and of equal length"))?;
    if m.shape() != shape {
        return Err(Error::config(
            field,
            format!("is {}x{}, expected {}x{}", m.nrows(), m.ncols(), shape.0, shape.1),
        ));
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::config(field, "entries must be finite"));
    }
    Ok(m)
}

fn positive(field: &str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::config(field, format!("must be positive, got {value}")))
    }
}

fn lqr_from_raw(raw: RawLqr, gamma: Option<f64>) -> Result<LqrEnv> {
    let base = LqrEnv::benchmark();
    let a = match &raw.a {
        Some(rows) => {
            let n = rows.len();
            matrix("lqr.a", rows, (n, n))?
        }
        None => base.a.clone(),
    };
    let n = a.nrows();
    let b = match &raw.b {
        Some(rows) => {
            let m = rows.first().map_or(0, Vec::len);
            matrix("lqr.b", rows, (n, m))?
        }
        None if n == base.a.nrows() => base.b.clone(),
        None => return Err(Error::config("lqr.b", "required when lqr.a is overridden with a new size")),
    };
    let m = b.ncols();
    let pick = |field: &str, rows: &Option<Vec<Vec<f64>>>, shape, fallback: &Mat, default: Mat| -> Result<Mat> {
        match rows {
            Some(r) => matrix(field, r, shape),
            None if fallback.shape() == shape => Ok(fallback.clone()),
            None => Ok(default),
        }
    };
    let q = pick("lqr.q", &raw.q, (n, n), &base.q, Mat::identity(n, n))?;
    let r = pick("lqr.r", &raw.r, (m, m), &base.r, Mat::identity(m, m))?;
    let noise_cov = pick("lqr.noise_cov", &raw.noise_cov, (n, n), &base.noise_cov, Mat::zeros(n, n))?;
    let init_cov = pick("lqr.init_cov", &raw.init_cov, (n, n), &base.init_cov, Mat::zeros(n, n))?;
    let init_mean = match raw.init_mean {
        Some(v) if v.len() == n => Vector::from_vec(v),
        Some(v) => return Err(Error::config("lqr.init_mean", format!("has length {}, expected {n}", v.len()))),
        None if base.init_mean.len() == n => base.init_mean.clone(),
        None => Vector::zeros(n),
    };
    for (field, cov) in [("lqr.q", &q), ("lqr.noise_cov", &noise_cov), ("lqr.init_cov", &init_cov)] {
        let sym = crate::linalg::symmetrize(cov);
        if (cov - &sym).amax() > 1e-12 || crate::linalg::min_sym_eigenvalue(cov)? < -1e-12 {
            return Err(Error::config(field, "must be symmetric positive semidefinite"));
        }
    }
    if (&r - crate::linalg::symmetrize(&r)).amax() > 1e-12 || crate::linalg::min_sym_eigenvalue(&r)? <= 0.0 {
        return Err(Error::config("lqr.r", "must be symmetric positive definite"));
    }
    LqrEnv::new(a, b, q, r, gamma.unwrap_or(base.gamma), noise_cov, init_mean, init_cov)
        .map_err(|e| Error::config("lqr", e.to_string()))
}

fn cartpend_from_raw(raw: RawCartPend, gamma: Option<f64>) -> Result<CartPendEnv> {
    let d = CartPendParams::default();
    let params = CartPendParams {
        cart_mass: positive("cartpend.cart_mass", raw.cart_mass.unwrap_or(d.cart_mass))?,
        pole_mass: positive("cartpend.pole_mass", raw.pole_mass.unwrap_or(d.pole_mass))?,
        length: positive("cartpend.length", raw.length.unwrap_or(d.length))?,
        gravity: raw.gravity.unwrap_or(d.gravity),
        dt: positive("cartpend.dt", raw.dt.unwrap_or(d.dt))?,
        gamma: gamma.unwrap_or(d.gamma),
        penalty_weight: raw.penalty_weight.unwrap_or(d.penalty_weight),
        action_weight: raw.action_weight.unwrap_or(d.action_weight),
        noise_var: raw.noise_var.unwrap_or(d.noise_var),
        init_state: raw.init_state.unwrap_or(d.init_state),
        init_var: raw.init_var.unwrap_or(d.init_var),
    };
    for (field, vars) in [("cartpend.noise_var", params.noise_var), ("cartpend.init_var", params.init_var)] {
        if vars.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config(field, "variances must be finite and ≥ 0"));
        }
    }
    if !(params.penalty_weight >= 0.0 && params.action_weight >= 0.0) {
        return Err(Error::config("cartpend", "cost weights must be ≥ 0"));
    }
    CartPendEnv::new(params).map_err(|e| Error::config("cartpend", e.to_string()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Input(format!("cannot parse config: {e}")))?;

        if let Some(g) = raw.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config("gamma", format!("must lie in the range (0, 1], got {g}")));
            }
        }
        let env = match raw.env.as_str() {
            "lqr" => {
                if raw.cartpend.is_some() {
                    return Err(Error::config("cartpend", "table given but env is lqr"));
                }
                EnvConfig::Lqr(lqr_from_raw(raw.lqr.unwrap_or_default(), raw.gamma)?)
            }
            "cartpend" => {
                if raw.lqr.is_some() {
                    return Err(Error::config("lqr", "table given but env is cartpend"));
                }
                EnvConfig::CartPend(cartpend_from_raw(raw.cartpend.unwrap_or_default(), raw.gamma)?)
            }
            other => return Err(Error::config("env", format!("unknown environment `{other}`, expected lqr or cartpend"))),
        };
        let (n_s, n_a) = (env.as_env().state_dim(), env.as_env().action_dim());

        let methods = match raw.method.as_deref().unwrap_or("both") {
            "both" => vec![Method::QuasiNewton, Method::FirstOrder],
            other => vec![other.parse::<Method>().map_err(|e| Error::config("method", format!("{e} or both")))?],
        };
        let initial_gain = match &raw.initial_gain {
            Some(rows) => matrix("initial_gain", rows, (n_a, n_s))?,
            None => Mat::zeros(n_a, n_s),
        };
        let curvature = match raw.curvature.as_deref().unwrap_or("centered") {
            "centered" => CurvatureMode::Centered,
            "projected" => CurvatureMode::Projected,
            other => {
                return Err(Error::config(
                    "curvature",
                    format!("unknown mode `{other}`, expected centered or projected"),
                ))
            }
        };
        let seeds = raw.seeds.unwrap_or_else(|| vec![1, 2, 3]);
        if seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return Err(Error::config("seeds", "must not repeat a seed"));
        }

        let count = |field: &str, v: Option<usize>, default: usize| -> Result<usize> {
            let v = v.unwrap_or(default);
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(v)
            }
        };
        let sigma = raw.sigma.unwrap_or(0.1);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("sigma", format!("must be finite and ≥ 0, got {sigma}")));
        }
        let ridge = raw.ridge.unwrap_or(0.0);
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::config("ridge", format!("must be finite and ≥ 0, got {ridge}")));
        }
        let max_param_dim = count("max_param_dim", raw.max_param_dim, 40)?;
        if methods.contains(&Method::QuasiNewton) && n_s * n_a > max_param_dim {
            return Err(Error::config(
                "max_param_dim",
                format!("policy has {} parameters, above the curvature cap {max_param_dim}", n_s * n_a),
            ));
        }

        Ok(ExperimentConfig {
            env,
            methods,
            initial_gain,
            episodes: count("episodes", raw.episodes, 500)?,
            horizon: count("horizon", raw.horizon, 50)?,
            max_iters: raw.max_iters.unwrap_or(60),
            sigma,
            alpha_qn: positive("alpha_qn", raw.alpha_qn.unwrap_or(1.0))?,
            alpha_fo: positive("alpha_fo", raw.alpha_fo.unwrap_or(1e-3))?,
            tol_theta: positive("tol_theta", raw.tol_theta.unwrap_or(1e-6))?,
            mu_min: positive("mu_min", raw.mu_min.unwrap_or(1e-8))?,
            seeds,
            output_dir: PathBuf::from(raw.output_dir.unwrap_or_else(|| "out".into())),
            plot: raw.plot.unwrap_or(true),
            lstd: LstdOptions {
                ridge,
                max_param_dim,
                curvature,
                ..LstdOptions::default()
            },
            eval_episodes: raw.eval_episodes.unwrap_or(0),
            dump_trajectories: raw.dump_trajectories.unwrap_or(false),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::parse(&text).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `output_dir`, placed under `$QNAC_OUTPUT_ROOT` when that is set and the
    /// path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn policy(&self) -> LinearPolicy {
        let env = self.env.as_env();
        LinearPolicy::new(env.state_dim(), env.action_dim())
    }

    pub fn features(&self) -> QuadraticFeatures {
        QuadraticFeatures::new(self.env.as_env().state_dim())
    }

    pub fn theta0(&self) -> Vector {
        vec_mat(&self.initial_gain)
    }

    /// `vec(K⋆)` for LQR tasks whose Riccati optimum exists.
    pub fn theta_star(&self) -> Option<Vector> {
        match &self.env {
            EnvConfig::Lqr(env) => lqr_optimum(env)
                .ok()
                .filter(|s| s.closed_loop_radius < 1.0)
                .map(|s| vec_mat(&s.k_star)),
            EnvConfig::CartPend(_) => None,
        }
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            episodes: self.episodes,
            horizon: self.horizon,
            max_iters: self.max_iters,
            sigma: self.sigma,
            alpha: match method {
                Method::QuasiNewton => self.alpha_qn,
                Method::FirstOrder => self.alpha_fo,
            },
            mu_min: self.mu_min,
            tol_theta: self.tol_theta,
            seed,
            lstd: self.lstd,
            eval_episodes: self.eval_episodes,
            keep_batches: self.plot || self.dump_trajectories,
        }
    }

    /// Human-readable summary of the validated settings.
    pub fn echo(&self) -> String {
        let env = self.env.as_env();
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let gain_rows: Vec<String> = self
            .initial_gain
            .row_iter()
            .map(|r| format!("[{}]", r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")))
            .collect();
        format!(
            "env = {} (n_s = {}, n_a = {}, gamma = {})\n\
             methods = {}\n\
             seeds = {:?}\n\
             episodes = {}, horizon = {}, max_iters = {}\n\
             sigma = {}, alpha_qn = {}, alpha_fo = {}, tol_theta = {}, mu_min = {}\n\
             curvature = {}, ridge = {}, max_param_dim = {}\n\
             initial_gain = [{}]\n\
             output_dir = {}\n\
             plot = {}, eval_episodes = {}, dump_trajectories = {}",
            self.env.name(),
            env.state_dim(),
            env.action_dim(),
            env.discount(),
            methods.join(", "),
            self.seeds,
            self.episodes,
            self.horizon,
            self.max_iters,
            self.sigma,
            self.alpha_qn,
            self.alpha_fo,
            self.tol_theta,
            self.mu_min,
            self.lstd.curvature.name(),
            self.lstd.ridge,
            self.lstd.max_param_dim,
            gain_rows.join(", "),
            self.resolved_output_dir().display(),
            self.plot,
            self.eval_episodes,
            self.dump_trajectories,
        )
    }
}
