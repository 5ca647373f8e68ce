//! Three-stage batch LSTD estimation of the critic `(v, g, W)`.
//!
//! Every regression accumulates `γ^{k-1}`-weighted normal equations per
//! episode, sums the per-episode partials in episode-index order and divides
//! by the episode count before solving.

use rayon::prelude::*;

use crate::critic::{td_error, CriticParams, FeatureMap};
use crate::error::{Error, Result};
use crate::linalg::{
    ensure_finite_mat, project_psd, project_psd_counted, solve_detailed, symmetrize, unvec,
    vec_mat, Mat, Vector, PINV_RCOND,
};
use crate::mdp::{DiffPolicy, Trajectory};

/// One transition reduced to what the regressions consume.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSample {
    /// `γ^{k-1}`.
    pub weight: f64,
    pub phi: Vector,
    pub phi_next: Vector,
    pub cost: f64,
    /// `ψ = ∇θπ(s)(a − π(s))`.
    pub psi: Vector,
    /// `∇θπ(s)`, `n_θ × n_a`.
    pub jac: Mat,
}

/// Regression inputs for a batch, grouped by episode in index order.
#[derive(Debug, Clone)]
pub struct CriticSamples {
    pub episodes: Vec<Vec<CriticSample>>,
    pub gamma: f64,
    /// Exploration scale the actions were drawn with.
    pub sigma: f64,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl CriticSamples {
    pub fn new(episodes: Vec<Vec<CriticSample>>, gamma: f64, sigma: f64) -> Result<Self> {
        let first = episodes
            .iter()
            .find_map(|e| e.first())
            .ok_or_else(|| Error::Input("LSTD needs a non-empty batch".into()))?;
        let (n_theta, n_phi) = (first.psi.len(), first.phi.len());
        for s in episodes.iter().flatten() {
            if s.psi.len() != n_theta
                || s.jac.nrows() != n_theta
                || s.phi.len() != n_phi
                || s.phi_next.len() != n_phi
            {
                return Err(Error::contract("inconsistent sample dimensions in batch"));
            }
        }
        Ok(CriticSamples {
            episodes,
            gamma,
            sigma,
            n_theta,
            n_phi,
        })
    }

    /// Evaluates features, jacobians and `ψ` for every transition. Episodes
    /// are ordered by their index, so any permutation of `batch` yields the
    /// same samples.
    pub fn from_batch(
        batch: &[Trajectory],
        policy: &dyn DiffPolicy,
        theta: &Vector,
        features: &dyn FeatureMap,
        gamma: f64,
        sigma: f64,
    ) -> Result<Self> {
        let mut ordered: Vec<&Trajectory> = batch.iter().collect();
        ordered.sort_by_key(|t| t.episode);
        let episodes = ordered
            .par_iter()
            .map(|traj| {
                traj.transitions
                    .iter()
                    .map(|t| {
                        let jac = policy.jacobian(theta, &t.state)?;
                        let pi = policy.act(theta, &t.state)?;
                        Ok(CriticSample {
                            weight: gamma.powi(t.k as i32 - 1),
                            phi: features.features(&t.state),
                            phi_next: features.features(&t.next_state),
                            cost: t.cost,
                            psi: &jac * (&t.action - pi),
                            jac,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        CriticSamples::new(episodes, gamma, sigma)
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn sample_count(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }
}

/// How the curvature regression is set up and solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurvatureMode {
    /// Regress on `vec(ψψᵀ)`, solve by pseudoinverse, symmetrise and project
    /// onto the PSD cone. The returned `W` is used as the action curvature
    /// without rescaling.
    Projected,
    /// Regress on the centred features `vec(ψψᵀ − σ² ∇θπ ∇θπᵀ)` and solve the
    /// least-squares problem over the PSD cone directly (accelerated
    /// projected gradient, warm-started from the projected solution). The
    /// advantage `ψᵀWψ` then has action-Hessian `2 ∇θπᵀ W ∇θπ`.
    ///
    /// The baseline absorbs the mean of `ψᵀWψ` over the exploration noise,
    /// so the TD residual is centred per state; centring the regressors to
    /// match removes the resulting bias in `W`.
    #[default]
    Centered,
}

impl CurvatureMode {
    /// Factor turning the fitted `W` into the action-curvature surrogate fed
    /// to the Hessian estimator.
    pub fn hessian_scale(self) -> f64 {
        match self {
            CurvatureMode::Projected => 1.0,
            CurvatureMode::Centered => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurvatureMode::Projected => "projected",
            CurvatureMode::Centered => "centered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstdOptions {
    /// Ridge added to every system matrix; 0 disables it.
    pub ridge: f64,
    /// Largest `n_θ` for which the `n_θ² × n_θ²` curvature system is built.
    pub max_param_dim: usize,
    pub rcond: f64,
    pub curvature: CurvatureMode,
}

impl Default for LstdOptions {
    fn default() -> Self {
        LstdOptions {
            ridge: 0.0,
            max_param_dim: 40,
            rcond: PINV_RCOND,
            curvature: CurvatureMode::default(),
        }
    }
}

/// Averaged normal equations `A x = b` of one regression.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub a: Mat,
    pub b: Vector,
}

/// Accumulated systems of all three regressions. The curvature system is
/// absent when that stage was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct LstdAccumulators {
    pub baseline: NormalEquations,
    pub gradient: NormalEquations,
    pub curvature: Option<NormalEquations>,
    pub episodes: usize,
}

/// Sums `w · target · u` and `w · u xᵀ` over all samples, per episode in
/// parallel, then over episodes in index order, and divides by the episode
/// count.
fn accumulate<F>(samples: &CriticSamples, dim: usize, row: F) -> NormalEquations
where
    F: Fn(usize, usize, &CriticSample) -> (Vector, Vector, f64) + Sync,
{
    let partials: Vec<(Mat, Vector)> = samples
        .episodes
        .par_iter()
        .enumerate()
        .map(|(e, episode)| {
            let mut a = Mat::zeros(dim, dim);
            let mut b = Vector::zeros(dim);
            for (k, sample) in episode.iter().enumerate() {
                let (u, x, target) = row(e, k, sample);
                a.ger(sample.weight, &u, &x, 1.0);
                b.axpy(sample.weight * target, &u, 1.0);
            }
            (a, b)
        })
        .collect();
    let mut a = Mat::zeros(dim, dim);
    let mut b = Vector::zeros(dim);
    for (pa, pb) in partials {
        a += pa;
        b += pb;
    }
    let inv_e = 1.0 / samples.episode_count() as f64;
    NormalEquations {
        a: a * inv_e,
        b: b * inv_e,
    }
}

fn solve(system: &NormalEquations, opts: &LstdOptions, what: &str) -> Result<(Vector, f64)> {
    ensure_finite_mat(&system.a, what)?;
    let mut a = system.a.clone();
    if opts.ridge > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += opts.ridge;
        }
    }
    let sol = solve_detailed(&a, &system.b, opts.rcond)?;
    Ok((sol.x, sol.effective_condition))
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub v: Vector,
    pub system: NormalEquations,
    pub condition: f64,
}

/// Solves `Σ γ^{k-1} φ(s)(φ(s) − γφ(s'))ᵀ v = Σ γ^{k-1} ℓ φ(s)`.
pub fn fit_baseline(samples: &CriticSamples, opts: &LstdOptions) -> Result<BaselineFit> {
    let gamma = samples.gamma;
    let system = accumulate(samples, samples.n_phi, |_, _, s| {
        (s.phi.clone(), &s.phi - &s.phi_next * gamma, s.cost)
    });
    let (v, condition) = solve(&system, opts, "baseline system")?;
    Ok(BaselineFit { v, system, condition })
}

/// TD errors `δ_k` of every sample under baseline weights `v`, by episode.
pub fn td_errors(samples: &CriticSamples, v: &Vector) -> Result<Vec<Vec<f64>>> {
    samples
        .episodes
        .iter()
        .map(|ep| {
            ep.iter()
                .map(|s| td_error(s.cost, &s.phi, &s.phi_next, v, samples.gamma))
                .collect()
        })
        .collect()
}

fn check_deltas(samples: &CriticSamples, deltas: &[Vec<f64>]) -> Result<()> {
    let matches = deltas.len() == samples.episodes.len()
        && deltas.iter().zip(&samples.episodes).all(|(d, e)| d.len() == e.len());
    if matches {
        Ok(())
    } else {
        Err(Error::contract("TD errors do not line up with the batch"))
    }
}

#[derive(Debug, Clone)]
pub struct GradientFit {
    pub g: Vector,
    pub system: NormalEquations,
    pub condition: f64,
}

/// Solves `Σ γ^{k-1} ψψᵀ g = Σ γ^{k-1} δ ψ`.
pub fn fit_gradient(samples: &CriticSamples, deltas: &[Vec<f64>], opts: &LstdOptions) -> Result<GradientFit> {
    check_deltas(samples, deltas)?;
    let system = accumulate(samples, samples.n_theta, |e, k, s| (s.psi.clone(), s.psi.clone(), deltas[e][k]));
    let (g, condition) = solve(&system, opts, "gradient system")?;
    Ok(GradientFit { g, system, condition })
}

#[derive(Debug, Clone)]
pub struct CurvatureFit {
    /// Fitted PSD curvature matrix.
    pub w: Mat,
    /// Symmetrised unconstrained least-squares solution before projection.
    pub w_unconstrained: Mat,
    pub system: NormalEquations,
    pub condition: f64,
    /// Negative eigenvalues clamped when projecting `w_unconstrained`.
    pub clamped: usize,
}

fn curvature_regressor(s: &CriticSample, sigma: f64, mode: CurvatureMode) -> Vector {
    let mut outer = &s.psi * s.psi.transpose();
    if mode == CurvatureMode::Centered && sigma > 0.0 {
        outer -= (&s.jac * s.jac.transpose()) * (sigma * sigma);
    }
    vec_mat(&outer)
}

/// Fits `W` from `Σ γ^{k-1} ψ̂ψ̂ᵀ vec(W) = Σ γ^{k-1} (δ − ψᵀg) ψ̂`; see
/// [`CurvatureMode`] for the regressor `ψ̂` and the solve.
pub fn fit_curvature(
    samples: &CriticSamples,
    deltas: &[Vec<f64>],
    g: &Vector,
    opts: &LstdOptions,
) -> Result<CurvatureFit> {
    check_deltas(samples, deltas)?;
    let n = samples.n_theta;
    if n > opts.max_param_dim {
        return Err(Error::Capacity(format!(
            "curvature regression with {n} policy parameters needs a {0}x{0} system; \
             the cap is {1} parameters, use a smaller policy class or raise the cap",
            n * n,
            opts.max_param_dim
        )));
    }
    if g.len() != n {
        return Err(Error::contract(format!("g has length {}, expected {n}", g.len())));
    }
    let (sigma, mode) = (samples.sigma, opts.curvature);
    let system = accumulate(samples, n * n, |e, k, s| {
        let x = curvature_regressor(s, sigma, mode);
        (x.clone(), x, deltas[e][k] - s.psi.dot(g))
    });
    let (w_vec, condition) = solve(&system, opts, "curvature system")?;
    let w_unconstrained = symmetrize(&unvec(&w_vec, n, n)?);
    let (projected, clamped) = project_psd_counted(&w_unconstrained)?;
    let w = match mode {
        CurvatureMode::Projected => projected,
        CurvatureMode::Centered => psd_least_squares(&system, opts.ridge, n, projected)?,
    };
    Ok(CurvatureFit {
        w,
        w_unconstrained,
        system,
        condition,
        clamped,
    })
}

/// Minimises `½ vec(W)ᵀ A vec(W) − bᵀ vec(W)` over symmetric PSD `W` by
/// FISTA with step `1/‖A‖₂`.
fn psd_least_squares(system: &NormalEquations, ridge: f64, n: usize, start: Mat) -> Result<Mat> {
    let mut a = system.a.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let lipschitz = a.clone().singular_values().max();
    if !(lipschitz > 0.0) {
        return Ok(start);
    }
    let grad = |y: &Mat| -> Result<Mat> {
        let r = &a * vec_mat(y) - &system.b;
        Ok(symmetrize(&unvec(&r, n, n)?))
    };
    let mut x = start;
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let x_next = project_psd(&(&y - grad(&y)? / lipschitz))?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let change = (&x_next - &x).norm();
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        x = x_next;
        t = t_next;
        if change <= 1e-13 * (1.0 + x.norm()) {
            break;
        }
    }
    Ok(x)
}

/// Conditioning and projection diagnostics of one critic fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticDiagnostics {
    pub cond_av: f64,
    pub cond_ag: f64,
    /// Effective condition of the curvature system on the subspace the
    /// pseudoinverse keeps; `None` when the stage was skipped.
    pub cond_aw: Option<f64>,
    pub clamped_eigs: usize,
    pub curvature_fitted: bool,
    pub g_norm: f64,
    pub w_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CriticFit {
    pub params: CriticParams,
    pub diagnostics: CriticDiagnostics,
    pub accumulators: LstdAccumulators,
    pub mode: CurvatureMode,
}

/// Runs the baseline, gradient and (optionally) curvature regressions in
/// order. Without curvature, `W` is zero and no projection happens.
pub fn fit_critic(samples: &CriticSamples, opts: &LstdOptions, with_curvature: bool) -> Result<CriticFit> {
    let baseline = fit_baseline(samples, opts)?;
    let deltas = td_errors(samples, &baseline.v)?;
    let gradient = fit_gradient(samples, &deltas, opts)?;
    let n = samples.n_theta;
    let (w, cond_aw, clamped, curvature_system) = if with_curvature {
        let c = fit_curvature(samples, &deltas, &gradient.g, opts)?;
        (c.w, Some(c.condition), c.clamped, Some(c.system))
    } else {
        (Mat::zeros(n, n), None, 0, None)
    };
    let diagnostics = CriticDiagnostics {
        cond_av: baseline.condition,
        cond_ag: gradient.condition,
        cond_aw,
        clamped_eigs: clamped,
        curvature_fitted: with_curvature,
        g_norm: gradient.g.norm(),
        w_norm: w.norm(),
    };
    Ok(CriticFit {
        params: CriticParams {
            v: baseline.v,
            g: gradient.g,
            w,
        },
        diagnostics,
        accumulators: LstdAccumulators {
            baseline: baseline.system,
            gradient: gradient.system,
            curvature: curvature_system,
            episodes: samples.episode_count(),
        },
        mode: opts.curvature,
    })
}
