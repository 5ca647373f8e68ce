//! Policy-gradient and approximate-Hessian estimates from a fitted critic,
//! and the quasi-Newton and first-order parameter updates.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{condition_number, solve_detailed, symmetrize, Mat, Vector, PINV_RCOND};
use crate::lstd::CriticSamples;

/// Systems with a condition estimate at or above this are damped.
pub const MAX_CONDITION: f64 = 1e10;

/// The ladder gives up once the damping would exceed this.
const MAX_DAMPING: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    QuasiNewton,
    FirstOrder,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::QuasiNewton => "quasi-newton",
            Method::FirstOrder => "first-order",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quasi-newton" => Ok(Method::QuasiNewton),
            "first-order" => Ok(Method::FirstOrder),
            other => Err(format!("unknown method `{other}`, expected quasi-newton or first-order")),
        }
    }
}

/// Everything the actor computed in one RL iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorStep {
    pub iteration: usize,
    pub grad: Vector,
    /// Zero for first-order steps.
    pub hess: Mat,
    pub direction: Vector,
    pub method: Method,
    /// Damping used in `(H + μI) d = ∇J`; zero for first-order steps.
    pub mu: f64,
}

/// Per-episode sums of `f(sample)`, combined in episode order, divided by `E`.
fn batch_mean<F>(samples: &CriticSamples, zero: Mat, f: F) -> Mat
where
    F: Fn(&crate::lstd::CriticSample) -> Mat + Sync,
{
    let partials: Vec<Mat> = samples
        .episodes
        .par_iter()
        .map(|ep| {
            let mut acc = zero.clone();
            for s in ep {
                acc += f(s) * s.weight;
            }
            acc
        })
        .collect();
    let mut total = zero;
    for p in partials {
        total += p;
    }
    total / samples.episode_count() as f64
}

/// `∇J ≈ (1/E) Σ γ^{k-1} ∇θπ(s) ∇θπ(s)ᵀ g`.
pub fn estimate_grad(samples: &CriticSamples, g: &Vector) -> Result<Vector> {
    let n = samples.n_theta;
    if g.len() != n {
        return Err(Error::contract(format!("g has length {}, expected {n}", g.len())));
    }
    let mean = batch_mean(samples, Mat::zeros(n, 1), |s| {
        let jt_g = s.jac.transpose() * g;
        Mat::from_column_slice(n, 1, (&s.jac * jt_g).as_slice())
    });
    Ok(Vector::from_column_slice(mean.as_slice()))
}

/// `H ≈ (1/E) Σ γ^{k-1} ∇θπ (∇θπᵀ W ∇θπ) ∇θπᵀ`. Symmetric, and PSD when
/// `W` is.
pub fn estimate_hess(samples: &CriticSamples, w: &Mat) -> Result<Mat> {
    let n = samples.n_theta;
    if w.shape() != (n, n) {
        return Err(Error::contract(format!(
            "W is {}x{}, expected {n}x{n}",
            w.nrows(),
            w.ncols()
        )));
    }
    let mean = batch_mean(samples, Mat::zeros(n, n), |s| {
        let inner = s.jac.transpose() * w * &s.jac;
        &s.jac * inner * s.jac.transpose()
    });
    Ok(symmetrize(&mean))
}

/// Result of [`qn_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct QnStep {
    pub theta: Vector,
    pub direction: Vector,
    pub mu: f64,
}

/// `θ − α d` with `(H + μI) d = ∇J`, taking the smallest `μ` in
/// `{0, μ_min, 10 μ_min, …}` whose system has condition below
/// [`MAX_CONDITION`]. A singular `H` whose range contains the gradient is
/// solved at `μ = 0` by pseudoinverse.
pub fn qn_update(
    theta: &Vector,
    grad: &Vector,
    hess: &Mat,
    alpha: f64,
    mu_min: f64,
    iteration: usize,
) -> Result<QnStep> {
    let n = theta.len();
    if grad.len() != n || hess.shape() != (n, n) {
        return Err(Error::contract(format!("gradient and Hessian must match θ dimension {n}")));
    }
    if !(alpha > 0.0) || !(mu_min > 0.0) {
        return Err(Error::Input(format!(
            "step size and minimum damping must be positive, got {alpha} and {mu_min}"
        )));
    }
    let diverged = |reason: String| Error::Diverged { iteration, reason };
    if !grad.iter().chain(hess.iter()).all(|x| x.is_finite()) {
        return Err(diverged("non-finite gradient or Hessian".into()));
    }

    let finish = |direction: Vector, mu: f64| -> Result<QnStep> {
        let next = theta - &direction * alpha;
        if next.iter().all(|x| x.is_finite()) {
            Ok(QnStep {
                theta: next,
                direction,
                mu,
            })
        } else {
            Err(diverged(format!("non-finite parameters after a step with damping {mu:e}")))
        }
    };

    let mut mu = 0.0;
    loop {
        let mut system = hess.clone();
        for i in 0..n {
            system[(i, i)] += mu;
        }
        let sol = solve_detailed(&system, grad, PINV_RCOND)?;
        if condition_number(&system) < MAX_CONDITION {
            return finish(sol.x, mu);
        }
        if mu == 0.0 {
            let residual = (hess * &sol.x - grad).norm();
            if sol.truncated && residual <= 1e-9 * grad.norm().max(f64::MIN_POSITIVE) {
                return finish(sol.x, 0.0);
            }
        }
        mu = if mu == 0.0 { mu_min } else { mu * 10.0 };
        if mu > MAX_DAMPING {
            return Err(diverged("no damping level made the Newton system well conditioned".into()));
        }
    }
}

/// `θ − α ∇J`.
pub fn fo_update(theta: &Vector, grad: &Vector, alpha: f64) -> Vector {
    theta - grad * alpha
}
