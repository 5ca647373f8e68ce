//! Critic features and evaluation: state features `φ(s)`, compatible
//! state-action features `ψ(s,a) = ∇θπ(s)(a − π(s))`, the baseline value,
//! the quadratic advantage `ψᵀWψ + ψᵀg`, the TD error, and compatibility
//! residuals against a known action-value function.

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::mdp::DiffPolicy;

/// Maps a state to a fixed-length feature vector.
pub trait FeatureMap: Sync {
    fn dim(&self) -> usize;
    fn features(&self, state: &Vector) -> Vector;
    fn describe(&self) -> String;
}

/// Full quadratic monomial basis, ordered as
/// `(1, s_1..s_n, s_1²..s_n², s_i s_j for i < j lexicographic)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticFeatures {
    pub n: usize,
}

impl QuadraticFeatures {
    pub fn new(n: usize) -> Self {
        QuadraticFeatures { n }
    }
}

impl FeatureMap for QuadraticFeatures {
    fn dim(&self) -> usize {
        1 + 2 * self.n + self.n * (self.n.saturating_sub(1)) / 2
    }

    fn features(&self, state: &Vector) -> Vector {
        quad_features(state)
    }

    fn describe(&self) -> String {
        format!("quadratic monomials in {} variables (const, linear, squares, cross i<j)", self.n)
    }
}

pub fn quad_features(s: &Vector) -> Vector {
    let n = s.len();
    let mut out = Vec::with_capacity(1 + 2 * n + n * n.saturating_sub(1) / 2);
    out.push(1.0);
    out.extend(s.iter());
    out.extend(s.iter().map(|x| x * x));
    for i in 0..n {
        for j in i + 1..n {
            out.push(s[i] * s[j]);
        }
    }
    Vector::from_vec(out)
}

/// `jacobian · (a − π(s))`.
pub fn psi(jacobian: &Mat, a: &Vector, pi_s: &Vector) -> Result<Vector> {
    if a.len() != pi_s.len() || jacobian.ncols() != a.len() {
        return Err(Error::contract(format!(
            "ψ needs a {}-column jacobian and equal-length actions, got actions of length {} and {}",
            jacobian.ncols(),
            a.len(),
            pi_s.len()
        )));
    }
    Ok(jacobian * (a - pi_s))
}

/// `cost + γ vᵀφ(s') − vᵀφ(s)`.
pub fn td_error(cost: f64, phi_s: &Vector, phi_next: &Vector, v: &Vector, gamma: f64) -> Result<f64> {
    if phi_s.len() != v.len() || phi_next.len() != v.len() {
        return Err(Error::contract(format!(
            "features of length {} and {} do not match baseline weights of length {}",
            phi_s.len(),
            phi_next.len(),
            v.len()
        )));
    }
    Ok(cost + gamma * v.dot(phi_next) - v.dot(phi_s))
}

/// `ψᵀWψ + ψᵀg`.
pub fn advantage(psi: &Vector, g: &Vector, w: &Mat) -> Result<f64> {
    let n = psi.len();
    if g.len() != n || w.shape() != (n, n) {
        return Err(Error::contract(format!(
            "advantage needs g of length {n} and W of shape {n}x{n}, got {} and {}x{}",
            g.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok((psi.transpose() * w * psi)[0] + psi.dot(g))
}

/// Baseline weights `v`, gradient weights `g`, and curvature matrix `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub v: Vector,
    pub g: Vector,
    pub w: Mat,
}

impl CriticParams {
    pub fn value(&self, phi_s: &Vector) -> f64 {
        self.v.dot(phi_s)
    }
}

/// Action derivatives of a known action-value function `Q(s, a)`.
pub trait ActionValueOracle {
    fn grad_a(&self, state: &Vector, action: &Vector) -> Vector;
    fn hess_a(&self, state: &Vector, action: &Vector) -> Mat;
}

/// Mean squared compatibility residuals over a batch of states, evaluated at
/// the on-policy action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompatResiduals {
    /// Mean of `‖∇θπᵀ g − ∇_a Q‖²`.
    pub eps1: f64,
    /// Mean of `‖∇θπᵀ W ∇θπ − ∇²_a Q‖²_F`, with `W` used as is.
    pub eps2: f64,
    /// Same with the quadratic form's exact action-Hessian `2 ∇θπᵀ W ∇θπ`.
    pub eps2_doubled: f64,
}

pub fn compat_residuals(
    policy: &dyn DiffPolicy,
    theta: &Vector,
    states: &[Vector],
    oracle: Option<&dyn ActionValueOracle>,
    g: &Vector,
    w: &Mat,
) -> Result<CompatResiduals> {
    let oracle = oracle.ok_or_else(|| {
        Error::Unsupported("compatibility residuals need a closed-form action-value oracle".into())
    })?;
    if states.is_empty() {
        return Err(Error::Input("compatibility residuals need at least one state".into()));
    }
    let n = policy.param_dim();
    if g.len() != n || w.shape() != (n, n) {
        return Err(Error::contract(format!("critic parameters do not match θ dimension {n}")));
    }
    let mut acc = CompatResiduals {
        eps1: 0.0,
        eps2: 0.0,
        eps2_doubled: 0.0,
    };
    for s in states {
        let jac = policy.jacobian(theta, s)?;
        let a = policy.act(theta, s)?;
        let jt = jac.transpose();
        let grad_q = oracle.grad_a(s, &a);
        let hess_q = oracle.hess_a(s, &a);
        let jwj = &jt * w * &jac;
        acc.eps1 += (&jt * g - grad_q).norm_squared();
        acc.eps2 += (&jwj - &hess_q).norm_squared();
        acc.eps2_doubled += (jwj * 2.0 - hess_q).norm_squared();
    }
    let count = states.len() as f64;
    acc.eps1 /= count;
    acc.eps2 /= count;
    acc.eps2_doubled /= count;
    Ok(acc)
}
