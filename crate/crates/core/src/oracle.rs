//! Ground truth for verification: discounted Riccati and Lyapunov solvers,
//! the closed-form cost of a linear gain on the LQR task, and
//! finite-difference derivatives.

use crate::critic::ActionValueOracle;
use crate::envs::LqrEnv;
use crate::error::{Error, Result};
use crate::linalg::{spectral_radius, symmetrize, unvec, Mat, Vector};

const FIXED_POINT_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 1_000_000;

/// Fixed-point solution of the discounted Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: Mat,
    pub k_star: Mat,
    pub iterations: usize,
}

/// Iterates `P ← Q + γAᵀPA − γ²AᵀPB(R + γBᵀPB)⁻¹BᵀPA` from `P = Q` until
/// successive iterates differ by less than 1e-12 entrywise, and returns the
/// optimal gain `K⋆ = γ(R + γBᵀPB)⁻¹BᵀPA`.
pub fn solve_discounted_riccati(a: &Mat, b: &Mat, q: &Mat, r: &Mat, gamma: f64) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.shape() != (n, n) || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::contract("Riccati matrices have inconsistent shapes"));
    }
    let gain = |p: &Mat| -> Result<Mat> {
        let lhs = r + b.transpose() * p * b * gamma;
        let rhs = b.transpose() * p * a * gamma;
        lhs.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("R + γBᵀPB is singular".into()))
    };
    let mut p = q.clone();
    for it in 1..=MAX_ITERATIONS {
        let k = gain(&p)?;
        // Q + γAᵀPA − γAᵀPB K with K = γ(R + γBᵀPB)⁻¹BᵀPA.
        let next = symmetrize(&(q + a.transpose() * &p * a * gamma - a.transpose() * &p * b * &k * gamma));
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("Riccati iteration overflowed; is (√γA, √γB) stabilisable?".into()));
        }
        let change = (&next - &p).amax();
        p = next;
        if change < FIXED_POINT_TOL {
            let k_star = gain(&p)?;
            return Ok(RiccatiSolution {
                p,
                k_star,
                iterations: it,
            });
        }
    }
    Err(Error::Numeric(format!(
        "Riccati iteration did not converge in {MAX_ITERATIONS} iterations"
    )))
}

/// `‖P − (Q + KᵀRK + γ(A−BK)ᵀP(A−BK))‖_F`.
pub fn bellman_residual(env: &LqrEnv, p: &Mat, k: &Mat) -> f64 {
    let a_cl = &env.a - &env.b * k;
    let rhs = &env.q + k.transpose() * &env.r * k + a_cl.transpose() * p * &a_cl * env.gamma;
    (p - rhs).norm()
}

/// Solution `P` of `P = M + γ A_clᵀ P A_cl` by fixed-point iteration from
/// `start` (zero when `None`). Requires `ρ(√γ A_cl) < 1`.
pub fn discounted_lyapunov(a_cl: &Mat, m: &Mat, gamma: f64, start: Option<&Mat>) -> Result<Mat> {
    let n = a_cl.nrows();
    if a_cl.shape() != (n, n) || m.shape() != (n, n) {
        return Err(Error::contract("Lyapunov matrices must be square and of equal size"));
    }
    let rho = spectral_radius(a_cl)? * gamma.sqrt();
    if rho >= 1.0 {
        return Err(Error::Domain(format!(
            "closed loop is not stable under discounting: ρ(√γ(A − BK)) = {rho:.6} ≥ 1, cost is infinite"
        )));
    }
    let mut p = start.cloned().unwrap_or_else(|| Mat::zeros(n, n));
    if p.shape() != (n, n) {
        return Err(Error::contract("Lyapunov starting point has the wrong shape"));
    }
    let a_t = a_cl.transpose() * gamma;
    for _ in 0..MAX_ITERATIONS {
        let next = m + &a_t * &p * a_cl;
        let change = (&next - &p).amax();
        p = next;
        if change < FIXED_POINT_TOL {
            return Ok(symmetrize(&p));
        }
    }
    Err(Error::Numeric(format!(
        "Lyapunov iteration did not converge in {MAX_ITERATIONS} iterations (ρ = {rho:.6})"
    )))
}

/// Value matrix `P_K` of the gain `K`: `V(s) = sᵀ P_K s` plus a noise constant.
pub fn value_matrix(env: &LqrEnv, k: &Mat, start: Option<&Mat>) -> Result<Mat> {
    if k.shape() != (env.b.ncols(), env.a.nrows()) {
        return Err(Error::contract(format!(
            "gain is {}x{}, expected {}x{}",
            k.nrows(),
            k.ncols(),
            env.b.ncols(),
            env.a.nrows()
        )));
    }
    let a_cl = &env.a - &env.b * k;
    let m = &env.q + k.transpose() * &env.r * k;
    discounted_lyapunov(&a_cl, &m, env.gamma, start)
}

fn cost_from_value(env: &LqrEnv, p: &Mat) -> f64 {
    let second_moment = &env.init_cov + &env.init_mean * env.init_mean.transpose();
    let initial = (p * second_moment).trace();
    let noise = (p * &env.noise_cov).trace();
    if noise == 0.0 {
        initial
    } else {
        initial + env.gamma / (1.0 - env.gamma) * noise
    }
}

/// Expected discounted infinite-horizon cost of `a = −K s`:
/// `tr(P_K(Σ₀ + m₀m₀ᵀ)) + γ/(1−γ) tr(P_K Σ_w)`.
pub fn closed_form_j(env: &LqrEnv, k: &Mat) -> Result<f64> {
    Ok(cost_from_value(env, &value_matrix(env, k, None)?))
}

/// [`closed_form_j`] as a function of `θ = vec(K)`.
pub fn closed_form_j_theta(env: &LqrEnv, theta: &Vector) -> Result<f64> {
    let k = unvec(theta, env.b.ncols(), env.a.nrows())?;
    closed_form_j(env, &k)
}

/// Optimal gain, value matrix and cost of an LQR task.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub p: Mat,
    pub k_star: Mat,
    pub j_star: f64,
    pub bellman_residual: f64,
    /// `ρ(√γ(A − BK⋆))`.
    pub closed_loop_radius: f64,
}

pub fn lqr_optimum(env: &LqrEnv) -> Result<LqrSolution> {
    let sol = solve_discounted_riccati(&env.a, &env.b, &env.q, &env.r, env.gamma)?;
    let residual = bellman_residual(env, &sol.p, &sol.k_star);
    let radius = spectral_radius(&(&env.a - &env.b * &sol.k_star))? * env.gamma.sqrt();
    let j_star = if env.gamma < 1.0 || env.noise_cov.iter().all(|&x| x == 0.0) {
        cost_from_value(env, &sol.p)
    } else {
        f64::INFINITY
    };
    Ok(LqrSolution {
        p: sol.p,
        k_star: sol.k_star,
        j_star,
        bellman_residual: residual,
        closed_loop_radius: radius,
    })
}

/// Exact action derivatives of `Q^π` for a linear gain on the LQR task:
/// `∇_a Q = 2Ra + 2γBᵀP_K(As + Ba)`, `∇²_a Q = 2(R + γBᵀP_K B)`.
#[derive(Debug, Clone)]
pub struct LqrActionValue {
    env: LqrEnv,
    p: Mat,
}

impl LqrActionValue {
    pub fn new(env: &LqrEnv, k: &Mat) -> Result<Self> {
        Ok(LqrActionValue {
            env: env.clone(),
            p: value_matrix(env, k, None)?,
        })
    }

    pub fn value_matrix(&self) -> &Mat {
        &self.p
    }
}

impl ActionValueOracle for LqrActionValue {
    fn grad_a(&self, s: &Vector, a: &Vector) -> Vector {
        let e = &self.env;
        &e.r * a * 2.0 + e.b.transpose() * &self.p * (&e.a * s + &e.b * a) * (2.0 * e.gamma)
    }

    fn hess_a(&self, _s: &Vector, _a: &Vector) -> Mat {
        let e = &self.env;
        (&e.r + e.b.transpose() * &self.p * &e.b * e.gamma) * 2.0
    }
}

/// Default finite-difference step, scaled per coordinate by `max(1, |θ_i|)`.
pub const FD_STEP: f64 = 1e-4;

fn step_sizes(theta: &Vector, h: f64) -> Vec<f64> {
    theta.iter().map(|t| h * t.abs().max(1.0)).collect()
}

fn eval<F: Fn(&Vector) -> Result<f64>>(f: &F, x: &Vector) -> Result<f64> {
    let y = f(x)?;
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::Numeric("objective is not finite near the evaluation point".into()))
    }
}

/// Fourth-order central-difference gradient,
/// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h` per coordinate.
///
/// The three-point stencil's `h²` truncation term dominates near an optimum
/// of a steep objective; see [`fd_grad_second_order`].
pub fn fd_grad<F: Fn(&Vector) -> Result<f64>>(f: F, theta: &Vector, h: f64) -> Result<Vector> {
    let steps = step_sizes(theta, h);
    let mut out = Vector::zeros(theta.len());
    let at = |i: usize, offset: f64| -> Result<f64> {
        let mut x = theta.clone();
        x[i] += offset;
        eval(&f, &x)
    };
    for (i, &hi) in steps.iter().enumerate() {
        out[i] = (8.0 * (at(i, hi)? - at(i, -hi)?) - (at(i, 2.0 * hi)? - at(i, -2.0 * hi)?)) / (12.0 * hi);
    }
    Ok(out)
}

/// Three-point central-difference gradient `(f(θ+h) − f(θ−h)) / 2h`.
pub fn fd_grad_second_order<F: Fn(&Vector) -> Result<f64>>(f: F, theta: &Vector, h: f64) -> Result<Vector> {
    let steps = step_sizes(theta, h);
    let mut out = Vector::zeros(theta.len());
    for (i, &hi) in steps.iter().enumerate() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += hi;
        minus[i] -= hi;
        out[i] = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * hi);
    }
    Ok(out)
}

/// Central-difference Hessian: three-point stencil on the diagonal,
/// four-point stencil off it, symmetrised.
pub fn fd_hess<F: Fn(&Vector) -> Result<f64>>(f: F, theta: &Vector, h: f64) -> Result<Mat> {
    let n = theta.len();
    let steps = step_sizes(theta, h);
    let f0 = eval(&f, theta)?;
    let shifted = |i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
        let mut x = theta.clone();
        x[i] += si * steps[i];
        x[j] += sj * steps[j];
        eval(&f, &x)
    };
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += steps[i];
        minus[i] -= steps[i];
        out[(i, i)] = (eval(&f, &plus)? - 2.0 * f0 + eval(&f, &minus)?) / (steps[i] * steps[i]);
        for j in i + 1..n {
            let v = (shifted(i, 1.0, j, 1.0)? - shifted(i, 1.0, j, -1.0)? - shifted(i, -1.0, j, 1.0)?
                + shifted(i, -1.0, j, -1.0)?)
                / (4.0 * steps[i] * steps[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(symmetrize(&out))
}
