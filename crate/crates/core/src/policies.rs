//! Differentiable deterministic policy classes.

use crate::error::{Error, Result};
use crate::linalg::{unvec, vec_mat, Mat, Vector};
use crate::mdp::DiffPolicy;

/// `π_θ(s) = −K s` with `θ = vec(K)` (column-major, `K` is `n_a × n_s`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearPolicy {
    pub n_s: usize,
    pub n_a: usize,
}

impl LinearPolicy {
    pub fn new(n_s: usize, n_a: usize) -> Self {
        LinearPolicy { n_s, n_a }
    }

    pub fn gain(&self, theta: &Vector) -> Result<Mat> {
        unvec(theta, self.n_a, self.n_s)
    }

    pub fn params_from_gain(&self, k: &Mat) -> Result<Vector> {
        if k.shape() != (self.n_a, self.n_s) {
            return Err(Error::contract(format!(
                "gain is {}x{}, expected {}x{}",
                k.nrows(),
                k.ncols(),
                self.n_a,
                self.n_s
            )));
        }
        Ok(vec_mat(k))
    }

    fn check(&self, theta: &Vector, s: &Vector) -> Result<()> {
        if theta.len() != self.n_a * self.n_s || s.len() != self.n_s {
            return Err(Error::contract(format!(
                "linear policy expects θ of length {} and state of length {}, got {} and {}",
                self.n_a * self.n_s,
                self.n_s,
                theta.len(),
                s.len()
            )));
        }
        Ok(())
    }
}

/// Builds a gain from row-major nested lists, as written in config files.
pub fn gain_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Input("gain rows must be non-empty and of equal length".into()));
    }
    Ok(Mat::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

impl DiffPolicy for LinearPolicy {
    fn param_dim(&self) -> usize {
        self.n_a * self.n_s
    }

    fn state_dim(&self) -> usize {
        self.n_s
    }

    fn action_dim(&self) -> usize {
        self.n_a
    }

    fn act(&self, theta: &Vector, s: &Vector) -> Result<Vector> {
        self.check(theta, s)?;
        // a_i = −Σ_j K_ij s_j, with K_ij = θ[j·n_a + i].
        let mut a = Vector::zeros(self.n_a);
        for j in 0..self.n_s {
            for i in 0..self.n_a {
                a[i] -= theta[j * self.n_a + i] * s[j];
            }
        }
        Ok(a)
    }

    /// Entry `(j·n_a + i, i')` is `−s_j δ_{ii'}`, independent of `θ`.
    fn jacobian(&self, theta: &Vector, s: &Vector) -> Result<Mat> {
        self.check(theta, s)?;
        let mut jac = Mat::zeros(self.n_a * self.n_s, self.n_a);
        for j in 0..self.n_s {
            for i in 0..self.n_a {
                jac[(j * self.n_a + i, i)] = -s[j];
            }
        }
        Ok(jac)
    }
}
