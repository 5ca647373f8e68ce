//! Small dense linear algebra used by the critic and actor.
//!
//! Matrices are `nalgebra` dynamic matrices. Vectorisation stacks columns
//! (`vec_mat`), and that convention is used everywhere a matrix is flattened,
//! including the policy parameter vector `θ = vec(K)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Singular values below `PINV_RCOND * σ_max` are treated as zero.
pub const PINV_RCOND: f64 = 1e-10;

/// Eigenvalues of magnitude below this are set to zero by [`project_psd`].
pub const PSD_CLAMP_TOL: f64 = 1e-12;

pub fn ensure_finite_mat(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_finite_vec(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} has non-finite entries")))
    }
}

fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    /// Orthonormal eigenvectors stored as columns, in the same order as
    /// `eigenvalues`.
    pub eigenvectors: Mat,
}

impl SymEig {
    pub fn reconstruct(&self) -> Mat {
        let u = &self.eigenvectors;
        u * Mat::from_diagonal(&self.eigenvalues) * u.transpose()
    }
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of `(m + mᵀ)/2`.
pub fn sym_eig(m: &Mat) -> Result<SymEig> {
    ensure_square(m, "sym_eig input")?;
    ensure_finite_mat(m, "sym_eig input")?;
    let eig = symmetrize(m).symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

pub fn min_sym_eigenvalue(m: &Mat) -> Result<f64> {
    let eig = sym_eig(m)?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Result of [`solve_detailed`].
#[derive(Debug, Clone)]
pub struct LinearSolve {
    pub x: Vector,
    /// σ_max / σ_min of the system matrix (infinite when singular).
    pub condition: f64,
    /// σ_max over the smallest singular value kept by the solve.
    pub effective_condition: f64,
    /// Number of singular values kept.
    pub rank: usize,
    /// True when the pseudoinverse path was taken.
    pub truncated: bool,
}

/// Solves `a x = b`, falling back to the truncated-SVD pseudoinverse when the
/// relative condition exceeds `1 / rcond`.
pub fn solve_detailed(a: &Mat, b: &Vector, rcond: f64) -> Result<LinearSolve> {
    ensure_square(a, "system matrix")?;
    if b.len() != a.nrows() {
        return Err(Error::contract(format!(
            "right-hand side has length {}, system has {} rows",
            b.len(),
            a.nrows()
        )));
    }
    ensure_finite_mat(a, "system matrix")?;
    ensure_finite_vec(b, "right-hand side")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(LinearSolve {
            x: Vector::zeros(0),
            condition: 1.0,
            effective_condition: 1.0,
            rank: 0,
            truncated: false,
        });
    }

    let svd = a.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };

    if s_max > 0.0 && s_min > rcond * s_max {
        if let Some(x) = a.clone().lu().solve(b) {
            if x.iter().all(|v| v.is_finite()) {
                return Ok(LinearSolve {
                    x,
                    condition,
                    effective_condition: condition,
                    rank: n,
                    truncated: false,
                });
            }
        }
    }

    let tol = rcond * s_max;
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let utb = u.transpose() * b;
    let mut scaled = Vector::zeros(n);
    let mut rank = 0;
    let mut smallest_kept = f64::INFINITY;
    for i in 0..n {
        let s = svd.singular_values[i];
        if s > tol && s > 0.0 {
            scaled[i] = utb[i] / s;
            rank += 1;
            smallest_kept = smallest_kept.min(s);
        }
    }
    Ok(LinearSolve {
        x: v_t.transpose() * scaled,
        condition,
        effective_condition: if rank > 0 { s_max / smallest_kept } else { f64::INFINITY },
        rank,
        truncated: true,
    })
}

pub fn solve_or_pinv(a: &Mat, b: &Vector) -> Result<Vector> {
    solve_detailed(a, b, PINV_RCOND).map(|s| s.x)
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(a: &Mat) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Nearest positive semidefinite matrix in Frobenius norm.
pub fn project_psd(m: &Mat) -> Result<Mat> {
    project_psd_counted(m).map(|(p, _)| p)
}

/// Like [`project_psd`], also returning how many eigenvalues were negative
/// and got clamped (roundoff-scale ones excluded).
pub fn project_psd_counted(m: &Mat) -> Result<(Mat, usize)> {
    let mut eig = sym_eig(m)?;
    let mut clamped = 0;
    for lambda in eig.eigenvalues.iter_mut() {
        if lambda.abs() < PSD_CLAMP_TOL {
            *lambda = 0.0;
        } else if *lambda < 0.0 {
            *lambda = 0.0;
            clamped += 1;
        }
    }
    Ok((symmetrize(&eig.reconstruct()), clamped))
}

/// Column-major vectorisation.
pub fn vec_mat(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::contract(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

pub fn kron(a: &Mat, b: &Mat) -> Result<Mat> {
    ensure_finite_mat(a, "kron left factor")?;
    ensure_finite_mat(b, "kron right factor")?;
    Ok(a.kronecker(b))
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    ensure_square(m, "spectral_radius input")?;
    ensure_finite_mat(m, "spectral_radius input")?;
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Symmetric square root factor `L` with `L Lᵀ = cov` for a PSD covariance.
/// Works for singular (including zero) covariances.
pub fn psd_sqrt(cov: &Mat) -> Result<Mat> {
    let eig = sym_eig(cov)?;
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * (1.0 + eig.eigenvalues[0].abs())) {
        return Err(Error::Input("covariance is not positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Mat::from_diagonal(&roots) * eig.eigenvectors.transpose())
}
