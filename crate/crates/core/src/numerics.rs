//! Root finding, finite differences and sandwich covariance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("non-finite function evaluation")]
    NonFiniteEvaluation,
    #[error("bread matrix A is singular")]
    SingularA,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: Vector,
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Damped Newton iteration for `residual(θ) = 0`.
///
/// Steps are halved (up to 30 times) while the residual ∞-norm increases.
/// Without an analytic `jacobian` a central-difference one is used.
/// Running out of iterations yields `converged: false`, not an error.
pub fn newton_solve(
    residual: &dyn Fn(&Vector) -> Vector,
    jacobian: Option<&dyn Fn(&Vector) -> Matrix>,
    theta0: Vector,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, NumericsError> {
    let mut theta = theta0;
    let mut r = residual(&theta);
    if r.len() != theta.len() {
        return Err(NumericsError::DimensionMismatch(format!("residual {} vs parameter {}", r.len(), theta.len())));
    }
    if !all_finite(&r) {
        return Err(NumericsError::NonFiniteEvaluation);
    }
    let mut norm = inf_norm(&r);
    for it in 0..max_iter {
        if norm <= tol {
            return Ok(SolveReport { solution: theta, iterations: it, final_residual_norm: norm, converged: true });
        }
        let jac = match jacobian {
            Some(j) => j(&theta),
            None => fd_jacobian(residual, &theta)?,
        };
        let step = jac.lu().solve(&(-&r)).filter(all_finite).ok_or(NumericsError::SingularJacobian(it))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &theta + &step * t;
            let rc = residual(&cand);
            if all_finite(&rc) && inf_norm(&rc) <= norm {
                accepted = Some((cand, rc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, rc)) = accepted else {
            return Ok(SolveReport { solution: theta, iterations: it + 1, final_residual_norm: norm, converged: false });
        };
        theta = cand;
        r = rc;
        norm = inf_norm(&r);
    }
    Ok(SolveReport { converged: norm <= tol, solution: theta, iterations: max_iter, final_residual_norm: norm })
}

/// Central-difference Jacobian with `h_i = 1e-6 · max(1, |θ_i|)`.
pub fn fd_jacobian(f: &dyn Fn(&Vector) -> Vector, theta: &Vector) -> Result<Matrix, NumericsError> {
    let p = theta.len();
    let mut cols = Vec::with_capacity(p);
    let mut work = theta.clone();
    for i in 0..p {
        let h = 1e-6 * theta[i].abs().max(1.0);
        work[i] = theta[i] + h;
        let up = f(&work);
        work[i] = theta[i] - h;
        let down = f(&work);
        work[i] = theta[i];
        if !all_finite(&up) || !all_finite(&down) {
            return Err(NumericsError::NonFiniteEvaluation);
        }
        cols.push((up - down) / (2.0 * h));
    }
    if cols.is_empty() {
        return Ok(Matrix::zeros(f(theta).len(), 0));
    }
    Ok(Matrix::from_columns(&cols))
}

/// `(1/n) · A⁻¹ B A⁻ᵀ`, symmetrized. This is the finite-sample covariance
/// of θ̂, i.e. the asymptotic variance of `√n(θ̂ − θ)` divided by `n`.
pub fn sandwich(a: &Matrix, b: &Matrix, n: usize) -> Result<Matrix, NumericsError> {
    if !a.is_square() || a.shape() != b.shape() {
        return Err(NumericsError::DimensionMismatch(format!("A {:?}, B {:?}", a.shape(), b.shape())));
    }
    let a_inv = a.clone().try_inverse().filter(|m| m.iter().all(|x| x.is_finite())).ok_or(NumericsError::SingularA)?;
    let v = &a_inv * b * a_inv.transpose() / n as f64;
    Ok((&v + v.transpose()) * 0.5)
}

/// Cholesky test for positive semi-definiteness with a diagonal jitter.
pub fn is_psd(m: &Matrix, jitter: f64) -> bool {
    let scale = m.diagonal().iter().fold(1.0f64, |s, x| s.max(x.abs()));
    let shifted = m + Matrix::identity(m.nrows(), m.ncols()) * (jitter * scale);
    shifted.cholesky().is_some()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
