//! Dense ridge solves shared by the encoder and the predictor.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const PIVOT_RTOL: f64 = 1e-13;

/// Solves `(XᵀX + λI) W = XᵀT` for `W` (`p × k`).
///
/// `x` is `n × p`, `t` is `n × k`. Uses a Cholesky factorization; a failed
/// factorization is reported as a numerical failure that names `lambda`.
pub fn ridge_solve(x: &DMatrix<f64>, t: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != t.nrows() {
        return Err(Error::invalid(format!(
            "ridge: {} feature rows but {} target rows",
            x.nrows(),
            t.nrows()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge: lambda must be finite and >= 0, got {lambda}")));
    }
    let mut gram = x.tr_mul(x);
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = x.tr_mul(t);
    let scale = (0..gram.nrows()).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let n = gram.nrows();
    let chol = gram.cholesky().ok_or_else(|| {
        Error::numerical(format!(
            "ridge normal equations are singular at lambda = {lambda}; increase lambda"
        ))
    })?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if n > 0 && min_pivot <= PIVOT_RTOL * scale {
        return Err(Error::numerical(format!(
            "ridge normal equations are numerically singular at lambda = {lambda}; increase lambda"
        )));
    }
    let w = chol.solve(&rhs);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "ridge solution is not finite at lambda = {lambda}; increase lambda"
        )));
    }
    Ok(w)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}
