//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub const LN_2PI: f64 = 1.837877066409345;

/// Jitter levels tried in order when a Cholesky factorization fails.
pub const CHOL_JITTER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Cholesky factor (lower) of a symmetric positive definite matrix, with
/// jitter escalation on failure. Returns the factor and the jitter that was
/// actually added to the diagonal (0.0 in the common case).
pub fn chol_spd(a: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let sym = symmetrize(a);
    if let Some(ch) = nalgebra::Cholesky::new(sym.clone()) {
        return Ok((ch.l(), 0.0));
    }
    for &jitter in &CHOL_JITTER {
        let mut m = sym.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = nalgebra::Cholesky::new(m) {
            return Ok((ch.l(), jitter));
        }
    }
    Err(Error::NotSpd(what.to_string()))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// log N(x; mean, cov) for a full covariance given by its lower Cholesky factor.
pub fn gaussian_log_density_chol(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol_l: &DMatrix<f64>,
) -> f64 {
    let dim = x.len() as f64;
    let resid = x - mean;
    // Solve L u = resid; quadratic form is uᵀu.
    let u = chol_l
        .solve_lower_triangular(&resid)
        .expect("cholesky factor must be nonsingular");
    let log_det = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (u.dot(&u) + log_det + dim * LN_2PI)
}

/// log N(x; mean, diag(var)).
pub fn gaussian_log_density_diag(x: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        acc += r * r / var[i] + var[i].ln() + LN_2PI;
    }
    -0.5 * acc
}

/// Numerically stable log(Σ exp(x_i)).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized weights from unnormalized log weights via log-sum-exp.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logw);
    logw.iter().map(|lw| (lw - lse).exp()).collect()
}

/// Check that a matrix is symmetric positive definite (all Cholesky pivots > 0).
pub fn is_spd(a: &DMatrix<f64>) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let asym = (a - a.transpose()).abs().max();
    if asym > 1e-8 * (1.0 + a.abs().max()) {
        return false;
    }
    nalgebra::Cholesky::new(a.clone()).is_some()
}

/// softplus(x) = ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// ln(softplus(x)), stable for very negative x where softplus(x) ≈ e^x.
pub fn ln_softplus(x: f64) -> f64 {
    if x < -30.0 {
        x
    } else {
        softplus(x).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(x!) via ln Γ(x+1) for nonnegative integer counts stored as f64.
pub fn ln_factorial(n: u64) -> f64 {
    // Exact accumulation is fine for the count magnitudes seen in binned data.
    (2..=n).map(|k| (k as f64).ln()).sum()
}
