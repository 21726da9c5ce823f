//! Weighted linear and logistic regression, link helpers, and numerical
//! Hessians — the shared numerical substrate for every estimator.
//!
//! Linear solves go through QR with column pivoting; rank deficiency is
//! detected from the R diagonal at relative tolerance 1e-10. Logistic fits
//! use IRLS started from zero coefficients and accept fractional responses
//! in [0,1] so that EM M-steps can fit weighted pseudo-data directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for rank detection.
const RANK_TOL: f64 = 1e-10;
/// IRLS: converged when the maximum absolute score falls below this.
const SCORE_TOL: f64 = 1e-8;
/// IRLS: or when the relative log-likelihood change falls below this.
const LOGLIK_RTOL: f64 = 1e-10;
/// IRLS iteration cap.
const MAX_IRLS: usize = 100;
/// Coefficient magnitude that flags separation.
const SEPARATION_COEF: f64 = 30.0;

/// Linear-interpolation empirical quantile (the common "type 7" definition)
/// of an ascending-sorted slice.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Draws one multivariate normal vector with the given mean and covariance.
/// A failed Cholesky is retried once with a small diagonal jitter (covariance
/// estimates can be numerically semi-definite); if that also fails, an error
/// is returned so the caller can fall back to the mean.
pub(crate) fn mvn_draw<R: rand::Rng>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let k = mean.len();
    let chol = cov.clone().cholesky().or_else(|| {
        let jitter = 1e-10 * (cov.diagonal().amax().max(1e-300));
        (cov + DMatrix::identity(k, k) * jitter).cholesky()
    });
    let l = match chol {
        Some(c) => c.unpack(),
        None => {
            return Err(Error::Numerical(
                "covariance not positive definite even after jitter".into(),
            ))
        }
    };
    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    Ok(mean + l * z)
}

/// Numerically stable logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds; caller guarantees p in (0,1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dense design matrix with named columns.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        if values.ncols() != column_names.len() {
            return Err(Error::Data(format!(
                "design matrix has {} columns but {} names",
                values.ncols(),
                column_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("design matrix contains non-finite entries".into()));
        }
        Ok(Self { values, column_names })
    }

    /// Build from named columns of equal length.
    pub fn from_columns(columns: &[(&str, &[f64])]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Data("design matrix needs at least one column".into()));
        }
        let n = columns[0].1.len();
        if columns.iter().any(|(_, c)| c.len() != n) {
            return Err(Error::Data("design matrix columns have unequal lengths".into()));
        }
        let values = DMatrix::from_fn(n, columns.len(), |i, j| columns[j].1[i]);
        let names = columns.iter().map(|(name, _)| name.to_string()).collect();
        Self::new(values, names)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Result of a single GLM fit.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub coef: DVector<f64>,
    /// Coefficient covariance; symmetric PSD within tolerance.
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Maximum-likelihood residual SD (linear fits only).
    pub sigma: Option<f64>,
    pub warnings: Vec<String>,
}

/// Weighted least squares via column-pivoted QR on sqrt-weight-scaled rows.
/// Returns the solution, (XᵀWX)⁻¹, and the weighted residual sum of squares.
pub(crate) fn wls_solve(
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || w.len() != n {
        return Err(Error::Data(format!(
            "response/weight length mismatch: X has {n} rows, y has {}, w has {}",
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|&wi| wi < 0.0 || !wi.is_finite()) {
        return Err(Error::Data("weights must be finite and nonnegative".into()));
    }
    let n_pos = w.iter().filter(|&&wi| wi > 0.0).count();
    if n_pos < p {
        return Err(Error::SingularDesign(format!(
            "{n_pos} positive-weight rows for {p} coefficients"
        )));
    }

    let mut xw = x.values.clone();
    let mut yw = DVector::from_column_slice(y);
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..p {
            xw[(i, j)] *= s;
        }
        yw[i] *= s;
    }

    let qr = xw.col_piv_qr();
    let r = qr.r();
    let pivot0 = r[(0, 0)].abs();
    for j in 0..p {
        if r[(j, j)].abs() <= RANK_TOL * pivot0 {
            return Err(Error::SingularDesign(format!(
                "rank {} detected for {} columns (pivot {} below tolerance)",
                j, p, j
            )));
        }
    }

    // Solve min ||Xw b - yw||: b = P R⁻¹ Qᵀ yw.
    let mut qty = yw.clone();
    qr.q_tr_mul(&mut qty);
    let mut coef = DVector::from_iterator(p, qty.iter().take(p).copied());
    let r_square = r.rows(0, p).clone_owned();
    if !r_square.solve_upper_triangular_mut(&mut coef) {
        return Err(Error::SingularDesign("triangular solve failed".into()));
    }
    qr.p().inv_permute_rows(&mut coef);

    // (XᵀWX)⁻¹ = P (RᵀR)⁻¹ Pᵀ.
    let rinv = r_square
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::SingularDesign("R inversion failed".into()))?;
    let mut xtx_inv = &rinv * rinv.transpose();
    qr.p().inv_permute_rows(&mut xtx_inv);
    qr.p().inv_permute_columns(&mut xtx_inv);

    let fitted = &x.values * &coef;
    let mut rss_w = 0.0;
    for i in 0..n {
        let e = y[i] - fitted[i];
        rss_w += w[i] * e * e;
    }
    Ok((coef, xtx_inv, rss_w))
}

/// Weighted least-squares fit with Gaussian log-likelihood.
///
/// `vcov` is σ̂²(XᵀWX)⁻¹ with the residual-degrees-of-freedom denominator;
/// `loglik` and `sigma` use the maximum-likelihood denominator Σw, treating
/// weights as replication counts.
pub fn fit_linear(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> Result<FitResult> {
    let n = x.nrows();
    let ones = vec![1.0; n];
    let w = w.unwrap_or(&ones);
    let p = x.ncols();
    let (coef, xtx_inv, rss_w) = wls_solve(x, y, w)?;

    let w_sum: f64 = w.iter().sum();
    let n_pos = w.iter().filter(|&&wi| wi > 0.0).count();
    let sigma2_ml = (rss_w / w_sum).max(0.0);
    let dof = n_pos.saturating_sub(p).max(1) as f64;
    let sigma2_unbiased = rss_w / dof;
    let vcov = &xtx_inv * sigma2_unbiased;

    // Profile Gaussian log-likelihood at the ML variance.
    let sigma2_safe = sigma2_ml.max(1e-300);
    let loglik = -0.5 * w_sum * ((2.0 * std::f64::consts::PI * sigma2_safe).ln() + rss_w / (w_sum * sigma2_safe));

    Ok(FitResult {
        coef,
        vcov,
        loglik,
        converged: true,
        iterations: 1,
        sigma: Some(sigma2_ml.sqrt()),
        warnings: Vec::new(),
    })
}

/// Bernoulli log-likelihood with weights; accepts fractional responses.
fn bernoulli_loglik(eta: &DVector<f64>, y: &[f64], w: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..y.len() {
        if w[i] > 0.0 {
            ll += w[i] * (y[i] * eta[i] - softplus(eta[i]));
        }
    }
    ll
}

/// Logistic regression by IRLS from zero coefficients.
///
/// Converges when max |score| < 1e-8 or the relative log-likelihood change
/// drops below 1e-10, capped at 100 iterations. Responses may be fractional
/// in [0,1] (weighted pseudo-data). A coefficient exceeding 30 in magnitude
/// attaches a separation warning; the fit is still returned.
pub fn fit_logistic(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> Result<FitResult> {
    let n = x.nrows();
    let ones = vec![1.0; n];
    let w = w.unwrap_or(&ones);
    let p = x.ncols();
    if y.iter().any(|&yi| !(0.0..=1.0).contains(&yi)) {
        return Err(Error::Data("logistic response values must lie in [0,1]".into()));
    }

    let mut coef = DVector::zeros(p);
    let mut eta = DVector::zeros(n);
    let mut loglik = bernoulli_loglik(&eta, y, w);
    let mut converged = false;
    let mut iterations = 0;
    let mut irls_w = vec![0.0; n];
    let mut zwork = vec![0.0; n];
    let mut last_xtx_inv: Option<DMatrix<f64>> = None;

    for iter in 1..=MAX_IRLS {
        iterations = iter;
        // score = Xᵀ diag(w) (y - μ); information weights w μ(1-μ).
        let mut max_score = 0.0_f64;
        for i in 0..n {
            let mu = expit(eta[i]);
            let v = (mu * (1.0 - mu)).max(1e-10);
            irls_w[i] = w[i] * v;
            zwork[i] = eta[i] + (y[i] - mu) / v;
        }
        for j in 0..p {
            let mut s = 0.0;
            for i in 0..n {
                let mu = expit(eta[i]);
                s += w[i] * (y[i] - mu) * x.values[(i, j)];
            }
            max_score = max_score.max(s.abs());
        }
        if max_score < SCORE_TOL {
            converged = true;
            break;
        }

        let (new_coef, xtx_inv, _) = wls_solve(x, &zwork, &irls_w)?;
        last_xtx_inv = Some(xtx_inv);
        coef = new_coef;
        eta = &x.values * &coef;
        let new_loglik = bernoulli_loglik(&eta, y, w);
        let rel_change = (new_loglik - loglik).abs() / (loglik.abs() + 1e-10);
        loglik = new_loglik;
        if rel_change < LOGLIK_RTOL {
            converged = true;
            break;
        }
    }

    // Final observed information at the solution (canonical link: XᵀWX).
    let vcov = match last_xtx_inv {
        Some(_) => {
            for i in 0..n {
                let mu = expit(eta[i]);
                irls_w[i] = w[i] * (mu * (1.0 - mu)).max(1e-10);
            }
            let (_, xtx_inv, _) = wls_solve(x, &zwork, &irls_w)?;
            xtx_inv
        }
        // Converged at the zero start (e.g. intercept-only, mean 1/2).
        None => {
            for i in 0..n {
                irls_w[i] = w[i] * 0.25;
            }
            let (_, xtx_inv, _) = wls_solve(x, &zwork, &irls_w)?;
            xtx_inv
        }
    };

    // Under perfect separation the score can still pass the tolerance
    // (residuals decay exponentially while coefficients diverge), so the
    // signal is coefficient magnitude alone: |η| beyond ±30 puts fitted
    // probabilities within 1e-13 of the boundary, far outside any sane
    // interior optimum for O(1) covariates.
    let mut warnings = Vec::new();
    if coef.iter().any(|c| c.abs() > SEPARATION_COEF) {
        warnings.push(
            "possible separation: coefficient magnitude exceeds 30".to_string(),
        );
    }

    Ok(FitResult {
        coef,
        vcov,
        loglik,
        converged,
        iterations,
        sigma: None,
        warnings,
    })
}

/// Central-difference Hessian of `f` at `theta`, symmetrized as (H+Hᵀ)/2.
///
/// Per-coordinate steps are `h·max(1,|θᵢ|)`. Any non-finite evaluation is an
/// error naming the offending perturbation.
pub fn numeric_hessian<F>(f: F, theta: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let p = theta.len();
    let steps: Vec<f64> = theta.iter().map(|t| h * t.abs().max(1.0)).collect();
    let eval = |point: &[f64], what: &str| -> Result<f64> {
        let v = f(point);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective at perturbation {what}"
            )));
        }
        Ok(v)
    };

    let f0 = eval(theta, "origin")?;
    let mut hess = DMatrix::zeros(p, p);
    let mut pt = theta.to_vec();

    for i in 0..p {
        pt.copy_from_slice(theta);
        pt[i] = theta[i] + steps[i];
        let fp = eval(&pt, &format!("+e{i}"))?;
        pt[i] = theta[i] - steps[i];
        let fm = eval(&pt, &format!("-e{i}"))?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
    }
    for i in 0..p {
        for j in (i + 1)..p {
            pt.copy_from_slice(theta);
            pt[i] = theta[i] + steps[i];
            pt[j] = theta[j] + steps[j];
            let fpp = eval(&pt, &format!("+e{i}+e{j}"))?;
            pt[j] = theta[j] - steps[j];
            let fpm = eval(&pt, &format!("+e{i}-e{j}"))?;
            pt[i] = theta[i] - steps[i];
            pt[j] = theta[j] + steps[j];
            let fmp = eval(&pt, &format!("-e{i}+e{j}"))?;
            pt[j] = theta[j] - steps[j];
            let fmm = eval(&pt, &format!("-e{i}-e{j}"))?;
            let hij = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j]);
            hess[(i, j)] = hij;
            hess[(j, i)] = hij;
        }
    }
    Ok(hess)
}
