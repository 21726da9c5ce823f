//! Two-stage and ratio estimators of the complier-average causal effect:
//! the Wald ratio, its logistic analogue, two-stage least squares, and
//! two-stage residual inclusion with a bootstrap interval.
//!
//! All of these require complete outcomes; with missing y the caller should
//! impute first (see the `impute` module) and pool with Rubin's rules.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{CaceEstimate, Estimand, Method};
use crate::glm::{self, logit, percentile, DesignMatrix};
use crate::rng::derive_rng;

/// First-stage coefficients smaller than this are treated as a null
/// instrument.
const INSTRUMENT_TOL: f64 = 1e-8;

/// Bootstrap settings for TSRI standard errors.
#[derive(Clone, Copy, Debug)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 500, seed: 0 }
    }
}

fn require_complete_y(ds: &Dataset) -> Result<()> {
    if ds.has_missing_y() {
        return Err(Error::Data(
            "missing outcomes present: impute first (FCS outcome imputer) and pool with Rubin's rules".into(),
        ));
    }
    Ok(())
}

/// Per-arm first and second sample moments of (y, d).
struct ArmMoments {
    n: f64,
    mean_y: f64,
    mean_d: f64,
    var_y: f64,
    var_d: f64,
    cov_yd: f64,
}

fn arm_moments(ds: &Dataset, z: u8) -> Result<ArmMoments> {
    let pairs: Vec<(f64, f64)> = ds
        .records
        .iter()
        .filter(|r| r.z == z)
        .map(|r| (r.y.expect("complete y checked by caller"), r.d as f64))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "arm z={z} has {n} record(s); at least 2 are needed for moment-based standard errors"
        )));
    }
    let nf = n as f64;
    let mean_y = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_d = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let mut var_y = 0.0;
    let mut var_d = 0.0;
    let mut cov_yd = 0.0;
    for &(y, d) in &pairs {
        var_y += (y - mean_y) * (y - mean_y);
        var_d += (d - mean_d) * (d - mean_d);
        cov_yd += (y - mean_y) * (d - mean_d);
    }
    let dof = nf - 1.0;
    Ok(ArmMoments {
        n: nf,
        mean_y,
        mean_d,
        var_y: var_y / dof,
        var_d: var_d / dof,
        cov_yd: cov_yd / dof,
    })
}

/// Delta-method variance of a statistic g(ȳ₁, d̄₁, ȳ₀, d̄₀) with per-arm
/// gradients (gy, gd); arms are independent.
fn two_arm_delta_var(arms: &[(&ArmMoments, f64, f64)]) -> f64 {
    let mut var = 0.0;
    for (m, gy, gd) in arms {
        var += (gy * gy * m.var_y + gd * gd * m.var_d + 2.0 * gy * gd * m.cov_yd) / m.n;
    }
    var
}

/// Wald (ratio) estimator: the ITT effect on y divided by the ITT effect on
/// treatment received, with a delta-method standard error over the four
/// sample means.
pub fn wald_estimate(ds: &Dataset) -> Result<CaceEstimate> {
    require_complete_y(ds)?;
    let m1 = arm_moments(ds, 1)?;
    let m0 = arm_moments(ds, 0)?;
    let delta_d = m1.mean_d - m0.mean_d;
    if delta_d.abs() < INSTRUMENT_TOL {
        return Err(Error::WeakInstrument(
            "treatment uptake does not differ between arms".into(),
        ));
    }
    let point = (m1.mean_y - m0.mean_y) / delta_d;
    // g = (ȳ₁−ȳ₀)/(d̄₁−d̄₀): ∂/∂ȳ_a = ±1/Δd, ∂/∂d̄_a = ∓point/Δd
    let var = two_arm_delta_var(&[
        (&m1, 1.0 / delta_d, -point / delta_d),
        (&m0, -1.0 / delta_d, point / delta_d),
    ]);
    Ok(CaceEstimate::normal_theory(
        Method::Wald,
        Estimand::RiskOrMeanDifference,
        point,
        var.max(0.0).sqrt(),
    ))
}

/// Logistic Wald-type estimator: difference in arm-level log odds of the
/// outcome divided by the difference in treatment uptake, reported on the
/// log-odds-ratio scale.
pub fn wald_or(ds: &Dataset) -> Result<CaceEstimate> {
    require_complete_y(ds)?;
    if ds.outcome_kind != crate::data::OutcomeKind::Binary {
        return Err(Error::Data("the logistic Wald estimator requires a binary outcome".into()));
    }
    let m1 = arm_moments(ds, 1)?;
    let m0 = arm_moments(ds, 0)?;
    for (m, z) in [(&m1, 1u8), (&m0, 0u8)] {
        if m.mean_y <= 0.0 || m.mean_y >= 1.0 {
            return Err(Error::Numerical(format!(
                "outcome proportion in arm z={z} is {} — log odds undefined at the boundary",
                m.mean_y
            )));
        }
    }
    let delta_d = m1.mean_d - m0.mean_d;
    if delta_d.abs() < INSTRUMENT_TOL {
        return Err(Error::WeakInstrument(
            "treatment uptake does not differ between arms".into(),
        ));
    }
    let point = (logit(m1.mean_y) - logit(m0.mean_y)) / delta_d;
    // ∂/∂p_a = ±1/(p_a(1−p_a)Δd), ∂/∂d̄_a = ∓point/Δd
    let gy1 = 1.0 / (m1.mean_y * (1.0 - m1.mean_y) * delta_d);
    let gy0 = -1.0 / (m0.mean_y * (1.0 - m0.mean_y) * delta_d);
    let var = two_arm_delta_var(&[
        (&m1, gy1, -point / delta_d),
        (&m0, gy0, point / delta_d),
    ]);
    Ok(CaceEstimate::normal_theory(
        Method::WaldOr,
        Estimand::LogOddsRatio,
        point,
        var.max(0.0).sqrt(),
    ))
}

/// Builds a design of intercept + named covariate columns (+ an optional
/// leading extra column) for the records of `ds`.
fn design_with(
    ds: &Dataset,
    lead: Option<(&str, &[f64])>,
    covariates: &[String],
) -> Result<DesignMatrix> {
    let n = ds.n();
    let ones = vec![1.0; n];
    let mut cols: Vec<(&str, &[f64])> = vec![("intercept", &ones)];
    if let Some((name, vals)) = lead {
        cols.push((name, vals));
    }
    let mut cov_cols: Vec<Vec<f64>> = Vec::with_capacity(covariates.len());
    for name in covariates {
        let j = ds.covariate_index(name)?;
        cov_cols.push(ds.records.iter().map(|r| r.x[j]).collect());
    }
    for (name, col) in covariates.iter().zip(&cov_cols) {
        cols.push((name.as_str(), col.as_slice()));
    }
    DesignMatrix::from_columns(&cols)
}

/// First stage shared by TSLS and TSRI: linear regression of treatment
/// received on the randomization arm (+ covariates for TSLS), with a
/// relevance check on the arm coefficient.
fn first_stage(ds: &Dataset, covariates: &[String]) -> Result<(DVector<f64>, Vec<f64>)> {
    let z_col: Vec<f64> = ds.records.iter().map(|r| r.z as f64).collect();
    let d_col: Vec<f64> = ds.records.iter().map(|r| r.d as f64).collect();
    let x1 = design_with(ds, Some(("z", &z_col)), covariates)?;
    let fit = glm::fit_linear(&x1, &d_col, None)?;
    if fit.coef[1].abs() < INSTRUMENT_TOL {
        return Err(Error::WeakInstrument(format!(
            "first-stage arm coefficient {:.3e} is numerically null",
            fit.coef[1]
        )));
    }
    let fitted = (&x1.values * &fit.coef).iter().copied().collect();
    Ok((fit.coef, fitted))
}

/// Two-stage least squares: stage 1 regresses treatment received on the arm
/// (+ covariates); stage 2 regresses the outcome on the stage-1 fitted
/// values (+ the same covariates). The standard error is the classical
/// asymptotic one, with the residual variance computed from second-stage
/// coefficients applied to ACTUAL treatment received, not its fitted value.
pub fn tsls(ds: &Dataset, covariates: &[String]) -> Result<CaceEstimate> {
    require_complete_y(ds)?;
    let n = ds.n();
    let (_, d_hat) = first_stage(ds, covariates)?;
    let y: Vec<f64> = ds.records.iter().map(|r| r.y.unwrap()).collect();
    let x2 = design_with(ds, Some(("d_hat", &d_hat)), covariates)?;
    let ones = vec![1.0; n];
    let (coef, xtx_inv, _) = glm::wls_solve(&x2, &y, &ones)?;

    // Residuals at the actual treatment column.
    let p = x2.ncols();
    if n <= p {
        return Err(Error::Data(format!(
            "need more than {p} records for a {p}-parameter second stage, got {n}"
        )));
    }
    let cov_idx: Vec<usize> = covariates
        .iter()
        .map(|name| ds.covariate_index(name))
        .collect::<Result<_>>()?;
    let mut rss = 0.0;
    for (i, rec) in ds.records.iter().enumerate() {
        let mut fitted = coef[0] + coef[1] * rec.d as f64;
        for (k, &j) in cov_idx.iter().enumerate() {
            fitted += coef[2 + k] * rec.x[j];
        }
        rss += (y[i] - fitted) * (y[i] - fitted);
    }
    let sigma2 = rss / (n - p) as f64;
    let se = (sigma2 * xtx_inv[(1, 1)]).sqrt();
    Ok(CaceEstimate::normal_theory(
        Method::Tsls,
        Estimand::RiskOrMeanDifference,
        coef[1],
        se,
    ))
}

/// TSRI point estimate alone (no interval): stage 1 is a linear regression
/// of treatment on arm only; its residual enters the second-stage logistic
/// model alongside actual treatment (+ covariates). Returns the log-odds
/// coefficient on treatment and any separation warnings.
fn tsri_point(ds: &Dataset, covariates: &[String]) -> Result<(f64, Vec<String>)> {
    let (_alpha, d_hat) = first_stage(ds, &[])?;
    let d_col: Vec<f64> = ds.records.iter().map(|r| r.d as f64).collect();
    let resid: Vec<f64> = d_col.iter().zip(&d_hat).map(|(d, f)| d - f).collect();
    let y: Vec<f64> = ds.records.iter().map(|r| r.y.unwrap()).collect();

    let n = ds.n();
    let ones = vec![1.0; n];
    let mut cols: Vec<(&str, &[f64])> = vec![("intercept", &ones), ("d", &d_col), ("v_hat", &resid)];
    let mut cov_cols: Vec<Vec<f64>> = Vec::with_capacity(covariates.len());
    for name in covariates {
        let j = ds.covariate_index(name)?;
        cov_cols.push(ds.records.iter().map(|r| r.x[j]).collect());
    }
    for (name, col) in covariates.iter().zip(&cov_cols) {
        cols.push((name.as_str(), col.as_slice()));
    }
    let x2 = DesignMatrix::from_columns(&cols)?;
    let fit = glm::fit_logistic(&x2, &y, None)?;
    Ok((fit.coef[1], fit.warnings))
}

/// Two-stage residual inclusion for binary outcomes, with a nonparametric
/// bootstrap over the whole two-stage pipeline: percentile 95% CI and the
/// bootstrap standard deviation as the SE. Resamples that fail (rank loss,
/// null instrument) are skipped; more than 10% failures is an error.
pub fn tsri(ds: &Dataset, covariates: &[String], boot: &BootstrapConfig) -> Result<CaceEstimate> {
    require_complete_y(ds)?;
    if ds.outcome_kind != crate::data::OutcomeKind::Binary {
        return Err(Error::Data("tsri requires a binary outcome".into()));
    }
    if boot.resamples < 2 {
        return Err(Error::Data("bootstrap needs at least 2 resamples".into()));
    }
    let (point, mut warnings) = tsri_point(ds, covariates)?;

    let n = ds.n();
    let boot_points: Vec<Option<f64>> = (0..boot.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = derive_rng(boot.seed, b as u64);
            let mut resampled = Dataset {
                records: Vec::with_capacity(n),
                outcome_kind: ds.outcome_kind,
                covariate_names: ds.covariate_names.clone(),
            };
            for _ in 0..n {
                let idx = rng.gen_range(0..n);
                resampled.records.push(ds.records[idx].clone());
            }
            tsri_point(&resampled, covariates).ok().map(|(pt, _)| pt)
        })
        .collect();

    let mut points: Vec<f64> = boot_points.iter().flatten().copied().collect();
    let failures = boot.resamples - points.len();
    if failures * 10 > boot.resamples {
        return Err(Error::Numerical(format!(
            "{failures} of {} bootstrap resamples failed",
            boot.resamples
        )));
    }
    if failures > 0 {
        warnings.push(format!("{failures} bootstrap resamples failed and were skipped"));
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = points.iter().sum::<f64>() / points.len() as f64;
    let var = points.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
        / (points.len() - 1) as f64;
    let ci_low = percentile(&points, 0.025);
    let ci_high = percentile(&points, 0.975);
    Ok(CaceEstimate {
        method: Method::Tsri,
        estimand: Estimand::LogOddsRatio,
        point,
        se: var.sqrt(),
        ci_low,
        ci_high,
        m: None,
        warnings,
    })
}
