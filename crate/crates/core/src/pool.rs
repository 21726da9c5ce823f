//! Rubin's rules: combine per-imputation point estimates and variances into
//! one inference, with the Barnard–Rubin small-sample degrees of freedom.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimate::{CaceEstimate, Estimand, Method};

/// Degrees of freedom treated as effectively infinite when the caller does
/// not supply a complete-data value.
const LARGE_DF: f64 = 1e6;

#[derive(Clone, Copy, Debug)]
pub struct PooledEstimate {
    pub point: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub m: usize,
}

impl PooledEstimate {
    pub fn se(&self) -> f64 {
        self.total_var.sqrt()
    }

    pub fn to_estimate(&self, method: Method, estimand: Estimand) -> CaceEstimate {
        CaceEstimate {
            method,
            estimand,
            point: self.point,
            se: self.se(),
            ci_low: self.ci_low,
            ci_high: self.ci_high,
            m: Some(self.m),
            warnings: Vec::new(),
        }
    }
}

/// Pools m ≥ 2 completed-data results.
///
/// point = mean of points; within = mean of variances; between = sample
/// variance of points; total = within + (1 + 1/m)·between. The t degrees of
/// freedom follow Barnard–Rubin: with λ = (1+1/m)·between/total,
/// ν_old = (m−1)/λ², ν_obs = (ν+1)/(ν+3)·ν·(1−λ) at complete-data df ν
/// (defaults to effectively infinite), and 1/df = 1/ν_old + 1/ν_obs.
pub fn pool(points: &[f64], variances: &[f64], complete_df: Option<f64>) -> Result<PooledEstimate> {
    let m = points.len();
    if m < 2 {
        return Err(Error::Data(format!("pooling needs at least 2 imputations, got {m}")));
    }
    if variances.len() != m {
        return Err(Error::Data(format!(
            "{m} points but {} variances",
            variances.len()
        )));
    }
    if let Some(bad) = points.iter().find(|p| !p.is_finite()) {
        return Err(Error::Data(format!("non-finite point estimate {bad}")));
    }
    if let Some(bad) = variances.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Data(format!("variances must be positive and finite, got {bad}")));
    }
    let nu_com = complete_df.unwrap_or(LARGE_DF);
    if nu_com.is_nan() || nu_com <= 0.0 {
        return Err(Error::Data(format!("complete-data df must be positive, got {nu_com}")));
    }

    let mf = m as f64;
    let point = points.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = points.iter().map(|p| (p - point) * (p - point)).sum::<f64>() / (mf - 1.0);
    let total = within + (1.0 + 1.0 / mf) * between;

    // λ: fraction of total variance attributable to missingness.
    let lambda = if total > 0.0 { (1.0 + 1.0 / mf) * between / total } else { 0.0 };
    let df_obs = (nu_com + 1.0) / (nu_com + 3.0) * nu_com * (1.0 - lambda);
    let df = if lambda > 0.0 {
        let df_old = (mf - 1.0) / (lambda * lambda);
        1.0 / (1.0 / df_old + 1.0 / df_obs)
    } else {
        df_obs
    };

    let t975 = if df > 1e7 {
        // t converges to the normal quantile; avoids extreme-df numerics
        1.959963984540054
    } else {
        StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Numerical(format!("t distribution at df={df}: {e}")))?
            .inverse_cdf(0.975)
    };
    let half = t975 * total.sqrt();
    Ok(PooledEstimate {
        point,
        within_var: within,
        between_var: between,
        total_var: total,
        df,
        ci_low: point - half,
        ci_high: point + half,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_zero_between_variance() {
        let pooled = pool(&[1.5, 1.5, 1.5], &[0.04, 0.04, 0.04], None).unwrap();
        assert_eq!(pooled.point, 1.5);
        assert_eq!(pooled.between_var, 0.0);
        assert!((pooled.total_var - 0.04).abs() < 1e-15);
        // effectively-normal interval at huge df
        assert!((pooled.ci_low - (1.5 - 1.96 * 0.2)).abs() < 2e-4);
    }

    #[test]
    fn two_imputation_hand_example() {
        let pooled = pool(&[1.0, 3.0], &[1.0, 1.0], None).unwrap();
        assert!((pooled.point - 2.0).abs() < 1e-12);
        assert!((pooled.within_var - 1.0).abs() < 1e-12);
        assert!((pooled.between_var - 2.0).abs() < 1e-12);
        assert!((pooled.total_var - 4.0).abs() < 1e-12, "1 + 1.5·2 = 4, got {}", pooled.total_var);
    }

    #[test]
    fn barnard_rubin_df_and_interval_match_reference_values() {
        // five imputations with a finite complete-data df of 50; reference
        // values computed independently with scipy
        let points = [0.5, 0.7, 0.2, 0.9, 0.4];
        let vars = [0.04, 0.05, 0.045, 0.055, 0.05];
        let pooled = pool(&points, &vars, Some(50.0)).unwrap();
        assert!((pooled.point - 0.54).abs() < 1e-12);
        assert!((pooled.within_var - 0.048).abs() < 1e-12);
        assert!((pooled.between_var - 0.073).abs() < 1e-12);
        assert!((pooled.total_var - 0.1356).abs() < 1e-12);
        assert!(
            (pooled.df - 6.133072844817662).abs() < 1e-9,
            "df should be ≈6.13307, got {}",
            pooled.df
        );
        assert!((pooled.ci_low - (-0.35633054408058207)).abs() < 1e-8);
        assert!((pooled.ci_high - 1.4363305440805818).abs() < 1e-8);
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let points = [0.5, 0.7, 0.2, 0.9, 0.4];
        let vars = [0.04, 0.05, 0.045, 0.055, 0.05];
        let a = pool(&points, &vars, Some(50.0)).unwrap();
        let perm_p = [0.9, 0.4, 0.5, 0.2, 0.7];
        let perm_v = [0.055, 0.05, 0.04, 0.045, 0.05];
        let b = pool(&perm_p, &perm_v, Some(50.0)).unwrap();
        assert!((a.point - b.point).abs() < 1e-12);
        assert!((a.total_var - b.total_var).abs() < 1e-12);
        assert!((a.df - b.df).abs() < 1e-9);
    }

    #[test]
    fn pooling_is_affine_equivariant() {
        let points = [0.5, 0.7, 0.2, 0.9, 0.4];
        let vars = [0.04, 0.05, 0.045, 0.055, 0.05];
        let base = pool(&points, &vars, Some(50.0)).unwrap();
        let (a, b) = (-2.0, 3.0);
        let tp: Vec<f64> = points.iter().map(|p| a * p + b).collect();
        let tv: Vec<f64> = vars.iter().map(|v| a * a * v).collect();
        let t = pool(&tp, &tv, Some(50.0)).unwrap();
        assert!((t.point - (a * base.point + b)).abs() < 1e-12);
        assert!((t.total_var - a * a * base.total_var).abs() < 1e-12);
        assert!((t.df - base.df).abs() < 1e-9, "λ is scale-free so df must not move");
        // a < 0 flips the interval ends
        assert!((t.ci_low - (a * base.ci_high + b)).abs() < 1e-9);
        assert!((t.ci_high - (a * base.ci_low + b)).abs() < 1e-9);
    }

    #[test]
    fn total_variance_never_below_within() {
        let pooled = pool(&[0.1, 0.2, 0.35, 0.05], &[0.5, 0.4, 0.45, 0.55], None).unwrap();
        assert!(pooled.total_var >= pooled.within_var);
        assert!(pooled.between_var >= 0.0);
        assert!(pooled.df > 0.0);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(pool(&[1.0], &[0.1], None).is_err(), "m=1 must fail");
        assert!(pool(&[1.0, 2.0], &[0.1], None).is_err(), "length mismatch must fail");
        assert!(pool(&[1.0, 2.0], &[0.1, 0.0], None).is_err(), "zero variance must fail");
        assert!(pool(&[1.0, f64::NAN], &[0.1, 0.1], None).is_err(), "NaN point must fail");
    }
}
