//! Common result type for every CACE estimator, plus the front-door
//! dispatcher that applies any method to a dataset under one option set.

use serde::{Deserialize, Serialize};

use crate::bayes::{gibbs_run, posterior_summary, McmcConfig, PriorSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::impute::{fcs_impute_outcome_for_ts, smc_mic_run, DrawMechanism, ImputationConfig};
use crate::mixture::{em_fit, fit_completed, Link, MixtureModelSpec};
use crate::pool::pool;
use crate::rng::derive_seed;
use crate::twostage::{tsls, tsri, wald_estimate, wald_or, BootstrapConfig};

/// Scale the point estimate lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    /// Risk or mean difference among compliers.
    RiskOrMeanDifference,
    /// Log odds ratio among compliers.
    LogOddsRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wald,
    WaldOr,
    Tsls,
    Tsri,
    MlMixture,
    SmcMic,
    Bayes,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Wald => "wald",
            Method::WaldOr => "waldor",
            Method::Tsls => "tsls",
            Method::Tsri => "tsri",
            Method::MlMixture => "ml-mixture",
            Method::SmcMic => "smc-mic",
            Method::Bayes => "bayes",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "wald" => Ok(Method::Wald),
            "waldor" => Ok(Method::WaldOr),
            "tsls" => Ok(Method::Tsls),
            "tsri" => Ok(Method::Tsri),
            "ml-mixture" => Ok(Method::MlMixture),
            "smc-mic" => Ok(Method::SmcMic),
            "bayes" => Ok(Method::Bayes),
            other => Err(Error::Data(format!("unknown method '{other}'"))),
        }
    }

    /// Fixed tag used to derive per-method RNG streams; independent of the
    /// order methods are requested in.
    pub fn stream_tag(&self) -> u64 {
        match self {
            Method::Wald => 1,
            Method::WaldOr => 2,
            Method::Tsls => 3,
            Method::Tsri => 4,
            Method::MlMixture => 5,
            Method::SmcMic => 6,
            Method::Bayes => 7,
        }
    }
}

/// Two-sided 97.5% normal quantile used for normal-theory intervals.
pub const Z975: f64 = 1.96;

/// A point estimate of the CACE with its uncertainty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaceEstimate {
    pub method: Method,
    pub estimand: Estimand,
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Number of imputations behind a pooled estimate, when applicable.
    pub m: Option<usize>,
    pub warnings: Vec<String>,
}

impl CaceEstimate {
    /// Normal-theory estimate: ci = point ± 1.96·se.
    pub fn normal_theory(method: Method, estimand: Estimand, point: f64, se: f64) -> Self {
        Self {
            method,
            estimand,
            point,
            se,
            ci_low: point - Z975 * se,
            ci_high: point + Z975 * se,
            m: None,
            warnings: Vec::new(),
        }
    }
}

/// Everything a method might need, under one roof with study defaults.
/// Methods read only the fields they use.
#[derive(Clone, Debug)]
pub struct AnalysisOptions {
    /// Covariates of the analysis model itself (empty = marginal model).
    pub covariates: Vec<String>,
    /// Auxiliary covariates available to imputation models only.
    pub aux_covariates: Vec<String>,
    /// Number of imputed datasets M.
    pub imputations: usize,
    /// Chained-equation cycles per imputation stream.
    pub fcs_iterations: usize,
    pub rejection_cap: usize,
    pub draw: DrawMechanism,
    pub chains: usize,
    /// Total MCMC iterations per chain, burn-in included.
    pub mcmc_iterations: usize,
    pub burn_in: usize,
    /// None means the vague defaults for the dataset's outcome kind.
    pub priors: Option<PriorSpec>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        let imp = ImputationConfig::default();
        let mcmc = McmcConfig::default();
        Self {
            covariates: Vec::new(),
            aux_covariates: Vec::new(),
            imputations: imp.m,
            fcs_iterations: imp.iterations,
            rejection_cap: imp.rejection_cap,
            draw: DrawMechanism::default(),
            chains: mcmc.chains,
            mcmc_iterations: mcmc.iterations,
            burn_in: mcmc.burn_in,
            priors: None,
            bootstrap_resamples: BootstrapConfig::default().resamples,
            seed: 0,
        }
    }
}

impl AnalysisOptions {
    /// The imputation settings these options imply; what the imputation-based
    /// estimation paths run with.
    pub fn imputation_config(&self) -> ImputationConfig {
        ImputationConfig {
            m: self.imputations,
            iterations: self.fcs_iterations,
            rejection_cap: self.rejection_cap,
            aux_covariates: self.aux_covariates.clone(),
            seed: self.seed,
            draw: self.draw,
        }
    }
}

/// Applies one estimation method to a dataset.
///
/// Estimators that cannot tolerate missing outcomes (Wald, WaldOR, TSLS,
/// TSRI) are automatically preceded by per-arm chained-equation outcome
/// imputation and Rubin-pooled across the M completed datasets when the
/// outcomes are incomplete; the mixture-based methods handle missingness
/// internally.
pub fn estimate_cace(ds: &Dataset, method: Method, opts: &AnalysisOptions) -> Result<CaceEstimate> {
    let link = Link::for_outcome(ds.outcome_kind);
    let spec = if opts.covariates.is_empty() {
        MixtureModelSpec::marginal(link)
    } else {
        MixtureModelSpec::with_covariates(link, &opts.covariates)
    };
    match method {
        Method::Wald | Method::WaldOr | Method::Tsls | Method::Tsri => {
            if ds.has_missing_y() {
                ts_after_outcome_imputation(ds, method, opts)
            } else {
                ts_on_complete(ds, method, opts, 0)
            }
        }
        Method::MlMixture => em_fit(ds, &spec)?.cace(link),
        Method::SmcMic => {
            let imputed = smc_mic_run(ds, &spec, &opts.imputation_config())?;
            let mut points = Vec::with_capacity(imputed.datasets.len());
            let mut variances = Vec::with_capacity(imputed.datasets.len());
            let mut p = 3 + opts.covariates.len();
            for dsm in &imputed.datasets {
                let fit = fit_completed(dsm, &spec)?;
                points.push(fit.params.beta_cz);
                variances.push(fit.beta_vcov[(CACE_COEF, CACE_COEF)]);
                p = fit.beta_vcov.nrows();
            }
            let complete_df = (ds.n() as f64 - p as f64).max(1.0);
            let pooled = pool(&points, &variances, Some(complete_df))?;
            let mut est = pooled.to_estimate(Method::SmcMic, link.estimand());
            est.warnings = imputed.warnings;
            Ok(est)
        }
        Method::Bayes => {
            let priors = opts.priors.unwrap_or_else(|| PriorSpec::default_for(ds.outcome_kind));
            let cfg = McmcConfig {
                chains: opts.chains,
                iterations: opts.mcmc_iterations,
                burn_in: opts.burn_in,
                seed: opts.seed,
            };
            let samples = gibbs_run(ds, &spec, &priors, &cfg)?;
            Ok(posterior_summary(&samples)?.estimate)
        }
    }
}

/// Index of the treatment-effect coefficient in the β block.
const CACE_COEF: usize = 2;

/// One complete-data two-stage estimate; `stream` varies the bootstrap seed
/// across imputed datasets.
fn ts_on_complete(
    ds: &Dataset,
    method: Method,
    opts: &AnalysisOptions,
    stream: u64,
) -> Result<CaceEstimate> {
    match method {
        Method::Wald => wald_estimate(ds),
        Method::WaldOr => wald_or(ds),
        Method::Tsls => tsls(ds, &opts.covariates),
        Method::Tsri => tsri(
            ds,
            &opts.covariates,
            &BootstrapConfig {
                resamples: opts.bootstrap_resamples,
                seed: derive_seed(opts.seed, 10_000 + stream),
            },
        ),
        _ => unreachable!("only two-stage methods are dispatched here"),
    }
}

/// Imputes missing outcomes per arm, applies the two-stage method to each
/// completed dataset, and pools with Rubin's rules.
fn ts_after_outcome_imputation(
    ds: &Dataset,
    method: Method,
    opts: &AnalysisOptions,
) -> Result<CaceEstimate> {
    let imputed = fcs_impute_outcome_for_ts(ds, &opts.imputation_config())?;
    let mut points = Vec::with_capacity(imputed.datasets.len());
    let mut variances = Vec::with_capacity(imputed.datasets.len());
    let mut estimand = None;
    for (j, dsm) in imputed.datasets.iter().enumerate() {
        let est = ts_on_complete(dsm, method, opts, j as u64)?;
        points.push(est.point);
        variances.push(est.se * est.se);
        estimand = Some(est.estimand);
    }
    // second-stage parameter count: intercept + treatment (+ residual for
    // TSRI) + covariates
    let p = if method == Method::Tsri { 3 } else { 2 } + opts.covariates.len();
    let complete_df = (ds.n() as f64 - p as f64).max(1.0);
    let pooled = pool(&points, &variances, Some(complete_df))?;
    let mut est = pooled.to_estimate(method, estimand.expect("m >= 2 datasets"));
    est.warnings = imputed.warnings;
    Ok(est)
}
