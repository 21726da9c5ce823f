//! Latent compliance-class mixture model: the substantive outcome model,
//! class posteriors, observed-data likelihood, and maximum likelihood via
//! EM.
//!
//! The outcome model is g(η) = β₀ + β_c·C + β_cz·C·Z (+ extra covariates),
//! with Y ~ N(η, σ²) under the identity link or Y ~ Bern(expit(η)) under the
//! logit link, and C ~ Bern(π). The class is observed in the z=1 arm (equal
//! to treatment received) and latent in the z=0 arm, which anchors the
//! component labels and removes the usual mixture label-switching ambiguity.
//!
//! A record whose `c` field is set is treated as class-observed throughout —
//! that is what makes a completed (imputed) dataset collapse to a plain GLM
//! fit. Raw control-arm records (`c = None`) are marginalized over the two
//! classes.

use nalgebra::DMatrix;

use crate::data::{ComplianceClass, Dataset, OutcomeKind, TrialRecord};
use crate::error::{Error, Result};
use crate::estimate::{CaceEstimate, Estimand, Method};
use crate::glm::{self, expit, softplus, DesignMatrix};

const EM_LOGLIK_TOL: f64 = 1e-8;
/// Sup-norm parameter-change tolerance applied on top of the log-likelihood
/// gate. EM converges geometrically, so the likelihood can flatten below
/// 1e-8 while π is still ~1e-5 from its fixed point; requiring the
/// parameters to settle as well recovers the analytic limits to ~1e-8.
const EM_PARAM_TOL: f64 = 1e-8;
const EM_MAX_ITER: usize = 500;
/// Relative step for the numeric Hessian behind the EM standard errors.
const HESSIAN_STEP: f64 = 1e-4;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    pub fn matches(&self, kind: OutcomeKind) -> bool {
        matches!(
            (self, kind),
            (Link::Identity, OutcomeKind::Continuous) | (Link::Logit, OutcomeKind::Binary)
        )
    }

    pub fn for_outcome(kind: OutcomeKind) -> Link {
        match kind {
            OutcomeKind::Continuous => Link::Identity,
            OutcomeKind::Binary => Link::Logit,
        }
    }

    pub fn estimand(&self) -> Estimand {
        match self {
            Link::Identity => Estimand::RiskOrMeanDifference,
            Link::Logit => Estimand::LogOddsRatio,
        }
    }
}

/// Which outcome model to fit: the link and any covariates beyond the
/// marginal (C, C·Z) terms.
#[derive(Clone, Debug)]
pub struct MixtureModelSpec {
    pub link: Link,
    pub extra_covariates: Vec<String>,
}

impl MixtureModelSpec {
    /// The marginal model: intercept, class, and class-by-arm terms only.
    pub fn marginal(link: Link) -> Self {
        Self { link, extra_covariates: Vec::new() }
    }

    pub fn with_covariates(link: Link, extra: &[String]) -> Self {
        Self { link, extra_covariates: extra.to_vec() }
    }

    /// Resolves covariate names against a dataset and checks the link.
    pub fn resolve(&self, ds: &Dataset) -> Result<ResolvedModel<'_>> {
        if !self.link.matches(ds.outcome_kind) {
            return Err(Error::Data(format!(
                "link {:?} does not match outcome kind {:?}",
                self.link, ds.outcome_kind
            )));
        }
        let x_idx = self
            .extra_covariates
            .iter()
            .map(|n| ds.covariate_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResolvedModel { spec: self, x_idx })
    }
}

/// A spec with covariate names resolved to dataset column indices.
#[derive(Clone, Debug)]
pub struct ResolvedModel<'a> {
    pub spec: &'a MixtureModelSpec,
    pub x_idx: Vec<usize>,
}

/// Parameters of the mixture model.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub beta0: f64,
    pub beta_c: f64,
    pub beta_cz: f64,
    /// One coefficient per extra covariate, in spec order.
    pub extra: Vec<f64>,
    pub pi: f64,
    /// Residual SD; present for the identity link only.
    pub sigma: Option<f64>,
}

impl MixtureParams {
    pub fn validate(&self, link: Link) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Data(format!("pi must lie in (0,1), got {}", self.pi)));
        }
        match (link, self.sigma) {
            (Link::Identity, Some(s)) if s > 0.0 && s.is_finite() => {}
            (Link::Identity, _) => {
                return Err(Error::Data("identity link requires finite sigma > 0".into()))
            }
            (Link::Logit, None) => {}
            (Link::Logit, Some(_)) => {
                return Err(Error::Data("logit link must not carry sigma".into()))
            }
        }
        let finite = self.beta0.is_finite()
            && self.beta_c.is_finite()
            && self.beta_cz.is_finite()
            && self.extra.iter().all(|b| b.is_finite());
        if !finite {
            return Err(Error::Data("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Linear predictor for class `c`, arm `z`, covariate row `x`.
    pub fn eta(&self, c: u8, z: u8, x: &[f64], model: &ResolvedModel) -> f64 {
        let mut eta = self.beta0 + self.beta_c * c as f64 + self.beta_cz * (c * z) as f64;
        for (b, &j) in self.extra.iter().zip(&model.x_idx) {
            eta += b * x[j];
        }
        eta
    }

    /// Flat layout [β₀, β_c, β_cz, extras..., π, (σ)] used by the numeric
    /// Hessian and by proper-imputation parameter draws.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.beta0, self.beta_c, self.beta_cz];
        v.extend_from_slice(&self.extra);
        v.push(self.pi);
        if let Some(s) = self.sigma {
            v.push(s);
        }
        v
    }

    pub fn from_vec(v: &[f64], n_extra: usize, link: Link) -> MixtureParams {
        MixtureParams {
            beta0: v[0],
            beta_c: v[1],
            beta_cz: v[2],
            extra: v[3..3 + n_extra].to_vec(),
            pi: v[3 + n_extra],
            sigma: if link == Link::Identity { Some(v[4 + n_extra]) } else { None },
        }
    }

    pub fn param_names(extra_names: &[String], link: Link) -> Vec<String> {
        let mut names = vec!["beta0".to_string(), "beta_c".into(), "beta_cz".into()];
        names.extend(extra_names.iter().cloned());
        names.push("pi".into());
        if link == Link::Identity {
            names.push("sigma".into());
        }
        names
    }
}

/// Log density/mass of y given class `c`, arm `z`, covariates `x`.
pub fn log_outcome_density(
    y: f64,
    c: u8,
    z: u8,
    x: &[f64],
    theta: &MixtureParams,
    model: &ResolvedModel,
) -> f64 {
    let eta = theta.eta(c, z, x, model);
    match model.spec.link {
        Link::Identity => {
            let sigma = theta.sigma.expect("identity link carries sigma");
            let e = (y - eta) / sigma;
            -0.5 * (LN_2PI + e * e) - sigma.ln()
        }
        Link::Logit => y * eta - softplus(eta),
    }
}

/// Density/mass of y given (c, z, x).
pub fn outcome_density(
    y: f64,
    c: u8,
    z: u8,
    x: &[f64],
    theta: &MixtureParams,
    model: &ResolvedModel,
) -> f64 {
    log_outcome_density(y, c, z, x, theta, model).exp()
}

/// P(C = complier | record) under `theta`.
///
/// For z=1 the class is read off treatment received. For z=0 it is the Bayes
/// posterior over the two outcome components at the record's y; with y
/// missing the outcome carries no information and the prior π is returned.
pub fn class_posterior(record: &TrialRecord, theta: &MixtureParams, model: &ResolvedModel) -> f64 {
    if record.z == 1 {
        return record.d as f64;
    }
    match record.y {
        None => theta.pi,
        Some(y) => {
            let l1 = theta.pi.ln() + log_outcome_density(y, 1, 0, &record.x, theta, model);
            let l0 =
                (1.0 - theta.pi).ln() + log_outcome_density(y, 0, 0, &record.x, theta, model);
            expit(l1 - l0)
        }
    }
}

/// E-step weight: known classes (a set `c`, or any z=1 record) contribute a
/// hard 0/1; latent control records contribute their posterior.
fn class_weight(record: &TrialRecord, theta: &MixtureParams, model: &ResolvedModel) -> f64 {
    match record.c {
        Some(class) => class.indicator() as f64,
        None => class_posterior(record, theta, model),
    }
}

/// Observed-data log-likelihood.
///
/// Records with a known class (z=1, or `c` filled by imputation) contribute
/// log P(class) plus the conditional outcome density; latent control records
/// contribute the log of the class-marginalized density. Missing-y records
/// contribute the class-probability term only (which is zero for a latent
/// record: both classes integrate to one).
pub fn observed_loglik(ds: &Dataset, theta: &MixtureParams, model: &ResolvedModel) -> f64 {
    let mut ll = 0.0;
    for rec in &ds.records {
        let known = match rec.c {
            Some(class) => Some(class.indicator()),
            None if rec.z == 1 => Some(rec.d),
            None => None,
        };
        match known {
            Some(c) => {
                ll += if c == 1 { theta.pi.ln() } else { (1.0 - theta.pi).ln() };
                if let Some(y) = rec.y {
                    ll += log_outcome_density(y, c, rec.z, &rec.x, theta, model);
                }
            }
            None => {
                if let Some(y) = rec.y {
                    let l1 = theta.pi.ln() + log_outcome_density(y, 1, 0, &rec.x, theta, model);
                    let l0 = (1.0 - theta.pi).ln()
                        + log_outcome_density(y, 0, 0, &rec.x, theta, model);
                    let hi = l1.max(l0);
                    ll += hi + ((l1 - hi).exp() + (l0 - hi).exp()).ln();
                }
                // y missing: log(π·1 + (1−π)·1) = 0
            }
        }
    }
    ll
}

/// EM fit output: parameters plus everything needed to report or test it.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: MixtureParams,
    /// Covariance of [β..., π, (σ)] from the inverse negative numeric
    /// Hessian of the observed-data log-likelihood; None when the Hessian
    /// is not negative definite (point estimates remain valid).
    pub vcov: Option<DMatrix<f64>>,
    pub param_names: Vec<String>,
    /// Observed-data log-likelihood after initialization and after each
    /// iteration; non-decreasing up to numerical slack.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl EmFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap()
    }

    /// Position of β_cz in the flat parameter layout.
    pub const CACE_IDX: usize = 2;

    /// The CACE: β̂_cz with a normal-theory interval from the Hessian SE.
    pub fn cace(&self, link: Link) -> Result<CaceEstimate> {
        let vcov = self.vcov.as_ref().ok_or_else(|| {
            Error::Numerical(
                "standard errors unavailable: Hessian not negative definite".into(),
            )
        })?;
        let se = vcov[(Self::CACE_IDX, Self::CACE_IDX)].sqrt();
        let mut est = CaceEstimate::normal_theory(
            Method::MlMixture,
            link.estimand(),
            self.params.beta_cz,
            se,
        );
        est.warnings = self.warnings.clone();
        Ok(est)
    }
}

/// One-shot maximum-likelihood fit of a fully completed dataset (every
/// class known, every outcome present).
///
/// With no latency the likelihood factorizes exactly into a Bernoulli part
/// for π and a GLM part for (β, σ), so the MLE is a single weighted GLM fit
/// plus a class count, and `beta_vcov` is the exact information-based
/// covariance of the β block — no EM and no numeric Hessian involved.
#[derive(Clone, Debug)]
pub struct CompletedFit {
    pub params: MixtureParams,
    /// Covariance of [β₀, β_c, β_cz, extras...] from the GLM fit.
    pub beta_vcov: DMatrix<f64>,
    pub n: usize,
    pub warnings: Vec<String>,
}

/// Fits a completed dataset directly (see [`CompletedFit`]). Errors if any
/// record still has a latent class or missing outcome.
pub fn fit_completed(ds: &Dataset, spec: &MixtureModelSpec) -> Result<CompletedFit> {
    let model = spec.resolve(ds)?;
    let n = ds.n();
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut compliers = 0usize;
    for rec in &ds.records {
        let known = rec.c.is_some() || rec.z == 1;
        if !known || rec.y.is_none() {
            return Err(Error::Data(format!(
                "record {} is not completed (latent class or missing outcome)",
                rec.id
            )));
        }
        let is_complier = match rec.c {
            Some(class) => class == ComplianceClass::Complier,
            None => rec.d == 1,
        };
        if is_complier {
            compliers += 1;
        }
    }
    let pseudo = build_pseudo_data(ds, &model)?;
    debug_assert!(pseudo.latent_half.iter().all(|t| t.is_none()));
    let fit = fit_weighted(&pseudo, &vec![1.0; pseudo.response.len()], spec.link)?;
    let pi = (compliers as f64 / n as f64)
        .clamp(1.0 / (n + 1) as f64, n as f64 / (n + 1) as f64);
    let params = params_from_fit(&fit, pi, model.x_idx.len(), spec.link);
    Ok(CompletedFit { params, beta_vcov: fit.vcov.clone(), n, warnings: fit.warnings })
}

/// Pseudo-data for the M-step GLM: known-class records contribute one row at
/// fixed weight 1; each latent record contributes a complier row (weight w)
/// and a never-taker row (weight 1−w).
struct PseudoData {
    design: DesignMatrix,
    response: Vec<f64>,
    /// Row tag: None for fixed rows, Some((record index, class half)) for
    /// the two halves of a latent record.
    latent_half: Vec<Option<(usize, ComplianceClass)>>,
}

fn build_pseudo_data(ds: &Dataset, model: &ResolvedModel) -> Result<PseudoData> {
    let p = 3 + model.x_idx.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut response = Vec::new();
    let mut latent_half: Vec<Option<(usize, ComplianceClass)>> = Vec::new();

    for (i, rec) in ds.records.iter().enumerate() {
        let Some(y) = rec.y else { continue };
        let known = match rec.c {
            Some(class) => Some(class.indicator()),
            None if rec.z == 1 => Some(rec.d),
            None => None,
        };
        let halves: &[(u8, Option<(usize, ComplianceClass)>)] = match known {
            Some(c) => &[(c, None)],
            None => &[
                (1, Some((i, ComplianceClass::Complier))),
                (0, Some((i, ComplianceClass::NeverTaker))),
            ],
        };
        for &(c, tag) in halves {
            rows.push(1.0);
            rows.push(c as f64);
            rows.push((c * rec.z) as f64);
            for &j in &model.x_idx {
                rows.push(rec.x[j]);
            }
            response.push(y);
            latent_half.push(tag);
        }
    }
    if response.is_empty() {
        return Err(Error::Data("no complete-outcome records to fit".into()));
    }
    let values = DMatrix::from_row_slice(response.len(), p, &rows);
    let mut names = vec!["beta0".to_string(), "beta_c".into(), "beta_cz".into()];
    names.extend(model.spec.extra_covariates.iter().cloned());
    Ok(PseudoData { design: DesignMatrix::new(values, names)?, response, latent_half })
}

fn fit_weighted(pseudo: &PseudoData, weights: &[f64], link: Link) -> Result<glm::FitResult> {
    match link {
        Link::Identity => glm::fit_linear(&pseudo.design, &pseudo.response, Some(weights)),
        Link::Logit => glm::fit_logistic(&pseudo.design, &pseudo.response, Some(weights)),
    }
}

fn params_from_fit(fit: &glm::FitResult, pi: f64, n_extra: usize, link: Link) -> MixtureParams {
    MixtureParams {
        beta0: fit.coef[0],
        beta_c: fit.coef[1],
        beta_cz: fit.coef[2],
        extra: (0..n_extra).map(|k| fit.coef[3 + k]).collect(),
        pi,
        // σ floor keeps densities finite on degenerate outcomes
        sigma: if link == Link::Identity { Some(fit.sigma.unwrap().max(1e-6)) } else { None },
    }
}

/// Maximum-likelihood fit of the mixture model by EM.
///
/// E-step: posterior complier weights for latent control records (missing-y
/// records carry weight π — they hold no outcome information). M-step: a
/// weighted GLM on duplicated pseudo-records, plus π set to the mean class
/// weight across all records (known classes counted as 0/1). Iterates until
/// the observed-data log-likelihood changes by less than 1e-8 and the
/// parameters settle (sup-norm change below 1e-8), capped at 500 iterations.
/// Standard errors come from the numeric Hessian of the observed-data
/// log-likelihood at the optimum.
///
/// Records with missing y contribute to π only; outcome imputation is
/// deliberately NOT done here — the imputation and Bayesian modules own it.
pub fn em_fit(ds: &Dataset, spec: &MixtureModelSpec) -> Result<EmFit> {
    let model = spec.resolve(ds)?;
    let link = spec.link;
    let n_extra = model.x_idx.len();
    let n = ds.n();
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let n_known = ds.records.iter().filter(|r| r.c.is_some() || r.z == 1).count();
    if n_known == 0 {
        return Err(Error::Data(
            "no records with an observed class: compliance fraction unidentified".into(),
        ));
    }

    let pseudo = build_pseudo_data(ds, &model)?;
    let n_rows = pseudo.response.len();
    let mut weights = vec![1.0; n_rows];

    // Initialization: π from the known-class compliance fraction (pulled off
    // the boundary); β from a fit treating every latent record as a
    // complier; σ from that fit's residual SD.
    let n_known_complier = ds
        .records
        .iter()
        .filter(|r| match r.c {
            Some(class) => class == ComplianceClass::Complier,
            None => r.z == 1 && r.d == 1,
        })
        .count();
    let mut pi = (n_known_complier as f64 / n_known as f64)
        .clamp(1.0 / (n + 1) as f64, n as f64 / (n + 1) as f64);
    for (row, tag) in pseudo.latent_half.iter().enumerate() {
        weights[row] = match tag {
            None | Some((_, ComplianceClass::Complier)) => 1.0,
            Some((_, ComplianceClass::NeverTaker)) => 0.0,
        };
    }
    let init_fit = fit_weighted(&pseudo, &weights, link)?;
    let mut theta = params_from_fit(&init_fit, pi, n_extra, link);

    let mut warnings: Vec<String> = Vec::new();
    let mut trace = vec![observed_loglik(ds, &theta, &model)];
    let mut converged = false;
    let mut iterations = 0;
    let mut post = vec![0.0; n];

    for iter in 1..=EM_MAX_ITER {
        iterations = iter;

        // E-step.
        let mut weight_sum = 0.0;
        for (i, rec) in ds.records.iter().enumerate() {
            post[i] = class_weight(rec, &theta, &model);
            weight_sum += post[i];
        }
        // M-step: π, then β (and σ) on the re-weighted pseudo-data.
        pi = (weight_sum / n as f64).clamp(1e-12, 1.0 - 1e-12);
        for (row, tag) in pseudo.latent_half.iter().enumerate() {
            if let Some((i, half)) = tag {
                weights[row] = match half {
                    ComplianceClass::Complier => post[*i],
                    ComplianceClass::NeverTaker => 1.0 - post[*i],
                };
            }
        }
        let fit = fit_weighted(&pseudo, &weights, link)?;
        for w in &fit.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        let prev_vec = theta.to_vec();
        theta = params_from_fit(&fit, pi, n_extra, link);

        let ll = observed_loglik(ds, &theta, &model);
        let prev_ll = *trace.last().unwrap();
        trace.push(ll);
        let param_change = theta
            .to_vec()
            .iter()
            .zip(&prev_vec)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        if (ll - prev_ll).abs() < EM_LOGLIK_TOL && param_change < EM_PARAM_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("EM did not converge in {EM_MAX_ITER} iterations"));
    }

    // Standard errors from the observed-data log-likelihood curvature.
    let names = MixtureParams::param_names(&spec.extra_covariates, link);
    let theta_vec = theta.to_vec();
    let ll_fn = |v: &[f64]| {
        let t = MixtureParams::from_vec(v, n_extra, link);
        if !(t.pi > 0.0 && t.pi < 1.0) || t.sigma.is_some_and(|s| s <= 0.0) {
            return f64::NEG_INFINITY;
        }
        observed_loglik(ds, &t, &model)
    };
    let vcov = match glm::numeric_hessian(ll_fn, &theta_vec, HESSIAN_STEP) {
        Ok(hess) => match (-hess).cholesky() {
            Some(chol) => {
                let dim = theta_vec.len();
                Some(chol.solve(&DMatrix::identity(dim, dim)))
            }
            None => {
                warnings
                    .push("Hessian not negative definite: standard errors unavailable".into());
                None
            }
        },
        Err(e) => {
            warnings.push(format!("Hessian evaluation failed: {e}"));
            None
        }
    };

    Ok(EmFit {
        params: theta,
        vcov,
        param_names: names,
        loglik_trace: trace,
        converged,
        iterations,
        warnings,
    })
}
