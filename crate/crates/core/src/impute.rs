//! Multiple imputation of latent compliance classes and missing outcomes,
//! with imputation draws generated from the same mixture model that is later
//! fitted to each completed dataset — so imputation and analysis cannot
//! disagree about the data-generating structure. Also provides the plain
//! per-arm outcome imputer used ahead of the two-stage estimators.
//!
//! The chained-equations cycle alternates three moves: draw substantive-model
//! parameters from their completed-data distribution, redraw every latent
//! control-arm class from its posterior given the current outcome, and
//! redraw every originally-missing outcome from the substantive model given
//! the current class. After `iterations` cycles the stream emits one
//! completed dataset; `m` independent streams give the M imputations.
//!
//! Class draws use rejection sampling for continuous outcomes (propose from
//! the class prior, accept against the outcome density) and the closed-form
//! posterior for binary outcomes; the two are distributionally identical,
//! which the tests check by goodness of fit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{ComplianceClass, Dataset, TrialRecord};
use crate::error::{Error, Result};
use crate::glm::{self, expit, logit, DesignMatrix};
use crate::mixture::{
    class_posterior, fit_completed, outcome_density, Link, MixtureModelSpec, MixtureParams,
    ResolvedModel,
};
use crate::rng::derive_rng;

/// How substantive-model parameters are perturbed between cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DrawMechanism {
    /// Multivariate normal around the completed-data MLE with its asymptotic
    /// covariance (σ on the log scale, π on the logit scale).
    #[default]
    AsymptoticNormal,
    /// Refit on a with-replacement resample of the completed data.
    Bootstrap,
}

#[derive(Clone, Debug)]
pub struct ImputationConfig {
    /// Number of imputed datasets.
    pub m: usize,
    /// Chained-equation cycles per imputation stream.
    pub iterations: usize,
    /// Attempts before a rejection-sampled class draw falls back to the
    /// closed-form draw.
    pub rejection_cap: usize,
    /// Covariates added to the imputation model on top of the analysis
    /// model's terms.
    pub aux_covariates: Vec<String>,
    pub seed: u64,
    pub draw: DrawMechanism,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            m: 10,
            iterations: 250,
            rejection_cap: 5000,
            aux_covariates: Vec::new(),
            seed: 0,
            draw: DrawMechanism::AsymptoticNormal,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Data(format!(
                "need at least 2 imputations to pool, got m={}",
                self.m
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Data("imputation needs at least 1 cycle".into()));
        }
        if self.rejection_cap < 1 {
            return Err(Error::Data("rejection cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// The M completed datasets plus the draws and diagnostics behind them.
#[derive(Clone, Debug)]
pub struct ImputedSet {
    /// Completed datasets: every control-arm class filled in, every outcome
    /// present.
    pub datasets: Vec<Dataset>,
    /// The final substantive-model parameter draw behind each dataset.
    /// Empty when nothing was imputed (the datasets are plain copies) and
    /// for the per-arm outcome imputer, whose draws are arm-level
    /// regression coefficients rather than mixture parameters.
    pub param_draws: Vec<MixtureParams>,
    /// Per stream, per cycle: fraction of control records currently imputed
    /// as compliers — the trace statistic for stationarity checks.
    pub class_trace: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Working-scale normal approximation to the completed-data distribution of
/// the maximum-likelihood estimate: coordinates [β..., logit π, (ln σ)].
///
/// On completed data the likelihood factorizes exactly into a Bernoulli part
/// for π and a GLM part for (β, σ), so the covariance is block diagonal:
/// the GLM covariance for β, 1/(n·π̂(1−π̂)) for logit π̂, and 1/(2n) for
/// ln σ̂, with zero cross-blocks.
struct ParamPosterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    n_extra: usize,
    link: Link,
    warnings: Vec<String>,
}

impl ParamPosterior {
    fn estimate(ds: &Dataset, spec: &MixtureModelSpec) -> Result<ParamPosterior> {
        let fit = fit_completed(ds, spec)?;
        let n = fit.n as f64;
        let k_beta = fit.beta_vcov.nrows();
        let has_sigma = spec.link == Link::Identity;
        let dim = k_beta + 1 + usize::from(has_sigma);

        let flat = fit.params.to_vec();
        let mut mean = DVector::zeros(dim);
        let mut cov = DMatrix::zeros(dim, dim);
        for (j, value) in flat.iter().take(k_beta).enumerate() {
            mean[j] = *value;
        }
        cov.view_mut((0, 0), (k_beta, k_beta)).copy_from(&fit.beta_vcov);
        let pi = fit.params.pi;
        mean[k_beta] = logit(pi);
        cov[(k_beta, k_beta)] = 1.0 / (n * pi * (1.0 - pi));
        if has_sigma {
            let sigma = fit.params.sigma.expect("identity link carries sigma");
            mean[k_beta + 1] = sigma.ln();
            cov[(k_beta + 1, k_beta + 1)] = 1.0 / (2.0 * n);
        }
        Ok(ParamPosterior {
            mean,
            cov,
            n_extra: k_beta - 3,
            link: spec.link,
            warnings: fit.warnings,
        })
    }

    /// Draws parameters; the flag reports a fallback to the mean (improper)
    /// after a covariance factorization failure. A zero covariance returns
    /// the mean exactly.
    fn draw<R: Rng>(&self, rng: &mut R) -> (MixtureParams, bool) {
        let (v, fell_back) = if self.cov.iter().all(|&c| c == 0.0) {
            (self.mean.clone(), false)
        } else {
            match glm::mvn_draw(&self.mean, &self.cov, rng) {
                Ok(v) => (v, false),
                Err(_) => (self.mean.clone(), true),
            }
        };
        let k_beta = 3 + self.n_extra;
        let params = MixtureParams {
            beta0: v[0],
            beta_c: v[1],
            beta_cz: v[2],
            extra: (0..self.n_extra).map(|k| v[3 + k]).collect(),
            pi: expit(v[k_beta]).clamp(1e-12, 1.0 - 1e-12),
            sigma: (self.link == Link::Identity).then(|| v[k_beta + 1].exp().max(1e-6)),
        };
        (params, fell_back)
    }
}

/// One proper parameter draw for a completed dataset: multivariate normal
/// around the MLE with the MLE covariance (σ drawn on the log scale, π on
/// the logit scale). A covariance failure falls back to the MLE point and
/// says so in the returned warnings.
pub fn draw_params<R: Rng>(
    ds: &Dataset,
    spec: &MixtureModelSpec,
    rng: &mut R,
) -> Result<(MixtureParams, Vec<String>)> {
    let posterior = ParamPosterior::estimate(ds, spec)?;
    let mut warnings = posterior.warnings.clone();
    let (params, fell_back) = posterior.draw(rng);
    if fell_back {
        warnings.push(
            "parameter covariance draw failed; using the maximum-likelihood point".into(),
        );
    }
    Ok((params, warnings))
}

/// Internal draw dispatch used inside the cycles. Returns the draw, whether
/// it fell back to a point estimate, and any fit warnings.
fn posterior_draw<R: Rng>(
    ds: &Dataset,
    spec: &MixtureModelSpec,
    rng: &mut R,
    mechanism: DrawMechanism,
) -> Result<(MixtureParams, bool, Vec<String>)> {
    match mechanism {
        DrawMechanism::AsymptoticNormal => {
            let posterior = ParamPosterior::estimate(ds, spec)?;
            let (params, fell_back) = posterior.draw(rng);
            Ok((params, fell_back, posterior.warnings))
        }
        DrawMechanism::Bootstrap => {
            let n = ds.n();
            for _ in 0..10 {
                let resample = Dataset {
                    records: (0..n).map(|_| ds.records[rng.gen_range(0..n)].clone()).collect(),
                    outcome_kind: ds.outcome_kind,
                    covariate_names: ds.covariate_names.clone(),
                };
                if let Ok(fit) = fit_completed(&resample, spec) {
                    return Ok((fit.params, false, fit.warnings));
                }
            }
            // resamples keep degenerating (tiny data); use the full-data MLE
            let fit = fit_completed(ds, spec)?;
            Ok((fit.params, true, fit.warnings))
        }
    }
}

/// Closed-form class draw for a control record: Bernoulli at the class
/// posterior given the record's current outcome.
pub fn impute_class_direct<R: Rng>(
    record: &TrialRecord,
    theta: &MixtureParams,
    model: &ResolvedModel,
    rng: &mut R,
) -> ComplianceClass {
    debug_assert_eq!(record.z, 0, "class imputation applies to control records only");
    let p = class_posterior(record, theta, model);
    ComplianceClass::from_indicator(u8::from(rng.gen::<f64>() < p))
}

/// Rejection-sampled class draw: propose from the class prior Bern(π),
/// accept with probability f(y|c*)/max(f₁,f₀). Up to `cap` attempts; on
/// exhaustion (or degenerate densities) falls back to the closed-form draw,
/// reported through the returned flag.
///
/// The envelope max(f₁,f₀) dominates both component densities at the
/// record's y, so overall acceptance is at least 1/2 per attempt and the
/// accepted draws follow exactly the closed-form posterior.
pub fn impute_class_rejection<R: Rng>(
    record: &TrialRecord,
    theta: &MixtureParams,
    model: &ResolvedModel,
    rng: &mut R,
    cap: usize,
) -> (ComplianceClass, bool) {
    debug_assert_eq!(record.z, 0, "class imputation applies to control records only");
    let Some(y) = record.y else {
        // no outcome to condition on: the posterior is the prior, which the
        // closed-form draw samples exactly
        return (impute_class_direct(record, theta, model, rng), false);
    };
    let f1 = outcome_density(y, 1, 0, &record.x, theta, model);
    let f0 = outcome_density(y, 0, 0, &record.x, theta, model);
    let f_max = f1.max(f0);
    if f_max <= 0.0 || !f_max.is_finite() {
        // both densities underflowed (outcome far in the tails): the density
        // ratio is unusable here, but the log-scale closed form still is
        return (impute_class_direct(record, theta, model, rng), true);
    }
    for _ in 0..cap {
        let proposal = u8::from(rng.gen::<f64>() < theta.pi);
        let f = if proposal == 1 { f1 } else { f0 };
        if rng.gen::<f64>() < f / f_max {
            return (ComplianceClass::from_indicator(proposal), false);
        }
    }
    (impute_class_direct(record, theta, model, rng), true)
}

/// Draws an outcome from the substantive model given the record's current
/// class, arm, and covariates: N(η, σ²) under the identity link, Bern(expit
/// η) under the logit link.
pub fn impute_outcome<R: Rng>(
    record: &TrialRecord,
    theta: &MixtureParams,
    model: &ResolvedModel,
    rng: &mut R,
) -> f64 {
    let c = record.c.expect("outcome imputation requires a working class").indicator();
    let eta = theta.eta(c, record.z, &record.x, model);
    match model.spec.link {
        Link::Identity => {
            let sigma = theta.sigma.expect("identity link carries sigma");
            eta + sigma * rng.sample::<f64, _>(StandardNormal)
        }
        Link::Logit => f64::from(rng.gen::<f64>() < expit(eta)),
    }
}

/// Runs the full latent-class multiple imputation: M independent streams,
/// each initialized by resampling observed values and then cycled through
/// {parameter draw; class draws; outcome draws} `iterations` times.
///
/// The imputation model is the analysis model plus `cfg.aux_covariates`;
/// the analysis fitted downstream to each completed dataset may drop the
/// auxiliaries again. Control-arm classes present on input are treated as
/// working values and re-imputed — the class is never observed under
/// control. Observed outcomes and the active arm's classes are never
/// modified. A failed fit inside a stream is retried once from a fresh
/// initialization before the stream (and the run) errors out.
pub fn smc_mic_run(
    ds: &Dataset,
    spec: &MixtureModelSpec,
    cfg: &ImputationConfig,
) -> Result<ImputedSet> {
    cfg.validate()?;
    let imp_spec = imputation_spec(spec, &cfg.aux_covariates);
    imp_spec.resolve(ds)?; // fail fast on bad names or link

    let latent_idx: Vec<usize> =
        ds.records.iter().enumerate().filter(|(_, r)| r.z == 0).map(|(i, _)| i).collect();
    let missing_idx: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.y.is_none())
        .map(|(i, _)| i)
        .collect();

    let z1_classes: Vec<ComplianceClass> = ds
        .records
        .iter()
        .filter(|r| r.z == 1)
        .map(|r| ComplianceClass::from_indicator(r.d))
        .collect();
    let observed_y: Vec<f64> = ds.records.iter().filter_map(|r| r.y).collect();
    if !latent_idx.is_empty() && z1_classes.is_empty() {
        return Err(Error::Data(
            "no active-arm records to initialize latent classes from".into(),
        ));
    }
    if !missing_idx.is_empty() && observed_y.is_empty() {
        return Err(Error::Data("every outcome is missing; nothing to resample from".into()));
    }

    if latent_idx.is_empty() && missing_idx.is_empty() {
        // nothing to impute — only possible with no control records at all,
        // where the class-by-arm term is collinear with the class term and
        // no mixture fit exists; emit plain copies and say so
        let mut out = ds.clone();
        for rec in &mut out.records {
            if rec.z == 1 && rec.c.is_none() {
                rec.c = Some(ComplianceClass::from_indicator(rec.d));
            }
        }
        return Ok(ImputedSet {
            datasets: vec![out; cfg.m],
            param_draws: Vec::new(),
            class_trace: vec![Vec::new(); cfg.m],
            warnings: vec!["nothing to impute: input is already complete".into()],
        });
    }

    let streams: Result<Vec<StreamOutput>> = (0..cfg.m)
        .into_par_iter()
        .map(|stream| {
            let mut rng = derive_rng(cfg.seed, stream as u64);
            run_stream(
                ds,
                &imp_spec,
                cfg,
                &latent_idx,
                &missing_idx,
                &z1_classes,
                &observed_y,
                &mut rng,
            )
        })
        .collect();
    let streams = streams?;

    let mut datasets = Vec::with_capacity(cfg.m);
    let mut param_draws = Vec::with_capacity(cfg.m);
    let mut class_trace = Vec::with_capacity(cfg.m);
    let mut warnings = Vec::new();
    for (stream, out) in streams.into_iter().enumerate() {
        merge_stream_warnings(
            &mut warnings,
            stream,
            out.fallback_draws,
            out.rejection_fallbacks,
            &out.fit_warnings,
        );
        datasets.push(out.dataset);
        param_draws.push(out.theta);
        class_trace.push(out.trace);
    }
    Ok(ImputedSet { datasets, param_draws, class_trace, warnings })
}

/// The imputation model: the analysis model plus any auxiliary covariates
/// not already present.
fn imputation_spec(spec: &MixtureModelSpec, aux: &[String]) -> MixtureModelSpec {
    let mut extra = spec.extra_covariates.clone();
    for name in aux {
        if !extra.contains(name) {
            extra.push(name.clone());
        }
    }
    MixtureModelSpec { link: spec.link, extra_covariates: extra }
}

struct StreamOutput {
    dataset: Dataset,
    theta: MixtureParams,
    trace: Vec<f64>,
    fallback_draws: usize,
    rejection_fallbacks: usize,
    fit_warnings: Vec<String>,
}

fn merge_stream_warnings(
    warnings: &mut Vec<String>,
    stream: usize,
    fallback_draws: usize,
    rejection_fallbacks: usize,
    fit_warnings: &[String],
) {
    if fallback_draws > 0 {
        warnings.push(format!(
            "stream {stream}: {fallback_draws} parameter draw(s) fell back to the MLE point"
        ));
    }
    if rejection_fallbacks > 0 {
        warnings.push(format!(
            "stream {stream}: {rejection_fallbacks} class draw(s) hit the rejection cap and used the closed form"
        ));
    }
    for w in fit_warnings {
        let tagged = format!("stream {stream}: {w}");
        if !warnings.contains(&tagged) {
            warnings.push(tagged);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_stream(
    ds: &Dataset,
    imp_spec: &MixtureModelSpec,
    cfg: &ImputationConfig,
    latent_idx: &[usize],
    missing_idx: &[usize],
    z1_classes: &[ComplianceClass],
    observed_y: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<StreamOutput> {
    let mut last_err = None;
    for _attempt in 0..2 {
        match try_stream(ds, imp_spec, cfg, latent_idx, missing_idx, z1_classes, observed_y, rng)
        {
            Ok(out) => return Ok(out),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("two attempts were made"))
}

#[allow(clippy::too_many_arguments)]
fn try_stream(
    ds: &Dataset,
    imp_spec: &MixtureModelSpec,
    cfg: &ImputationConfig,
    latent_idx: &[usize],
    missing_idx: &[usize],
    z1_classes: &[ComplianceClass],
    observed_y: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<StreamOutput> {
    let model = imp_spec.resolve(ds)?;
    let mut work = ds.clone();
    for rec in &mut work.records {
        if rec.z == 1 {
            rec.c = Some(ComplianceClass::from_indicator(rec.d));
        }
    }
    // initialize by resampling observed values
    for &i in latent_idx {
        work.records[i].c = Some(z1_classes[rng.gen_range(0..z1_classes.len())]);
    }
    for &i in missing_idx {
        work.records[i].y = Some(observed_y[rng.gen_range(0..observed_y.len())]);
    }

    let mut trace = Vec::with_capacity(if latent_idx.is_empty() { 0 } else { cfg.iterations });
    let mut fallback_draws = 0usize;
    let mut rejection_fallbacks = 0usize;
    let mut fit_warnings: Vec<String> = Vec::new();
    let mut theta_final = None;

    for _cycle in 0..cfg.iterations {
        let (theta, fell_back, warns) = posterior_draw(&work, imp_spec, rng, cfg.draw)?;
        fallback_draws += usize::from(fell_back);
        for w in warns {
            if !fit_warnings.contains(&w) {
                fit_warnings.push(w);
            }
        }

        for &i in latent_idx {
            let (class, fell_back) = {
                let rec = &work.records[i];
                match imp_spec.link {
                    Link::Identity => {
                        impute_class_rejection(rec, &theta, &model, rng, cfg.rejection_cap)
                    }
                    Link::Logit => (impute_class_direct(rec, &theta, &model, rng), false),
                }
            };
            rejection_fallbacks += usize::from(fell_back);
            work.records[i].c = Some(class);
        }
        for &i in missing_idx {
            let y = impute_outcome(&work.records[i], &theta, &model, rng);
            work.records[i].y = Some(y);
        }
        if !latent_idx.is_empty() {
            let compliers = latent_idx
                .iter()
                .filter(|&&i| work.records[i].c == Some(ComplianceClass::Complier))
                .count();
            trace.push(compliers as f64 / latent_idx.len() as f64);
        }
        theta_final = Some(theta);
    }

    Ok(StreamOutput {
        dataset: work,
        theta: theta_final.expect("at least one cycle ran"),
        trace,
        fallback_draws,
        rejection_fallbacks,
        fit_warnings,
    })
}

/// Multiple imputation of missing outcomes only, for use ahead of the
/// two-stage estimators: within each randomization arm, a regression of the
/// outcome on treatment received and the configured auxiliary covariates,
/// with proper parameter draws (σ² from its scaled inverse chi-square, β
/// from its normal) before each imputation.
///
/// Predictors constant among an arm's complete cases (treatment received in
/// the control arm, always 0) are dropped from that arm's model. An arm
/// whose complete cases number fewer than the model's parameter count plus
/// two cannot support a proper draw and is an error.
pub fn fcs_impute_outcome_for_ts(ds: &Dataset, cfg: &ImputationConfig) -> Result<ImputedSet> {
    cfg.validate()?;
    let aux_idx: Vec<usize> = cfg
        .aux_covariates
        .iter()
        .map(|n| ds.covariate_index(n))
        .collect::<Result<Vec<_>>>()?;

    if !ds.has_missing_y() {
        return Ok(ImputedSet {
            datasets: vec![ds.clone(); cfg.m],
            param_draws: Vec::new(),
            class_trace: vec![Vec::new(); cfg.m],
            warnings: Vec::new(),
        });
    }

    let streams: Result<Vec<(Dataset, Vec<String>)>> = (0..cfg.m)
        .into_par_iter()
        .map(|stream| {
            let mut rng = derive_rng(cfg.seed, stream as u64);
            ts_outcome_stream(ds, &aux_idx, &cfg.aux_covariates, &mut rng)
        })
        .collect();
    let streams = streams?;

    let mut datasets = Vec::with_capacity(cfg.m);
    let mut warnings = Vec::new();
    for (stream, (dataset, stream_warnings)) in streams.into_iter().enumerate() {
        for w in stream_warnings {
            let tagged = format!("stream {stream}: {w}");
            if !warnings.contains(&tagged) {
                warnings.push(tagged);
            }
        }
        datasets.push(dataset);
    }
    Ok(ImputedSet {
        datasets,
        param_draws: Vec::new(),
        class_trace: vec![Vec::new(); cfg.m],
        warnings,
    })
}

/// Named accessor for one candidate column of the per-arm imputation model.
type Predictor = (String, Box<dyn Fn(&TrialRecord) -> f64>);

fn ts_outcome_stream(
    ds: &Dataset,
    aux_idx: &[usize],
    aux_names: &[String],
    rng: &mut ChaCha12Rng,
) -> Result<(Dataset, Vec<String>)> {
    let mut out = ds.clone();
    let mut warnings = Vec::new();

    for arm in [0u8, 1u8] {
        let members: Vec<usize> = ds
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.z == arm)
            .map(|(i, _)| i)
            .collect();
        let complete: Vec<usize> =
            members.iter().copied().filter(|&i| ds.records[i].y.is_some()).collect();
        let missing: Vec<usize> =
            members.iter().copied().filter(|&i| ds.records[i].y.is_none()).collect();
        if missing.is_empty() {
            continue;
        }

        // candidate predictors: treatment received, then the auxiliaries;
        // drop any that are constant among this arm's complete cases
        let mut predictors: Vec<Predictor> =
            vec![("d".to_string(), Box::new(|r: &TrialRecord| r.d as f64))];
        for (name, &j) in aux_names.iter().zip(aux_idx) {
            predictors.push((name.clone(), Box::new(move |r: &TrialRecord| r.x[j])));
        }
        let kept: Vec<&Predictor> = predictors
            .iter()
            .filter(|(_, f)| {
                let first = f(&ds.records[complete[0]]);
                complete.iter().any(|&i| f(&ds.records[i]) != first)
            })
            .collect();

        let p = 1 + kept.len();
        if complete.len() < p + 2 {
            return Err(Error::Data(format!(
                "arm z={arm} has {} complete outcomes for a {p}-parameter imputation model; \
                 need at least {}",
                complete.len(),
                p + 2
            )));
        }

        let mut columns: Vec<(&str, Vec<f64>)> = vec![("intercept", vec![1.0; complete.len()])];
        for (name, f) in &kept {
            columns.push((name, complete.iter().map(|&i| f(&ds.records[i])).collect()));
        }
        let column_refs: Vec<(&str, &[f64])> =
            columns.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        let design = DesignMatrix::from_columns(&column_refs)?;
        let y: Vec<f64> = complete.iter().map(|&i| ds.records[i].y.unwrap()).collect();

        match ds.outcome_kind {
            crate::data::OutcomeKind::Continuous => {
                let (coef, xtx_inv, rss) = glm::wls_solve(&design, &y, &vec![1.0; y.len()])?;
                let nu = (complete.len() - p) as f64;
                let chi2: f64 = ChiSquared::new(nu)
                    .map_err(|e| Error::Numerical(format!("chi-square draw: {e}")))?
                    .sample(rng);
                let sigma2_star = rss / chi2;
                let beta_star = glm::mvn_draw(&coef, &(&xtx_inv * sigma2_star), rng)?;
                for &i in &missing {
                    let mu = predict(&beta_star, &kept, &ds.records[i]);
                    let draw = mu + sigma2_star.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    out.records[i].y = Some(draw);
                }
            }
            crate::data::OutcomeKind::Binary => {
                let fit = glm::fit_logistic(&design, &y, None)?;
                for w in &fit.warnings {
                    if !warnings.contains(w) {
                        warnings.push(w.clone());
                    }
                }
                let beta_star = match glm::mvn_draw(&fit.coef, &fit.vcov, rng) {
                    Ok(b) => b,
                    Err(_) => {
                        warnings.push(format!(
                            "arm z={arm}: coefficient covariance draw failed; using the point fit"
                        ));
                        fit.coef.clone()
                    }
                };
                for &i in &missing {
                    let eta = predict(&beta_star, &kept, &ds.records[i]);
                    out.records[i].y = Some(f64::from(rng.gen::<f64>() < expit(eta)));
                }
            }
        }
    }
    Ok((out, warnings))
}

fn predict(beta: &DVector<f64>, kept: &[&Predictor], rec: &TrialRecord) -> f64 {
    let mut eta = beta[0];
    for (k, (_, f)) in kept.iter().enumerate() {
        eta += beta[k + 1] * f(rec);
    }
    eta
}
