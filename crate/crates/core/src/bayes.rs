//! Bayesian estimation of the mixture model by data-augmentation MCMC.
//!
//! Each iteration augments the data with the latent control-arm classes and
//! any missing outcomes, then updates the parameters: π from its conjugate
//! Beta given the class draws, β by a conjugate multivariate normal step
//! under the identity link, and the outcome precision from its conjugate
//! Gamma (optionally a Metropolis step on log σ when the prior is placed on
//! the standard deviation itself).
//!
//! Under the logit link the coefficient update is a joint adaptive
//! random-walk Metropolis step, and it deliberately targets the conditional
//! with the latent classes and missing outcomes integrated out (a partially
//! collapsed Gibbs move) rather than the completed-data conditional. The
//! collapsed target costs a two-component mixture term per control record,
//! but it removes a feedback trap: conditioned on classes drawn to fit a
//! far-from-mode coefficient state — exactly where a dispersed chain starts
//! — the completed-data conditional keeps endorsing that state, and a
//! random-walk chain can stall there for thousands of iterations. Validity
//! of the sweep order: the classes are redrawn from their exact conditional
//! at the top of every iteration, before the class probability (the only
//! update that reads them) is touched.
//!
//! The logit step also anneals during warm-up: the likelihood's weight in
//! the Metropolis ratio ramps from 0 to 1 over the first half of burn-in.
//! The mixture likelihood is exponentially flat in any coefficient direction
//! that has already driven a class's component weights to zero, and a
//! random walk started out there (dispersed starts again) would otherwise
//! have to diffuse across the flat stretch unaided. Under the ramp the
//! prior pulls the chain into its bulk first, where the likelihood surface
//! has usable gradients. Retained samples are always drawn under the exact,
//! fully weighted target. The ramp is sized to the default run lengths:
//! logit-link runs cut far below 10,000 iterations with 5,000 burn-in can
//! still leave a dispersed start stranded, and such runs announce
//! themselves through the R̂ convergence warning.
//!
//! Chains run in parallel on independent derived RNG streams; the first
//! chain starts from the EM estimates and the others from prior draws, so
//! the starts are overdispersed and the Gelman–Rubin diagnostic means
//! something.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma as GammaDist, StandardNormal};
use rayon::prelude::*;

use crate::data::{ComplianceClass, Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimate::{CaceEstimate, Method};
use crate::glm::{percentile, softplus};
use crate::impute::impute_outcome;
use crate::mixture::{class_posterior, em_fit, Link, MixtureModelSpec, MixtureParams, ResolvedModel};
use crate::rng::derive_rng;

/// Metropolis acceptance rate targeted by the burn-in scale adaptation.
const TARGET_ACCEPTANCE: f64 = 0.3;

/// One chain's output: retained samples plus its Metropolis acceptance rate
/// (None under the identity link's conjugate updates).
type ChainDraws = (Vec<Vec<f64>>, Option<f64>);

/// Prior hyperparameters. β coefficients get independent N(0, 1/precision)
/// priors; the class probability gets Beta(α, β); the outcome precision
/// 1/σ² gets Gamma(shape, rate) — or σ itself does, when
/// `sd_parameterization` is set.
#[derive(Clone, Copy, Debug)]
pub struct PriorSpec {
    pub beta_precision: f64,
    pub sigma_shape: f64,
    pub sigma_rate: f64,
    pub pi_alpha: f64,
    pub pi_beta: f64,
    /// Place the Gamma prior on σ instead of on the precision. Non-conjugate;
    /// sampled by Metropolis on log σ and noted in the output warnings.
    pub sd_parameterization: bool,
}

impl PriorSpec {
    /// Vague defaults: coefficient precision 0.001 for continuous outcomes
    /// and 0.02 for binary ones (log odds ratios rarely exceed single
    /// digits), Gamma(0.01, 0.01) on the outcome precision, Beta(1, 1) on
    /// the class probability.
    pub fn default_for(kind: OutcomeKind) -> PriorSpec {
        PriorSpec {
            beta_precision: match kind {
                OutcomeKind::Continuous => 0.001,
                OutcomeKind::Binary => 0.02,
            },
            sigma_shape: 0.01,
            sigma_rate: 0.01,
            pi_alpha: 1.0,
            pi_beta: 1.0,
            sd_parameterization: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta_precision,
            self.sigma_shape,
            self.sigma_rate,
            self.pi_alpha,
            self.pi_beta,
        ];
        if all.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Data("prior hyperparameters must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct McmcConfig {
    pub chains: usize,
    /// Total iterations per chain, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { chains: 2, iterations: 10_000, burn_in: 5_000, seed: 0 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Data("need at least one chain".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Data(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }
}

/// Post-burn-in samples from every chain.
#[derive(Clone, Debug)]
pub struct ChainSamples {
    /// Flat parameter layout [β₀, β_c, β_cz, extras..., π, (σ)].
    pub param_names: Vec<String>,
    /// `chains[k][t][j]`: chain k, retained iteration t, parameter j.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub link: Link,
    /// Mean Metropolis acceptance rate per chain after burn-in (logit link
    /// only; empty under the identity link's conjugate updates).
    pub acceptance: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Per-parameter posterior summary.
#[derive(Clone, Debug)]
pub struct ParameterSummary {
    pub name: String,
    pub median: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// Split Gelman–Rubin statistic; None when the parameter is constant
    /// across all samples.
    pub rhat: Option<f64>,
}

/// The headline estimate plus the per-parameter table.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    pub estimate: CaceEstimate,
    pub parameters: Vec<ParameterSummary>,
}

/// Runs the data-augmentation sampler and returns post-burn-in samples.
///
/// Control-arm classes and missing outcomes are redrawn every iteration;
/// observed values never change. Any class values supplied on control
/// records are ignored (the class is never observed under control). A
/// non-finite parameter state aborts with a diagnostic naming the chain and
/// iteration.
pub fn gibbs_run(
    ds: &Dataset,
    spec: &MixtureModelSpec,
    priors: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<ChainSamples> {
    priors.validate()?;
    cfg.validate()?;
    let model = spec.resolve(ds)?;
    let n_extra = model.x_idx.len();
    let p = 3 + n_extra;

    let mut warnings: Vec<String> = Vec::new();
    if priors.sd_parameterization && spec.link == Link::Identity {
        warnings.push("Gamma prior placed on σ (SD parameterization), sampled by Metropolis".into());
    }

    // EM once: starting point for chain 0 and the Metropolis proposal shape
    let em = em_fit(ds, spec).ok();
    if em.is_none() {
        warnings.push("EM initialization failed; every chain starts from prior draws".into());
    }
    let proposal_chol = proposal_cholesky(em.as_ref(), p);

    let retained = cfg.iterations - cfg.burn_in;
    let chain_results: Result<Vec<ChainDraws>> = (0..cfg.chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = derive_rng(cfg.seed, k as u64);
            let init = match (k, &em) {
                (0, Some(fit)) => fit.params.clone(),
                _ => prior_draw(spec, priors, n_extra, &mut rng),
            };
            run_chain(ds, spec, priors, cfg, k, init, &proposal_chol, retained, &mut rng)
        })
        .collect();
    let chain_results = chain_results?;

    let mut chains = Vec::with_capacity(cfg.chains);
    let mut acceptance = Vec::new();
    for (samples, acc) in chain_results {
        chains.push(samples);
        if let Some(a) = acc {
            acceptance.push(a);
        }
    }
    Ok(ChainSamples {
        param_names: MixtureParams::param_names(&spec.extra_covariates, spec.link),
        chains,
        link: spec.link,
        acceptance,
        warnings,
    })
}

/// Cholesky factor of the Metropolis proposal covariance: the EM coefficient
/// covariance block when available, else a small diagonal.
fn proposal_cholesky(em: Option<&crate::mixture::EmFit>, p: usize) -> DMatrix<f64> {
    if let Some(fit) = em {
        if let Some(vcov) = &fit.vcov {
            let beta_block = vcov.view((0, 0), (p, p)).clone_owned();
            if let Some(chol) = beta_block.cholesky() {
                return chol.unpack();
            }
        }
    }
    DMatrix::identity(p, p) * 0.1
}

fn prior_draw<R: Rng>(
    spec: &MixtureModelSpec,
    priors: &PriorSpec,
    n_extra: usize,
    rng: &mut R,
) -> MixtureParams {
    let sd = (1.0 / priors.beta_precision).sqrt();
    let mut draw = || sd * rng.sample::<f64, _>(StandardNormal);
    let beta0 = draw();
    let beta_c = draw();
    let beta_cz = draw();
    let extra = (0..n_extra).map(|_| draw()).collect();
    let pi = BetaDist::new(priors.pi_alpha, priors.pi_beta)
        .expect("validated hyperparameters")
        .sample(rng)
        .clamp(1e-6, 1.0 - 1e-6);
    let sigma = (spec.link == Link::Identity).then(|| {
        let g: f64 = GammaDist::new(priors.sigma_shape, 1.0 / priors.sigma_rate)
            .expect("validated hyperparameters")
            .sample(rng);
        let sigma = if priors.sd_parameterization { g } else { 1.0 / g.sqrt() };
        sigma.clamp(1e-6, 1e6)
    });
    MixtureParams { beta0, beta_c, beta_cz, extra, pi, sigma }
}

#[allow(clippy::too_many_arguments)]
fn run_chain(
    ds: &Dataset,
    spec: &MixtureModelSpec,
    priors: &PriorSpec,
    cfg: &McmcConfig,
    chain: usize,
    init: MixtureParams,
    proposal_chol: &DMatrix<f64>,
    retained: usize,
    rng: &mut ChaCha12Rng,
) -> Result<ChainDraws> {
    let model = spec.resolve(ds)?;
    let n = ds.n();
    let n_extra = model.x_idx.len();
    let p = 3 + n_extra;

    // working dataset: z=1 classes fixed from d, control classes and missing
    // outcomes redrawn each iteration
    let mut work = ds.clone();
    for rec in &mut work.records {
        if rec.z == 1 {
            rec.c = Some(ComplianceClass::from_indicator(rec.d));
        }
    }
    let latent_idx: Vec<usize> =
        ds.records.iter().enumerate().filter(|(_, r)| r.z == 0).map(|(i, _)| i).collect();
    let missing_idx: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.y.is_none())
        .map(|(i, _)| i)
        .collect();

    let identity = spec.link == Link::Identity;
    let mut theta = init;
    // initialize the augmented data from the initial parameters; under the
    // logit link missing outcomes stay unfilled — the collapsed coefficient
    // update never reads them, and leaving them empty lets the class draws
    // condition on the observed data alone
    for &i in &latent_idx {
        let p1 = class_posterior(&work.records[i], &theta, &model);
        work.records[i].c =
            Some(ComplianceClass::from_indicator(u8::from(rng.gen::<f64>() < p1)));
    }
    if identity {
        for &i in &missing_idx {
            let y = impute_outcome(&work.records[i], &theta, &model, rng);
            work.records[i].y = Some(y);
        }
    }

    // dense design matrix and outcome vector for the identity link's
    // conjugate updates; only the class column (and the outcome vector)
    // change between iterations — the class-by-arm column is identically
    // zero for control records. The logit link works off the records.
    let (mut x, mut y) = if identity {
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        for (i, rec) in work.records.iter().enumerate() {
            let c = rec.c.expect("all classes set").indicator();
            x[(i, 0)] = 1.0;
            x[(i, 1)] = c as f64;
            x[(i, 2)] = (c * rec.z) as f64;
            for (k, &j) in model.x_idx.iter().enumerate() {
                x[(i, 3 + k)] = rec.x[j];
            }
            y[i] = rec.y.expect("all outcomes set");
        }
        (x, y)
    } else {
        (DMatrix::zeros(0, 0), DVector::zeros(0))
    };

    let mut beta = DVector::from_vec(theta.to_vec()[..p].to_vec());
    let mut log_step = 0.0_f64; // Metropolis scale (log), adapted in burn-in
    let mut log_step_sigma = (0.2_f64).ln();
    let mut accepted = 0.0;
    let mut post_burn_proposals = 0.0;

    let mut samples = Vec::with_capacity(retained);
    for iter in 0..cfg.iterations {
        // (1) latent classes
        for &i in &latent_idx {
            let p1 = class_posterior(&work.records[i], &theta, &model);
            let c = u8::from(rng.gen::<f64>() < p1);
            work.records[i].c = Some(ComplianceClass::from_indicator(c));
            if identity {
                x[(i, 1)] = c as f64;
            }
        }
        // (2) missing outcomes: the identity link's conjugate updates need a
        // complete outcome vector; the logit link makes the draw for sweep
        // completeness but does not store it — its collapsed coefficient
        // update conditions on the observed outcomes only
        for &i in &missing_idx {
            let draw = impute_outcome(&work.records[i], &theta, &model, rng);
            if identity {
                work.records[i].y = Some(draw);
                y[i] = draw;
            }
        }

        // (3) class probability
        let compliers = work
            .records
            .iter()
            .filter(|r| r.c == Some(ComplianceClass::Complier))
            .count() as f64;
        theta.pi = BetaDist::new(priors.pi_alpha + compliers, priors.pi_beta + (n as f64 - compliers))
            .map_err(|e| Error::Numerical(format!("Beta draw failed: {e}")))?
            .sample(rng)
            .clamp(1e-12, 1.0 - 1e-12);

        // (4) coefficients
        match spec.link {
            Link::Identity => {
                let sigma = theta.sigma.expect("identity link carries sigma");
                let tau = 1.0 / (sigma * sigma);
                beta = conjugate_beta_draw(&x, &y, tau, priors.beta_precision, rng)?;
            }
            Link::Logit => {
                // collapsed target: observed-data likelihood at the current
                // class probability, recomputed every sweep because π moves
                let current_loglik = marginal_binary_loglik(&work, &model, &beta, theta.pi);
                // annealed warm start: the likelihood's weight ramps from 0
                // to 1 across the first half of burn-in, so a dispersed
                // start is first pulled into the prior bulk rather than
                // diffusing along the exponentially flat ridges the mixture
                // likelihood develops at extreme coefficients; the second
                // half of burn-in and every retained iteration use the
                // exact target
                let lambda = if 2 * iter >= cfg.burn_in {
                    1.0
                } else {
                    (2 * iter) as f64 / cfg.burn_in as f64
                };
                let step = log_step.exp();
                let z: DVector<f64> =
                    DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let proposal = &beta + proposal_chol * z * step;
                let prop_loglik = marginal_binary_loglik(&work, &model, &proposal, theta.pi);
                let log_ratio = lambda * (prop_loglik - current_loglik)
                    + 0.5
                        * priors.beta_precision
                        * (beta.norm_squared() - proposal.norm_squared());
                let alpha = log_ratio.min(0.0).exp();
                if rng.gen::<f64>() < alpha {
                    beta = proposal;
                }
                if iter < cfg.burn_in {
                    // Robbins-Monro drift toward the target acceptance rate
                    let gain = (iter as f64 + 1.0).powf(-0.6);
                    log_step = (log_step + gain * (alpha - TARGET_ACCEPTANCE)).clamp(-10.0, 10.0);
                } else {
                    accepted += alpha;
                    post_burn_proposals += 1.0;
                }
            }
        }
        theta.beta0 = beta[0];
        theta.beta_c = beta[1];
        theta.beta_cz = beta[2];
        for k in 0..n_extra {
            theta.extra[k] = beta[3 + k];
        }

        // (5) outcome scale
        if spec.link == Link::Identity {
            let resid = &y - &x * &beta;
            let rss = resid.norm_squared();
            if priors.sd_parameterization {
                let u = theta.sigma.expect("identity link carries sigma").ln();
                let (u_new, alpha) =
                    sigma_metropolis(u, rss, n as f64, priors, log_step_sigma.exp(), rng);
                theta.sigma = Some(u_new.exp().clamp(1e-6, 1e6));
                if iter < cfg.burn_in {
                    let gain = (iter as f64 + 1.0).powf(-0.6);
                    log_step_sigma =
                        (log_step_sigma + gain * (alpha - TARGET_ACCEPTANCE)).clamp(-10.0, 10.0);
                }
            } else {
                let shape = priors.sigma_shape + 0.5 * n as f64;
                let rate = priors.sigma_rate + 0.5 * rss;
                let tau: f64 = GammaDist::new(shape, 1.0 / rate)
                    .map_err(|e| Error::Numerical(format!("Gamma draw failed: {e}")))?
                    .sample(rng);
                theta.sigma = Some((1.0 / tau.sqrt()).clamp(1e-6, 1e6));
            }
        }

        let state = theta.to_vec();
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "chain {chain} reached a non-finite state at iteration {iter}"
            )));
        }
        if iter >= cfg.burn_in {
            samples.push(state);
        }
    }

    let acceptance = (spec.link == Link::Logit && post_burn_proposals > 0.0)
        .then(|| accepted / post_burn_proposals);
    Ok((samples, acceptance))
}

/// Observed-data Bernoulli log-likelihood of a coefficient vector, with the
/// latent control-arm classes integrated out against the complier
/// probability `pi`. Active-arm records carry their observed class; records
/// with missing outcomes contribute nothing (once the classes are integrated
/// away they hold no coefficient information). Terms constant in β — the
/// class-membership factors — are dropped, since they cancel in a Metropolis
/// ratio taken at fixed `pi`.
fn marginal_binary_loglik(
    ds: &Dataset,
    model: &ResolvedModel,
    beta: &DVector<f64>,
    pi: f64,
) -> f64 {
    let mut ll = 0.0;
    for rec in &ds.records {
        let Some(y) = rec.y else { continue };
        let mut base = beta[0];
        for (k, &j) in model.x_idx.iter().enumerate() {
            base += beta[3 + k] * rec.x[j];
        }
        if rec.z == 1 {
            // class observed from treatment received: a complier picks up
            // both class terms (c·z = c in the active arm)
            let eta = base + f64::from(rec.d) * (beta[1] + beta[2]);
            ll += y * eta - softplus(eta);
        } else {
            let comp = y * (base + beta[1]) - softplus(base + beta[1]);
            let never = y * base - softplus(base);
            let m = comp.max(never);
            ll += m + (pi * (comp - m).exp() + (1.0 - pi) * (never - m).exp()).ln();
        }
    }
    ll
}

/// Conjugate normal draw of β under the identity link: precision matrix
/// τXᵀX + κI, mean its inverse times τXᵀy.
fn conjugate_beta_draw<R: Rng>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    beta_precision: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let p = x.ncols();
    let a = x.transpose() * x * tau + DMatrix::identity(p, p) * beta_precision;
    let b = x.transpose() * y * tau;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("coefficient precision matrix not PD".into()))?;
    let mean = chol.solve(&b);
    // draw = mean + L⁻ᵀ z, giving covariance (LLᵀ)⁻¹ = A⁻¹
    let z: DVector<f64> = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = z;
    chol.l()
        .transpose()
        .solve_upper_triangular_mut(&mut w)
        .then_some(())
        .ok_or_else(|| Error::Numerical("triangular solve failed in coefficient draw".into()))?;
    Ok(mean + w)
}

/// One Metropolis step on u = ln σ under a Gamma prior on σ itself.
/// Returns the new u and the acceptance probability. The target drops
/// constants: (shape − n)·u − RSS·e^{−2u}/2 − rate·e^u.
fn sigma_metropolis<R: Rng>(
    u: f64,
    rss: f64,
    n: f64,
    priors: &PriorSpec,
    step: f64,
    rng: &mut R,
) -> (f64, f64) {
    let log_target = |v: f64| {
        (priors.sigma_shape - n) * v - 0.5 * rss * (-2.0 * v).exp() - priors.sigma_rate * v.exp()
    };
    let proposal = u + step * rng.sample::<f64, _>(StandardNormal);
    let log_ratio = log_target(proposal) - log_target(u);
    let alpha = log_ratio.min(0.0).exp();
    if rng.gen::<f64>() < alpha {
        (proposal, alpha)
    } else {
        (u, alpha)
    }
}

/// Pools post-burn-in samples into the reported estimate: posterior median
/// as the point, posterior SD as the standard error, equi-tailed 95%
/// credible interval, split Gelman–Rubin statistic per parameter. An R̂
/// above 1.1 on the treatment-effect coefficient attaches a convergence
/// warning; a constant parameter is flagged.
pub fn posterior_summary(samples: &ChainSamples) -> Result<PosteriorSummary> {
    if samples.chains.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 chains for convergence diagnostics, got {}",
            samples.chains.len()
        )));
    }
    if samples.chains.iter().any(|c| c.is_empty()) {
        return Err(Error::Data("a chain retained no samples".into()));
    }
    let n_params = samples.param_names.len();
    let mut warnings = samples.warnings.clone();
    let mut parameters = Vec::with_capacity(n_params);

    for j in 0..n_params {
        let per_chain: Vec<Vec<f64>> =
            samples.chains.iter().map(|c| c.iter().map(|row| row[j]).collect()).collect();
        let mut pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let m = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / m;
        let var = if pooled.len() > 1 {
            pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        let rhat = split_rhat(&per_chain);
        let name = &samples.param_names[j];
        if var == 0.0 {
            warnings.push(format!("parameter {name} is constant across all samples"));
        }
        parameters.push(ParameterSummary {
            name: name.clone(),
            median: percentile(&pooled, 0.5),
            sd: var.sqrt(),
            q025: percentile(&pooled, 0.025),
            q975: percentile(&pooled, 0.975),
            rhat,
        });
    }

    let cace_idx = crate::mixture::EmFit::CACE_IDX;
    if let Some(rhat) = parameters[cace_idx].rhat {
        if rhat > 1.1 {
            warnings.push(format!(
                "R-hat {rhat:.3} on {} exceeds 1.1: chains disagree, do not trust this run",
                parameters[cace_idx].name
            ));
        }
    }

    let cace = &parameters[cace_idx];
    let estimate = CaceEstimate {
        method: Method::Bayes,
        estimand: samples.link.estimand(),
        point: cace.median,
        se: cace.sd,
        ci_low: cace.q025,
        ci_high: cace.q975,
        m: None,
        warnings,
    };
    Ok(PosteriorSummary { estimate, parameters })
}

/// Split Gelman–Rubin statistic: each chain is halved, and the ratio of
/// pooled-to-within variance is computed over the half-chains. None when
/// the within-chain variance is zero (constant samples).
fn split_rhat(per_chain: &[Vec<f64>]) -> Option<f64> {
    let half_len = per_chain.iter().map(|c| c.len() / 2).min()?;
    if half_len < 2 {
        return None;
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(per_chain.len() * 2);
    for chain in per_chain {
        halves.push(&chain[..half_len]);
        halves.push(&chain[chain.len() - half_len..]);
    }
    let m = halves.len() as f64;
    let l = half_len as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / l).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (l - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let var_means = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w <= 0.0 {
        return None;
    }
    let var_plus = (l - 1.0) / l * w + var_means;
    Some((var_plus / w).sqrt())
}
