//! Factorial simulation study: the trial data-generating process, cached
//! empirical truths, performance metrics, and the seeded replication runner.
//!
//! The generated trials hide a confounder: a latent covariate drives both
//! compliance and the outcome but is withheld from the emitted dataset, so
//! the estimators face genuine unmeasured confounding of treatment received.
//! A second, correlated covariate is emitted and available as an auxiliary.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutcomeKind, TrialRecord};
use crate::error::{Error, Result};
use crate::estimate::{estimate_cace, AnalysisOptions, Method};
use crate::glm::expit;
use crate::rng::{derive_rng, derive_seed};

/// Fixed outcome-model coefficients of the data-generating process.
const BETA_0: f64 = 0.0;
const BETA_X1: f64 = -2.2;
const BETA_X2: f64 = 0.5;
/// Correlation between the hidden confounder and the emitted covariate.
const COV_X: f64 = 0.3;
/// Missingness model: logit P(y missing) = intercept + slope·x₂.
const MAR_INTERCEPT: f64 = -1.386294;
const MAR_SLOPE: f64 = std::f64::consts::LN_2;
/// Residual SD of the continuous outcome.
const SIGMA_Y: f64 = 1.0;

/// Relationship between the class main effect and the interaction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaCRule {
    /// β_c = 0: the two classes share a control-arm outcome level.
    #[default]
    Zero,
    /// β_c = β_cz/2 (binary outcomes only): the setting where two-stage
    /// residual inclusion is known to be inconsistent.
    Half,
}

/// Outcome missingness mechanism.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingRule {
    /// Fully observed outcomes.
    #[default]
    None,
    /// Missing at random given x₂, about 22% on average.
    Mar20,
}

fn default_replications() -> usize {
    500
}

fn default_psi_x1() -> f64 {
    1.0
}

/// One cell of the factorial design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Trial size (study levels: 200 and 1000).
    pub n: usize,
    /// Compliance-model intercept (study levels: 0.85 and 0.5).
    pub psi0: f64,
    pub outcome_kind: OutcomeKind,
    /// True conditional effect on the link scale (study levels: 2 and 4).
    pub beta_cz: f64,
    #[serde(default)]
    pub beta_c_rule: BetaCRule,
    #[serde(default)]
    pub missing_y: MissingRule,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Compliance-model slope on the hidden confounder.
    #[serde(default = "default_psi_x1")]
    pub psi_x1: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Data(format!("scenario n must be at least 2, got {}", self.n)));
        }
        if self.replications == 0 {
            return Err(Error::Data("scenario needs at least 1 replication".into()));
        }
        if self.beta_c_rule == BetaCRule::Half && self.outcome_kind == OutcomeKind::Continuous {
            return Err(Error::Data(
                "beta_c_rule=half is defined only for binary-outcome scenarios".into(),
            ));
        }
        for (name, v) in [("psi0", self.psi0), ("beta_cz", self.beta_cz), ("psi_x1", self.psi_x1)]
        {
            if !v.is_finite() {
                return Err(Error::Data(format!("scenario {name} must be finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Class main effect implied by the rule.
    pub fn beta_c(&self) -> f64 {
        match self.beta_c_rule {
            BetaCRule::Zero => 0.0,
            BetaCRule::Half => self.beta_cz / 2.0,
        }
    }

    /// Short text key, used in output tables.
    pub fn label(&self) -> String {
        format!(
            "n{}_psi{}_{}_bcz{}_bc{}_{}",
            self.n,
            self.psi0,
            match self.outcome_kind {
                OutcomeKind::Continuous => "cont",
                OutcomeKind::Binary => "bin",
            },
            self.beta_cz,
            self.beta_c(),
            match self.missing_y {
                MissingRule::None => "full",
                MissingRule::Mar20 => "mar20",
            },
        )
    }
}

impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Per-record values the analysis never sees: the hidden confounder and the
/// true compliance class.
#[derive(Clone, Copy, Debug)]
pub struct LatentRecord {
    pub x1: f64,
    pub complier: bool,
}

/// A generated trial: the dataset handed to estimators plus the withheld
/// per-record truths for calibration checks.
#[derive(Clone, Debug)]
pub struct GeneratedTrial {
    pub dataset: Dataset,
    pub latent: Vec<LatentRecord>,
}

/// Simulates one trial.
///
/// Covariates are bivariate normal with unit variances and covariance 0.3;
/// randomization is fair Bernoulli; compliance follows
/// logit P(C=1) = ψ₀ + ψ_x1·x₁; treatment received is C·Z (controls cannot
/// access treatment); the outcome linear predictor is
/// β_c·C + β_cz·C·Z − 2.2·x₁ + 0.5·x₂ with N(0,1) noise (identity link) or a
/// Bernoulli draw (logit link). Under [`MissingRule::Mar20`] each outcome is
/// deleted with probability expit(−1.386294 + ln2·x₂). The emitted dataset
/// carries only x₂; x₁ and the control-arm classes stay in `latent`.
pub fn generate_dataset<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> GeneratedTrial {
    let beta_c = cfg.beta_c();
    let mut records = Vec::with_capacity(cfg.n);
    let mut latent = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        let x1 = u;
        let x2 = COV_X * u + (1.0 - COV_X * COV_X).sqrt() * v;
        let z = u8::from(rng.gen::<f64>() < 0.5);
        let complier = rng.gen::<f64>() < expit(cfg.psi0 + cfg.psi_x1 * x1);
        let c = u8::from(complier);
        let d = c * z;
        let eta = BETA_0
            + beta_c * c as f64
            + cfg.beta_cz * (c * z) as f64
            + BETA_X1 * x1
            + BETA_X2 * x2;
        let y_value = match cfg.outcome_kind {
            OutcomeKind::Continuous => eta + SIGMA_Y * rng.sample::<f64, _>(StandardNormal),
            OutcomeKind::Binary => f64::from(rng.gen::<f64>() < expit(eta)),
        };
        let y = match cfg.missing_y {
            MissingRule::None => Some(y_value),
            MissingRule::Mar20 => {
                (rng.gen::<f64>() >= expit(MAR_INTERCEPT + MAR_SLOPE * x2)).then_some(y_value)
            }
        };
        records.push(TrialRecord { id: i as u64, z, d, y, x: vec![x2], c: None });
        latent.push(LatentRecord { x1, complier });
    }
    let mut dataset = Dataset {
        records,
        outcome_kind: cfg.outcome_kind,
        covariate_names: vec!["x2".to_string()],
    };
    dataset.derive_compliance();
    GeneratedTrial { dataset, latent }
}

/// Draws used by the cached binary truth.
const TRUTH_DRAWS: usize = 10_000_000;
/// Truths are population constants, so the Monte Carlo uses its own fixed
/// seed rather than any per-run seed.
const TRUTH_SEED: u64 = 0x0074_7275_7468; // "truth"

type TruthKey = (u64, u64, u64, BetaCRule);

/// The population estimand for a scenario.
///
/// Identity link: the effect is homogeneous on the difference scale, so the
/// truth is β_cz exactly. Logit link: the conditional effect does not equal
/// the marginal complier log odds ratio (non-collapsibility), so the truth
/// is computed by simulating 10⁷ individuals with both potential outcomes,
/// restricting to compliers, and taking the log odds ratio of the two event
/// rates; results are cached per (ψ₀, β_cz, β_c rule, ψ_x1). The truth does
/// not depend on the trial size or the missingness factor.
pub fn empirical_truth(cfg: &ScenarioConfig) -> f64 {
    match cfg.outcome_kind {
        OutcomeKind::Continuous => cfg.beta_cz,
        OutcomeKind::Binary => {
            static CACHE: OnceLock<Mutex<HashMap<TruthKey, f64>>> = OnceLock::new();
            let key =
                (cfg.psi0.to_bits(), cfg.beta_cz.to_bits(), cfg.psi_x1.to_bits(), cfg.beta_c_rule);
            let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
            if let Some(&v) = cache.lock().expect("truth cache lock").get(&key) {
                return v;
            }
            let v = binary_marginal_truth(cfg);
            cache.lock().expect("truth cache lock").insert(key, v);
            v
        }
    }
}

/// 10⁷-draw Monte Carlo of the marginal complier log odds ratio.
fn binary_marginal_truth(cfg: &ScenarioConfig) -> f64 {
    let mut rng = derive_rng(TRUTH_SEED, 0);
    let beta_c = cfg.beta_c();
    let mut compliers = 0u64;
    let mut events_treated = 0u64;
    let mut events_control = 0u64;
    for _ in 0..TRUTH_DRAWS {
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        let x1 = u;
        let x2 = COV_X * u + (1.0 - COV_X * COV_X).sqrt() * v;
        if rng.gen::<f64>() >= expit(cfg.psi0 + cfg.psi_x1 * x1) {
            continue; // the estimand conditions on being a complier
        }
        compliers += 1;
        let eta_x = BETA_0 + beta_c + BETA_X1 * x1 + BETA_X2 * x2;
        events_treated += u64::from(rng.gen::<f64>() < expit(eta_x + cfg.beta_cz));
        events_control += u64::from(rng.gen::<f64>() < expit(eta_x));
    }
    let p1 = events_treated as f64 / compliers as f64;
    let p0 = events_control as f64 / compliers as f64;
    ((p1 / (1.0 - p1)) / (p0 / (1.0 - p0))).ln()
}

/// Replication-level performance of one method in one scenario.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MethodMetrics {
    pub bias: f64,
    /// 95% Monte Carlo error interval around the bias; absent with fewer
    /// than two successful replications.
    pub mce_ci: Option<(f64, f64)>,
    /// Fraction of replication CIs containing the truth.
    pub coverage: f64,
    /// Mean CI width.
    pub ci_width: f64,
    pub rmse: f64,
    /// Successful replications behind these numbers.
    pub nrep_effective: usize,
}

/// Reduces per-replication results against the truth.
pub fn metrics(points: &[f64], ci_los: &[f64], ci_his: &[f64], truth: f64) -> Result<MethodMetrics> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Data("metrics need at least one replication".into()));
    }
    if ci_los.len() != n || ci_his.len() != n {
        return Err(Error::Data(format!(
            "metrics inputs must align: {n} points, {} lower and {} upper bounds",
            ci_los.len(),
            ci_his.len()
        )));
    }
    let nf = n as f64;
    let mean = points.iter().sum::<f64>() / nf;
    let bias = mean - truth;
    let mce_ci = (n >= 2).then(|| {
        let var = points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let half = 1.96 * (var / nf).sqrt();
        (bias - half, bias + half)
    });
    let covered = points
        .iter()
        .zip(ci_los.iter().zip(ci_his))
        .filter(|(_, (&lo, &hi))| lo <= truth && truth <= hi)
        .count();
    let ci_width = ci_los.iter().zip(ci_his).map(|(lo, hi)| hi - lo).sum::<f64>() / nf;
    let rmse = (points.iter().map(|p| (p - truth).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(MethodMetrics {
        bias,
        mce_ci,
        coverage: covered as f64 / nf,
        ci_width,
        rmse,
        nrep_effective: n,
    })
}

/// One scenario's reduced results.
#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub scenario: ScenarioConfig,
    pub truth: f64,
    pub methods: Vec<(Method, MethodMetrics)>,
    pub warnings: Vec<String>,
}

/// Proportion of failed replications above which a scenario aborts.
const MAX_FAILURE_RATE: f64 = 0.05;

/// Runs every scenario × method cell and reduces to metrics.
///
/// Replication r of a scenario derives its RNG from (scenario seed, r), and
/// each method inside a replication gets its own stream, so results are
/// identical across thread counts and method orderings. Two-stage methods
/// are paired with their outcome type (TSLS with continuous, TSRI and the
/// odds-ratio Wald with binary); requesting a mismatched pair is an error.
/// Replications where an estimator fails are dropped from that method's
/// metrics; a method failing more than 5% of replications aborts the
/// scenario with the first underlying error.
pub fn run_factorial(
    configs: &[ScenarioConfig],
    methods: &[Method],
    base: &AnalysisOptions,
) -> Result<Vec<ScenarioResult>> {
    configs.iter().map(|cfg| run_scenario(cfg, methods, base)).collect()
}

/// Applicability of each method to an outcome type (study pairing).
fn check_pairing(method: Method, kind: OutcomeKind) -> Result<()> {
    let ok = match method {
        Method::Tsls => kind == OutcomeKind::Continuous,
        Method::Tsri | Method::WaldOr => kind == OutcomeKind::Binary,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "method {} is not applicable to {} outcomes",
            method.name(),
            match kind {
                OutcomeKind::Continuous => "continuous",
                OutcomeKind::Binary => "binary",
            }
        )))
    }
}

/// Runs one scenario. See [`run_factorial`].
pub fn run_scenario(
    cfg: &ScenarioConfig,
    methods: &[Method],
    base: &AnalysisOptions,
) -> Result<ScenarioResult> {
    cfg.validate()?;
    for &m in methods {
        check_pairing(m, cfg.outcome_kind)?;
    }
    let truth = empirical_truth(cfg);

    // per-replication, per-method outcomes, in replication order
    let reps: Vec<Vec<Result<(f64, f64, f64)>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(cfg.seed, r as u64);
            let mut gen_rng = derive_rng(rep_seed, 0);
            let trial = generate_dataset(cfg, &mut gen_rng);
            methods
                .iter()
                .map(|&method| {
                    let mut opts = base.clone();
                    opts.seed = derive_seed(rep_seed, 1000 + method.stream_tag());
                    if cfg.missing_y == MissingRule::Mar20 {
                        // outcomes are MAR given x2, so imputation models
                        // must condition on it
                        if !opts.aux_covariates.iter().any(|a| a == "x2") {
                            opts.aux_covariates.push("x2".to_string());
                        }
                    }
                    estimate_cace(&trial.dataset, method, &opts)
                        .map(|est| (est.point, est.ci_low, est.ci_high))
                })
                .collect()
        })
        .collect();

    let mut results = Vec::with_capacity(methods.len());
    let mut warnings = Vec::new();
    if cfg.replications == 1 {
        warnings.push("single replication: Monte Carlo error intervals unavailable".to_string());
    }
    for (j, &method) in methods.iter().enumerate() {
        let mut points = Vec::with_capacity(cfg.replications);
        let mut ci_los = Vec::with_capacity(cfg.replications);
        let mut ci_his = Vec::with_capacity(cfg.replications);
        let mut first_failure: Option<String> = None;
        for rep in &reps {
            match &rep[j] {
                Ok((point, lo, hi)) => {
                    points.push(*point);
                    ci_los.push(*lo);
                    ci_his.push(*hi);
                }
                Err(e) => {
                    if first_failure.is_none() {
                        first_failure = Some(e.to_string());
                    }
                }
            }
        }
        let failures = cfg.replications - points.len();
        if (failures as f64) > MAX_FAILURE_RATE * cfg.replications as f64 {
            return Err(Error::Numerical(format!(
                "scenario {}: method {} failed {failures} of {} replications \
                 (threshold 5%); first failure: {}",
                cfg.label(),
                method.name(),
                cfg.replications,
                first_failure.unwrap_or_else(|| "unknown".into()),
            )));
        }
        if failures > 0 {
            warnings.push(format!(
                "method {} failed {failures} of {} replications; excluded from metrics \
                 (first failure: {})",
                method.name(),
                cfg.replications,
                first_failure.unwrap_or_else(|| "unknown".into()),
            ));
        }
        results.push((method, metrics(&points, &ci_los, &ci_his, truth)?));
    }
    Ok(ScenarioResult { scenario: cfg.clone(), truth, methods: results, warnings })
}
