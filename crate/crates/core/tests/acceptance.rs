//! End-to-end acceptance checks. Each test covers one numbered criterion and
//! prints a single PASS/FAIL line with the measured quantities (visible with
//! `--nocapture`, and automatically for failing tests).
//!
//! Two checks encode external targets this implementation measurably does
//! not reproduce and are expected to fail honestly; each failure message
//! explains the measured gap:
//!   - criterion 06 asserts a [5%, 25%] relative-bias window for the
//!     two-stage residual-inclusion estimator, whose measured inconsistency
//!     at this design point is real but far smaller (about +2%),
//!   - criterion 10 asserts a nominal 20% marginal missingness rate that
//!     ignores the convexity gap of the logistic missingness model (the
//!     generator's marginal rate is 22.1% by quadrature, and the generator
//!     itself is verified against that value first).

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cace_core::data::{ComplianceClass, Dataset, OutcomeKind, TrialRecord};
use cace_core::estimate::{estimate_cace, AnalysisOptions, Method};
use cace_core::glm::{expit, fit_linear, fit_logistic, DesignMatrix};
use cace_core::impute::{impute_class_direct, impute_class_rejection};
use cace_core::mixture::{em_fit, Link, MixtureModelSpec, MixtureParams};
use cace_core::pool::pool;
use cace_core::rng::{derive_rng, derive_seed};
use cace_core::sim::{
    generate_dataset, metrics, run_scenario, BetaCRule, MethodMetrics, MissingRule,
    ScenarioConfig,
};

/// Population complier fraction for class model expit(0.85 + x1), x1 ~ N(0,1)
/// (201-node Gauss–Hermite quadrature).
const COMPLIER_FRACTION_HIGH: f64 = 0.669472;
/// Same quadrature for expit(0.5 + x1).
const COMPLIER_FRACTION_LOW: f64 = 0.602027;
/// Marginal missingness of expit(-1.386294 + ln2 · x2), x2 ~ N(0,1): the
/// intercept puts 20% at x2 = 0, but averaging the convex-below-half logistic
/// curve over x2 lifts the marginal rate above the nominal 20%.
const MARGINAL_MISSING_FRACTION: f64 = 0.220702;
/// Marginal complier log odds ratio for the binary cell with no direct
/// randomization effect (psi0 = 0.85, beta_cz = 2, beta_c = 0), by quadrature
/// over the covariate distribution. The simulator's cached Monte Carlo truth
/// must land within 4 standard errors of this (10⁷ draws ⇒ about 0.005).
const BINARY_TRUTH_NO_DIRECT: f64 = 1.239123;
/// Same quantity with beta_c = 1 (direct effect half the interaction).
const BINARY_TRUTH_WITH_DIRECT: f64 = 1.272766;
/// Monte Carlo tolerance for the two constants above.
const TRUTH_MC_TOL: f64 = 0.005;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance criterion {id:02} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn rel_bias(m: &MethodMetrics, truth: f64) -> f64 {
    m.bias / truth
}

// ---------------------------------------------------------------------------
// 1. Wald and two-stage least squares coincide without covariates
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_01_wald_equals_tsls_on_complete_data() {
    let mut rng = derive_rng(101, 0);
    let opts = AnalysisOptions::default();
    let mut max_gap = 0.0_f64;
    for _ in 0..1000 {
        let n = rng.gen_range(30..200);
        // guarantee both arms and a nonzero compliance rate up front
        let mut records = vec![
            TrialRecord { id: 0, z: 0, d: 0, y: Some(rng.gen::<f64>()), x: vec![], c: None },
            TrialRecord { id: 1, z: 1, d: 1, y: Some(rng.gen::<f64>()), x: vec![], c: None },
        ];
        let p_comply = 0.2 + 0.6 * rng.gen::<f64>();
        for i in 2..n {
            let z = u8::from(rng.gen::<f64>() < 0.5);
            let d = z * u8::from(rng.gen::<f64>() < p_comply);
            let noise: f64 = rng.sample(StandardNormal);
            let y = 1.0 + 2.0 * d as f64 - 0.5 * z as f64 + noise;
            records.push(TrialRecord { id: i as u64, z, d, y: Some(y), x: vec![], c: None });
        }
        let mut ds =
            Dataset { records, outcome_kind: OutcomeKind::Continuous, covariate_names: vec![] };
        ds.derive_compliance();

        let wald = estimate_cace(&ds, Method::Wald, &opts).unwrap();
        let tsls = estimate_cace(&ds, Method::Tsls, &opts).unwrap();
        max_gap = max_gap.max((wald.point - tsls.point).abs());
    }
    let pass = max_gap <= 1e-10;
    report(
        1,
        "wald equals tsls without covariates",
        pass,
        &format!("max |wald − tsls| over 1000 complete datasets = {max_gap:.3e} (limit 1e-10)"),
    );
    assert!(pass, "instrument-ratio and two-stage points diverged by {max_gap:.3e}");
}

// ---------------------------------------------------------------------------
// 2. Rejection-sampled class draws match the closed-form draw
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_02_rejection_sampler_matches_the_direct_class_draw() {
    const DRAWS: usize = 100_000;
    let ds = Dataset {
        records: vec![
            TrialRecord { id: 0, z: 0, d: 0, y: Some(0.0), x: vec![], c: None },
            TrialRecord { id: 1, z: 1, d: 1, y: Some(0.0), x: vec![], c: None },
        ],
        outcome_kind: OutcomeKind::Continuous,
        covariate_names: vec![],
    };
    let spec = MixtureModelSpec::marginal(Link::Identity);
    let model = spec.resolve(&ds).unwrap();
    let chi1 = ChiSquared::new(1.0).unwrap();

    let mut config_idx = 0u64;
    let mut min_p = 1.0_f64;
    let mut fallbacks = 0usize;
    for &pi in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        for &y in &[-2.0, 0.0, 1.0, 3.0] {
            let theta = MixtureParams {
                beta0: 0.0,
                beta_c: 1.0,
                beta_cz: 2.0,
                extra: vec![],
                pi,
                sigma: Some(1.0),
            };
            let record = TrialRecord { id: 0, z: 0, d: 0, y: Some(y), x: vec![], c: None };
            let mut rng = derive_rng(202, config_idx);
            config_idx += 1;

            let mut direct_compliers = 0usize;
            let mut rejection_compliers = 0usize;
            for _ in 0..DRAWS {
                if impute_class_direct(&record, &theta, &model, &mut rng)
                    == ComplianceClass::Complier
                {
                    direct_compliers += 1;
                }
            }
            for _ in 0..DRAWS {
                let (class, fell_back) =
                    impute_class_rejection(&record, &theta, &model, &mut rng, 5000);
                fallbacks += usize::from(fell_back);
                if class == ComplianceClass::Complier {
                    rejection_compliers += 1;
                }
            }

            // 2×2 Pearson chi-square: sampler × class, 1 degree of freedom
            let a = rejection_compliers as f64;
            let b = (DRAWS - rejection_compliers) as f64;
            let c = direct_compliers as f64;
            let d = (DRAWS - direct_compliers) as f64;
            let total = 2.0 * DRAWS as f64;
            let stat = total * (a * d - b * c).powi(2)
                / ((a + b) * (c + d) * (a + c) * (b + d));
            let p_value = 1.0 - chi1.cdf(stat);
            min_p = min_p.min(p_value);
            assert!(
                p_value > 0.001,
                "samplers disagree at pi={pi}, y={y}: chi-square {stat:.2}, p={p_value:.5}"
            );
        }
    }
    let pass = min_p > 0.001 && fallbacks == 0;
    report(
        2,
        "rejection class draw matches closed form",
        pass,
        &format!(
            "min p-value over 20 configurations × {DRAWS} draws = {min_p:.4}, \
             fallbacks = {fallbacks}"
        ),
    );
    assert!(pass, "rejection sampler used its fallback {fallbacks} times");
}

// ---------------------------------------------------------------------------
// 3. EM equals the direct GLM on class-complete data; likelihood climbs
// ---------------------------------------------------------------------------

fn monotone(trace: &[f64]) -> bool {
    trace
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()))
}

#[test]
fn acceptance_criterion_03_em_matches_the_glm_and_climbs_monotonically() {
    let mut max_coef_gap = 0.0_f64;
    let mut runs = 0usize;

    // 50 class-complete datasets: EM must reproduce the direct GLM
    for k in 0..50u64 {
        let link = if k % 2 == 0 { Link::Identity } else { Link::Logit };
        let mut rng = derive_rng(303, k);
        let n = 200;
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let z = (i % 2) as u8;
            let c = u8::from(rng.gen::<f64>() < 0.6);
            let d = c * z;
            let eta = -0.2 + 0.6 * c as f64 + 1.0 * (c * z) as f64;
            let y = match link {
                Link::Identity => eta + 1.2 * rng.sample::<f64, _>(StandardNormal),
                Link::Logit => f64::from(rng.gen::<f64>() < expit(eta)),
            };
            records.push(TrialRecord {
                id: i as u64,
                z,
                d,
                y: Some(y),
                x: vec![],
                c: Some(ComplianceClass::from_indicator(c)),
            });
        }
        let kind = match link {
            Link::Identity => OutcomeKind::Continuous,
            Link::Logit => OutcomeKind::Binary,
        };
        let ds = Dataset { records, outcome_kind: kind, covariate_names: vec![] };
        let em = em_fit(&ds, &MixtureModelSpec::marginal(link)).unwrap();
        assert!(monotone(&em.loglik_trace), "run {k}: log likelihood decreased");
        runs += 1;

        let ones = vec![1.0; n];
        let c_col: Vec<f64> =
            ds.records.iter().map(|r| r.c.unwrap().indicator() as f64).collect();
        let cz_col: Vec<f64> = ds
            .records
            .iter()
            .map(|r| (r.c.unwrap().indicator() * r.z) as f64)
            .collect();
        let y: Vec<f64> = ds.records.iter().map(|r| r.y.unwrap()).collect();
        let x = DesignMatrix::from_columns(&[
            ("beta0", &ones),
            ("beta_c", &c_col),
            ("beta_cz", &cz_col),
        ])
        .unwrap();
        let glm = match link {
            Link::Identity => fit_linear(&x, &y, None).unwrap(),
            Link::Logit => fit_logistic(&x, &y, None).unwrap(),
        };
        let em_beta = [em.params.beta0, em.params.beta_c, em.params.beta_cz];
        for (j, &coef) in em_beta.iter().enumerate() {
            let gap = (coef - glm.coef[j]).abs() / (1.0 + glm.coef[j].abs());
            max_coef_gap = max_coef_gap.max(gap);
        }
    }
    assert!(
        max_coef_gap <= 1e-8,
        "EM coefficients drifted {max_coef_gap:.2e} from the direct GLM"
    );

    // 50 latent-class datasets from the trial generator: monotone likelihood
    for k in 0..50u64 {
        let kind = if k % 2 == 0 { OutcomeKind::Continuous } else { OutcomeKind::Binary };
        let link = if k % 2 == 0 { Link::Identity } else { Link::Logit };
        let cfg = ScenarioConfig {
            n: 300,
            psi0: if k % 3 == 0 { 0.5 } else { 0.85 },
            outcome_kind: kind,
            beta_cz: 2.0,
            beta_c_rule: BetaCRule::Zero,
            missing_y: MissingRule::None,
            replications: 1,
            seed: 3030 + k,
            psi_x1: 1.0,
        };
        let mut rng = derive_rng(cfg.seed, 0);
        let ds = generate_dataset(&cfg, &mut rng).dataset;
        let em = em_fit(&ds, &MixtureModelSpec::marginal(link)).unwrap();
        assert!(
            monotone(&em.loglik_trace),
            "latent run {k}: log likelihood decreased somewhere along {:?}",
            em.loglik_trace.len()
        );
        runs += 1;
    }

    let pass = max_coef_gap <= 1e-8 && runs == 100;
    report(
        3,
        "EM equals direct GLM; likelihood monotone",
        pass,
        &format!(
            "max scaled coefficient gap {max_coef_gap:.2e} over 50 class-complete fits; \
             likelihood nondecreasing in all {runs} EM runs"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared continuous simulation cell for criteria 4 and 8:
// N=1000, 70% compliers, effect 2, fully observed outcomes, 500 replications
// ---------------------------------------------------------------------------

struct CellMethod {
    points: Vec<f64>,
    ci_los: Vec<f64>,
    ci_his: Vec<f64>,
    failures: usize,
}

struct SharedCell {
    tsls: CellMethod,
    smc: CellMethod,
    bayes: CellMethod,
    /// (imputation point, posterior median, pooled SE) per replication where
    /// both estimators succeeded.
    agreement: Vec<(f64, f64, f64)>,
    truth: f64,
}

fn continuous_cell() -> &'static SharedCell {
    static CELL: OnceLock<SharedCell> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ScenarioConfig {
            n: 1000,
            psi0: 0.85,
            outcome_kind: OutcomeKind::Continuous,
            beta_cz: 2.0,
            beta_c_rule: BetaCRule::Zero,
            missing_y: MissingRule::None,
            replications: 500,
            seed: 404,
            psi_x1: 1.0,
        };
        let base = AnalysisOptions {
            mcmc_iterations: 2_000,
            burn_in: 1_000,
            ..AnalysisOptions::default()
        };
        let mut tsls = CellMethod { points: vec![], ci_los: vec![], ci_his: vec![], failures: 0 };
        let mut smc = CellMethod { points: vec![], ci_los: vec![], ci_his: vec![], failures: 0 };
        let mut bayes = CellMethod { points: vec![], ci_los: vec![], ci_his: vec![], failures: 0 };
        let mut agreement = Vec::with_capacity(cfg.replications);

        for r in 0..cfg.replications as u64 {
            // replication stream layout identical to the scenario runner, so
            // this cell is reproducible through the public entry point too
            let rep_seed = derive_seed(cfg.seed, r);
            let mut gen_rng = derive_rng(rep_seed, 0);
            let trial = generate_dataset(&cfg, &mut gen_rng);

            let run = |method: Method, slot: &mut CellMethod| {
                let mut opts = base.clone();
                opts.seed = derive_seed(rep_seed, 1000 + method.stream_tag());
                match estimate_cace(&trial.dataset, method, &opts) {
                    Ok(est) => {
                        slot.points.push(est.point);
                        slot.ci_los.push(est.ci_low);
                        slot.ci_his.push(est.ci_high);
                        Some((est.point, est.se))
                    }
                    Err(_) => {
                        slot.failures += 1;
                        None
                    }
                }
            };
            run(Method::Tsls, &mut tsls);
            let smc_est = run(Method::SmcMic, &mut smc);
            let bayes_est = run(Method::Bayes, &mut bayes);
            if let (Some((mi_point, mi_se)), Some((post_median, _))) = (smc_est, bayes_est) {
                agreement.push((mi_point, post_median, mi_se));
            }
        }
        for (name, m) in
            [("tsls", &tsls), ("smc mic", &smc), ("bayes", &bayes)]
        {
            assert!(
                m.failures <= cfg.replications / 20,
                "{name} failed {} of {} replications",
                m.failures,
                cfg.replications
            );
        }
        SharedCell { tsls, smc, bayes, agreement, truth: cfg.beta_cz }
    })
}

#[test]
fn acceptance_criterion_04_continuous_cell_bias_coverage_rmse() {
    let cell = continuous_cell();
    let summarize = |m: &CellMethod| metrics(&m.points, &m.ci_los, &m.ci_his, cell.truth).unwrap();
    let tsls = summarize(&cell.tsls);
    let smc = summarize(&cell.smc);
    let bayes = summarize(&cell.bayes);

    let mut pass = true;
    let mut parts = Vec::new();
    for (name, m) in [("tsls", &tsls), ("smc mic", &smc), ("bayes", &bayes)] {
        let rb = rel_bias(m, cell.truth);
        let ok = rb.abs() < 0.05 && (0.925..=0.975).contains(&m.coverage);
        pass &= ok;
        parts.push(format!(
            "{name}: rel bias {:+.2}%, coverage {:.3}, rmse {:.4}",
            100.0 * rb,
            m.coverage,
            m.rmse
        ));
    }
    let rmse_ok = smc.rmse <= tsls.rmse;
    pass &= rmse_ok;
    report(4, "continuous cell bias/coverage/RMSE", pass, &parts.join("; "));

    for (name, m) in [("tsls", &tsls), ("smc mic", &smc), ("bayes", &bayes)] {
        let rb = rel_bias(m, cell.truth);
        assert!(
            rb.abs() < 0.05,
            "{name} relative bias {:.2}% exceeds 5%",
            100.0 * rb
        );
        assert!(
            (0.925..=0.975).contains(&m.coverage),
            "{name} coverage {:.3} outside [0.925, 0.975]",
            m.coverage
        );
    }
    assert!(
        rmse_ok,
        "imputation RMSE {:.4} exceeds the two-stage RMSE {:.4}",
        smc.rmse, tsls.rmse
    );
}

#[test]
fn acceptance_criterion_08_bayes_and_smc_mic_agree_replicationwise() {
    let cell = continuous_cell();
    let n = cell.agreement.len() as f64;
    let mean_gap =
        cell.agreement.iter().map(|(mi, post, _)| (mi - post).abs()).sum::<f64>() / n;
    let mean_se = cell.agreement.iter().map(|(_, _, se)| se).sum::<f64>() / n;
    let pass = mean_gap < 0.5 * mean_se;
    report(
        8,
        "posterior median tracks the pooled imputation point",
        pass,
        &format!(
            "mean |difference| {mean_gap:.4} vs half the mean pooled SE {:.4} \
             across {} replications",
            0.5 * mean_se,
            cell.agreement.len()
        ),
    );
    assert!(
        pass,
        "mean gap {mean_gap:.4} is not below half the mean pooled SE ({:.4})",
        0.5 * mean_se
    );
}

// ---------------------------------------------------------------------------
// 5. Binary cell without a direct randomization effect
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_05_binary_cell_without_direct_effect() {
    let cfg = ScenarioConfig {
        n: 1000,
        psi0: 0.85,
        outcome_kind: OutcomeKind::Binary,
        beta_cz: 2.0,
        beta_c_rule: BetaCRule::Zero,
        missing_y: MissingRule::None,
        replications: 500,
        seed: 505,
        psi_x1: 1.0,
    };
    let result =
        run_scenario(&cfg, &[Method::SmcMic, Method::Tsri], &AnalysisOptions::default()).unwrap();
    assert!(
        (result.truth - BINARY_TRUTH_NO_DIRECT).abs() <= TRUTH_MC_TOL,
        "cached Monte Carlo truth {:.6} is not within {TRUTH_MC_TOL} of the quadrature \
         value {BINARY_TRUTH_NO_DIRECT}",
        result.truth
    );

    let mut pass = true;
    let mut parts = vec![format!("truth {:.4}", result.truth)];
    for (method, m) in &result.methods {
        let rb = rel_bias(m, result.truth);
        let ok = rb.abs() < 0.05 && (0.92..=0.98).contains(&m.coverage);
        pass &= ok;
        parts.push(format!(
            "{}: rel bias {:+.2}%, coverage {:.3}",
            method.name(),
            100.0 * rb,
            m.coverage
        ));
    }
    report(5, "binary cell, no direct effect", pass, &parts.join("; "));
    for (method, m) in &result.methods {
        let rb = rel_bias(m, result.truth);
        assert!(
            rb.abs() < 0.05,
            "{} relative bias {:.2}% exceeds 5%",
            method.name(),
            100.0 * rb
        );
        assert!(
            (0.92..=0.98).contains(&m.coverage),
            "{} coverage {:.3} outside [0.92, 0.98]",
            method.name(),
            m.coverage
        );
    }
}

// ---------------------------------------------------------------------------
// 6. Binary cell with a direct effect: residual inclusion inconsistency
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_06_binary_cell_with_direct_effect() {
    let cfg = ScenarioConfig {
        n: 1000,
        psi0: 0.85,
        outcome_kind: OutcomeKind::Binary,
        beta_cz: 2.0,
        beta_c_rule: BetaCRule::Half,
        missing_y: MissingRule::None,
        replications: 500,
        seed: 606,
        psi_x1: 1.0,
    };
    // full-length default chains here: only the continuous cell is specified
    // to run with reduced chains, and the logit sampler's dispersed starts
    // need the default burn-in to be trustworthy
    let base = AnalysisOptions::default();
    let result =
        run_scenario(&cfg, &[Method::Tsri, Method::SmcMic, Method::Bayes], &base).unwrap();
    assert!(
        (result.truth - BINARY_TRUTH_WITH_DIRECT).abs() <= TRUTH_MC_TOL,
        "cached Monte Carlo truth {:.6} is not within {TRUTH_MC_TOL} of the quadrature \
         value {BINARY_TRUTH_WITH_DIRECT}",
        result.truth
    );

    let stat = |method: Method| {
        result
            .methods
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, metrics)| metrics)
            .unwrap()
    };
    let tsri = stat(Method::Tsri);
    let tsri_rb = rel_bias(tsri, result.truth);
    let smc_rb = rel_bias(stat(Method::SmcMic), result.truth);
    let bayes_rb = rel_bias(stat(Method::Bayes), result.truth);
    let mce = tsri
        .mce_ci
        .map(|(lo, hi)| format!(" (bias MC interval [{lo:+.4}, {hi:+.4}])"))
        .unwrap_or_default();

    let window_ok = tsri_rb > 0.0 && (0.05..=0.25).contains(&tsri_rb.abs());
    let pass = window_ok && smc_rb.abs() < 0.05 && bayes_rb.abs() < 0.05;
    report(
        6,
        "binary cell with direct effect",
        pass,
        &format!(
            "truth {:.4}; tsri rel bias {:+.2}%{mce}; smc mic {:+.2}%; bayes {:+.2}%",
            result.truth,
            100.0 * tsri_rb,
            100.0 * smc_rb,
            100.0 * bayes_rb
        ),
    );
    assert!(smc_rb.abs() < 0.05, "smc mic relative bias {:.2}% exceeds 5%", 100.0 * smc_rb);
    assert!(bayes_rb.abs() < 0.05, "bayes relative bias {:.2}% exceeds 5%", 100.0 * bayes_rb);
    assert!(
        window_ok,
        "residual-inclusion relative bias is {:+.2}%{mce}, outside the asserted \
         [+5%, +25%] window: at this sample size and confounding strength the \
         estimator's marginal-vs-conditional gap is measurably positive but small, \
         so the window is not reached",
        100.0 * tsri_rb
    );
}

// ---------------------------------------------------------------------------
// 7. Missing-outcome cell
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_07_missing_outcome_cell() {
    let cfg = ScenarioConfig {
        n: 1000,
        psi0: 0.85,
        outcome_kind: OutcomeKind::Continuous,
        beta_cz: 2.0,
        beta_c_rule: BetaCRule::Zero,
        missing_y: MissingRule::Mar20,
        replications: 500,
        seed: 707,
        psi_x1: 1.0,
    };
    let result =
        run_scenario(&cfg, &[Method::SmcMic, Method::Tsls], &AnalysisOptions::default()).unwrap();
    let stat = |method: Method| {
        result
            .methods
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, metrics)| metrics)
            .unwrap()
    };
    let smc = stat(Method::SmcMic);
    let tsls = stat(Method::Tsls);
    let smc_rb = rel_bias(smc, result.truth);
    let tsls_rb = rel_bias(tsls, result.truth);

    let pass = smc_rb.abs() < 0.05 && tsls.coverage >= 0.92;
    report(
        7,
        "missing-outcome cell",
        pass,
        &format!(
            "smc mic rel bias {:+.2}%; impute-then-tsls coverage {:.3}, \
             rel bias {:+.2}% (recorded, not asserted)",
            100.0 * smc_rb,
            tsls.coverage,
            100.0 * tsls_rb
        ),
    );
    assert!(
        smc_rb.abs() < 0.05,
        "smc mic relative bias {:.2}% exceeds 5% under missing outcomes",
        100.0 * smc_rb
    );
    assert!(
        tsls.coverage >= 0.92,
        "impute-then-tsls coverage {:.3} fell below 0.92",
        tsls.coverage
    );
}

// ---------------------------------------------------------------------------
// 9. Pooling identities
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_09_pooling_identities() {
    // zero between-imputation variance: identical points pool to themselves
    let equal = pool(&[1.7; 6], &[0.4, 0.5, 0.6, 0.4, 0.5, 0.6], None).unwrap();
    let within = (0.4 + 0.5 + 0.6) * 2.0 / 6.0;
    assert!((equal.point - 1.7).abs() <= 1e-12);
    assert!(equal.between_var.abs() <= 1e-12);
    assert!((equal.total_var - within).abs() <= 1e-12);

    // affine equivariance under y → a·y + b
    let points = [0.8, 1.1, 0.5, 1.4, 0.9];
    let vars = [0.10, 0.12, 0.08, 0.15, 0.11];
    let (a, b) = (-2.5, 0.75);
    let raw = pool(&points, &vars, Some(40.0)).unwrap();
    let mapped_points: Vec<f64> = points.iter().map(|p| a * p + b).collect();
    let mapped_vars: Vec<f64> = vars.iter().map(|v| a * a * v).collect();
    let mapped = pool(&mapped_points, &mapped_vars, Some(40.0)).unwrap();
    assert!((mapped.point - (a * raw.point + b)).abs() <= 1e-12);
    assert!((mapped.total_var - a * a * raw.total_var).abs() <= 1e-12);
    assert!((mapped.df - raw.df).abs() <= 1e-12);

    // permutation invariance
    let mut rp = points.to_vec();
    let mut rv = vars.to_vec();
    rp.rotate_left(3);
    rv.rotate_left(3);
    let rotated = pool(&rp, &rv, Some(40.0)).unwrap();
    assert!((rotated.point - raw.point).abs() <= 1e-12);
    assert!((rotated.total_var - raw.total_var).abs() <= 1e-12);
    assert!((rotated.df - raw.df).abs() <= 1e-12);

    report(
        9,
        "pooling identities",
        true,
        "zero-between, affine-equivariance, and permutation identities hold at 1e-12",
    );
}

// ---------------------------------------------------------------------------
// 10. Generator calibration at one million records
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criterion_10_dgp_calibration() {
    const N: usize = 1_000_000;
    let high = ScenarioConfig {
        n: N,
        psi0: 0.85,
        outcome_kind: OutcomeKind::Continuous,
        beta_cz: 2.0,
        beta_c_rule: BetaCRule::Zero,
        missing_y: MissingRule::Mar20,
        replications: 1,
        seed: 1010,
        psi_x1: 1.0,
    };
    let mut rng = derive_rng(high.seed, 0);
    let trial = generate_dataset(&high, &mut rng);

    let nf = N as f64;
    let complier_high =
        trial.latent.iter().filter(|l| l.complier).count() as f64 / nf;
    let missing = trial.dataset.records.iter().filter(|r| r.y.is_none()).count() as f64 / nf;
    let z_rate = trial.dataset.records.iter().filter(|r| r.z == 1).count() as f64 / nf;
    let mean_x1 = trial.latent.iter().map(|l| l.x1).sum::<f64>() / nf;
    let mean_x2 = trial.dataset.records.iter().map(|r| r.x[0]).sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var1 = 0.0;
    let mut var2 = 0.0;
    for (l, r) in trial.latent.iter().zip(&trial.dataset.records) {
        let d1 = l.x1 - mean_x1;
        let d2 = r.x[0] - mean_x2;
        cov += d1 * d2;
        var1 += d1 * d1;
        var2 += d2 * d2;
    }
    let corr = cov / (var1 * var2).sqrt();
    drop(trial);

    let low = ScenarioConfig { psi0: 0.5, seed: 1020, ..high };
    let mut rng = derive_rng(low.seed, 0);
    let trial = generate_dataset(&low, &mut rng);
    let complier_low = trial.latent.iter().filter(|l| l.complier).count() as f64 / nf;
    drop(trial);

    // the nominal 20% target ignores that averaging the logistic missingness
    // curve over x2 lifts the marginal rate; the implementable target is the
    // quadrature value, and the nominal check below fails by that gap
    let nominal_gap = (missing - 0.20).abs();
    let pass = (complier_high - COMPLIER_FRACTION_HIGH).abs() <= 0.01
        && (complier_low - COMPLIER_FRACTION_LOW).abs() <= 0.01
        && (corr - 0.3).abs() <= 0.01
        && (z_rate - 0.5).abs() <= 0.005
        && mean_x1.abs() <= 0.01
        && nominal_gap <= 0.01;
    report(
        10,
        "generator calibration at n=10⁶",
        pass,
        &format!(
            "complier fractions {complier_high:.4}/{complier_low:.4} \
             (targets {COMPLIER_FRACTION_HIGH}/{COMPLIER_FRACTION_LOW}); \
             corr(x1,x2) {corr:.4}; P(z=1) {z_rate:.4}; mean x1 {mean_x1:+.4}; \
             missing fraction {missing:.4} vs marginal target \
             {MARGINAL_MISSING_FRACTION} and nominal 0.20 (gap {nominal_gap:.4})"
        ),
    );

    assert!(
        (complier_high - COMPLIER_FRACTION_HIGH).abs() <= 0.01,
        "complier fraction {complier_high:.4} off the 0.85-intercept target"
    );
    assert!(
        (complier_low - COMPLIER_FRACTION_LOW).abs() <= 0.01,
        "complier fraction {complier_low:.4} off the 0.5-intercept target"
    );
    assert!((corr - 0.3).abs() <= 0.01, "corr(x1,x2) {corr:.4} off 0.3");
    assert!((z_rate - 0.5).abs() <= 0.005, "randomization rate {z_rate:.4} off 0.5");
    assert!(mean_x1.abs() <= 0.01, "mean x1 {mean_x1:.4} off 0");
    assert!(
        (missing - MARGINAL_MISSING_FRACTION).abs() <= 0.01,
        "missing fraction {missing:.4} is off the marginal value \
         {MARGINAL_MISSING_FRACTION} implied by the missingness model"
    );
    assert!(
        nominal_gap <= 0.01,
        "marginal missingness is {missing:.4}, not within 0.01 of the nominal 0.20: \
         the missingness intercept logit(0.2) yields 20% only at x2 = 0, and \
         averaging over x2 ~ N(0,1) lifts the marginal rate to \
         {MARGINAL_MISSING_FRACTION}, so the nominal target is unattainable \
         with this mechanism"
    );
}
