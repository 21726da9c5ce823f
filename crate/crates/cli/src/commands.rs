//! Subcommand implementations: argument schemas, scenario-file loading,
//! output writing, and provenance metadata (tool version, seed, config hash).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cace_core::data::{load_csv, write_csv, ColumnMap, OutcomeKind};
use cace_core::error::{Error, Result};
use cace_core::estimate::{estimate_cace, AnalysisOptions, CaceEstimate, Method};
use cace_core::impute::{smc_mic_run, DrawMechanism};
use cace_core::mixture::{Link, MixtureModelSpec};
use cace_core::rng::{derive_rng, derive_seed};
use cace_core::sim::{
    generate_dataset, run_factorial, BetaCRule, MissingRule, ScenarioConfig, ScenarioResult,
};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "cace",
    version,
    about = "Estimate complier-average causal effects and run simulation studies"
)]
pub struct Cli {
    /// Worker threads for replication (or set CACE_THREADS; default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the complier-average causal effect from a trial CSV
    Estimate(Box<EstimateArgs>),
    /// Generate one simulated trial dataset from a scenario file
    Simulate(SimulateArgs),
    /// Run replicated scenarios and write per-method metrics
    Replicate(ReplicateArgs),
    /// Reduce replicate output into a tidy (scenario, method, metric, value) table
    Summarize(SummarizeArgs),
}

impl Cli {
    pub fn thread_count(&self) -> Option<usize> {
        self.threads
            .or_else(|| std::env::var("CACE_THREADS").ok().and_then(|v| v.parse().ok()))
    }

    pub fn run(&self) -> Result<()> {
        match &self.command {
            Command::Estimate(args) => run_estimate(args),
            Command::Simulate(args) => run_simulate(args),
            Command::Replicate(args) => run_replicate(args),
            Command::Summarize(args) => run_summarize(args),
        }
    }
}

fn hex_sha256(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_outcome(s: &str) -> Result<OutcomeKind> {
    match s {
        "continuous" => Ok(OutcomeKind::Continuous),
        "binary" => Ok(OutcomeKind::Binary),
        other => Err(Error::Data(format!(
            "unknown outcome type '{other}' (expected continuous or binary)"
        ))),
    }
}

fn parse_draw(s: &str) -> Result<DrawMechanism> {
    match s {
        "asymptotic-normal" => Ok(DrawMechanism::AsymptoticNormal),
        "bootstrap" => Ok(DrawMechanism::Bootstrap),
        other => Err(Error::Data(format!(
            "unknown draw mechanism '{other}' (expected asymptotic-normal or bootstrap)"
        ))),
    }
}

/// Rejects method/outcome pairs whose estimand does not exist for that
/// outcome type, before any data is touched.
fn check_pairing(method: Method, kind: OutcomeKind) -> Result<()> {
    match (method, kind) {
        (Method::Tsri | Method::WaldOr, OutcomeKind::Continuous) => Err(Error::Data(format!(
            "{} requires binary outcome",
            method.name()
        ))),
        (Method::Tsls, OutcomeKind::Binary) => Err(Error::Data(format!(
            "{} requires continuous outcome",
            method.name()
        ))),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct EstimateArgs {
    /// Input trial CSV (columns id, z, d, y plus covariates; `#` comments
    /// and empty/NA outcomes allowed)
    #[arg(long)]
    input: PathBuf,
    /// Estimator to run: wald, waldor, tsls, tsri, ml-mixture, smc-mic,
    /// bayes (repeatable or comma-separated)
    #[arg(long, value_delimiter = ',', required = true)]
    method: Vec<String>,
    /// Outcome type: continuous or binary
    #[arg(long)]
    outcome: String,
    /// Output JSON path (stdout when omitted)
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Baseline covariates included in the substantive model
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Auxiliary covariates used by imputation models only
    #[arg(long, value_delimiter = ',')]
    aux_covariates: Vec<String>,
    /// Number of imputed datasets
    #[arg(long)]
    imputations: Option<usize>,
    /// Chained-equation cycles per imputation stream
    #[arg(long)]
    fcs_iterations: Option<usize>,
    /// Rejection-sampling attempts before the closed-form class draw
    #[arg(long)]
    rejection_cap: Option<usize>,
    /// Parameter draw between cycles: asymptotic-normal or bootstrap
    #[arg(long)]
    draw: Option<String>,
    /// Posterior sampling chains
    #[arg(long)]
    chains: Option<usize>,
    /// Posterior sampling iterations per chain (including burn-in)
    #[arg(long)]
    mcmc_iterations: Option<usize>,
    /// Burn-in iterations discarded from each chain
    #[arg(long)]
    burn_in: Option<usize>,
    /// Bootstrap resamples for residual-inclusion standard errors
    #[arg(long)]
    bootstrap_resamples: Option<usize>,
    /// Base seed for every stochastic step
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Column holding the participant id
    #[arg(long, default_value = "id")]
    id_col: String,
    /// CSV has no id column; number records by position instead
    #[arg(long)]
    no_id_col: bool,
    /// Column holding the randomized arm
    #[arg(long, default_value = "z")]
    z_col: String,
    /// Column holding the treatment received
    #[arg(long, default_value = "d")]
    d_col: String,
    /// Column holding the outcome
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Write the completed imputation datasets (smc-mic only) into this
    /// directory as CSV files
    #[arg(long)]
    #[serde(skip)]
    dump_imputations: Option<PathBuf>,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    tool_version: &'a str,
    seed: u64,
    config_hash: &'a str,
    estimates: &'a [CaceEstimate],
}

fn analysis_options(args: &EstimateArgs) -> Result<AnalysisOptions> {
    let mut opts = AnalysisOptions {
        covariates: args.covariates.clone(),
        aux_covariates: args.aux_covariates.clone(),
        seed: args.seed,
        ..AnalysisOptions::default()
    };
    if let Some(v) = args.imputations {
        opts.imputations = v;
    }
    if let Some(v) = args.fcs_iterations {
        opts.fcs_iterations = v;
    }
    if let Some(v) = args.rejection_cap {
        opts.rejection_cap = v;
    }
    if let Some(v) = &args.draw {
        opts.draw = parse_draw(v)?;
    }
    if let Some(v) = args.chains {
        opts.chains = v;
    }
    if let Some(v) = args.mcmc_iterations {
        opts.mcmc_iterations = v;
    }
    if let Some(v) = args.burn_in {
        opts.burn_in = v;
    }
    if let Some(v) = args.bootstrap_resamples {
        opts.bootstrap_resamples = v;
    }
    Ok(opts)
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let outcome = parse_outcome(&args.outcome)?;
    let methods = args
        .method
        .iter()
        .map(|name| Method::parse(name))
        .collect::<Result<Vec<_>>>()?;
    for &method in &methods {
        check_pairing(method, outcome)?;
    }

    let map = ColumnMap {
        id: (!args.no_id_col).then(|| args.id_col.clone()),
        z: args.z_col.clone(),
        d: args.d_col.clone(),
        y: args.y_col.clone(),
        covariates: None,
    };
    let mut ds = load_csv(&args.input, outcome, &map)?;
    ds.derive_compliance();
    let opts = analysis_options(args)?;

    let estimates = methods
        .iter()
        .map(|&method| estimate_cace(&ds, method, &opts))
        .collect::<Result<Vec<_>>>()?;

    let config_hash = hex_sha256(&[&serde_json::to_vec(args).expect("arguments serialize")]);

    if let Some(dir) = &args.dump_imputations {
        if !methods.contains(&Method::SmcMic) {
            return Err(Error::Data(
                "--dump-imputations requires the smc-mic method".into(),
            ));
        }
        let link = Link::for_outcome(outcome);
        let spec = if opts.covariates.is_empty() {
            MixtureModelSpec::marginal(link)
        } else {
            MixtureModelSpec::with_covariates(link, &opts.covariates)
        };
        let imputed = smc_mic_run(&ds, &spec, &opts.imputation_config())?;
        fs::create_dir_all(dir)?;
        for (j, completed) in imputed.datasets.iter().enumerate() {
            let metadata = [
                ("tool_version".to_string(), TOOL_VERSION.to_string()),
                ("seed".to_string(), opts.seed.to_string()),
                ("config_hash".to_string(), config_hash.clone()),
                ("imputation".to_string(), format!("{} of {}", j + 1, imputed.datasets.len())),
            ];
            write_csv(completed, &dir.join(format!("imputation_{:02}.csv", j + 1)), &metadata)?;
        }
    }

    let report = EstimateReport {
        tool_version: TOOL_VERSION,
        seed: args.seed,
        config_hash: &config_hash,
        estimates: &estimates,
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    match &args.out {
        Some(path) => fs::write(path, json)?,
        None => print!("{json}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scenario files
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioList {
    scenarios: Vec<ScenarioConfig>,
}

/// Loads one or more scenario cells from a TOML or JSON file. The file may
/// hold a single scenario object, a `scenarios` list, or (JSON only) a bare
/// array.
fn load_scenarios(path: &Path) -> Result<(Vec<ScenarioConfig>, String)> {
    let text = fs::read_to_string(path)?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    let parse_err =
        |e: &dyn std::fmt::Display| Error::Data(format!("{}: {e}", path.display()));
    let cells = if is_json {
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| parse_err(&e))?;
        if value.is_array() {
            serde_json::from_value::<Vec<ScenarioConfig>>(value).map_err(|e| parse_err(&e))?
        } else if value.get("scenarios").is_some() {
            serde_json::from_value::<ScenarioList>(value)
                .map_err(|e| parse_err(&e))?
                .scenarios
        } else {
            vec![serde_json::from_value::<ScenarioConfig>(value).map_err(|e| parse_err(&e))?]
        }
    } else {
        let value: toml::Value = toml::from_str(&text).map_err(|e| parse_err(&e))?;
        if value.get("scenarios").is_some() {
            value
                .try_into::<ScenarioList>()
                .map_err(|e| parse_err(&e))?
                .scenarios
        } else {
            vec![value.try_into::<ScenarioConfig>().map_err(|e| parse_err(&e))?]
        }
    };
    if cells.is_empty() {
        return Err(Error::Data(format!("{}: no scenarios defined", path.display())));
    }
    for cell in &cells {
        cell.validate()?;
    }
    Ok((cells, text))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario file (TOML or JSON) holding exactly one scenario
    #[arg(long)]
    scenario: PathBuf,
    /// Output CSV path for the generated trial
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let (mut cells, file_text) = load_scenarios(&args.scenario)?;
    if cells.len() != 1 {
        return Err(Error::Data(format!(
            "simulate expects exactly one scenario, found {}",
            cells.len()
        )));
    }
    let mut cfg = cells.remove(0);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    // identical stream layout to the replication runner, so this dataset is
    // replication 0 of the scenario
    let mut rng = derive_rng(derive_seed(cfg.seed, 0), 0);
    let trial = generate_dataset(&cfg, &mut rng);

    let config_hash = hex_sha256(&[
        &serde_json::to_vec(args).expect("arguments serialize"),
        file_text.as_bytes(),
    ]);
    let metadata = [
        ("tool_version".to_string(), TOOL_VERSION.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("config_hash".to_string(), config_hash),
        ("scenario".to_string(), cfg.label()),
    ];
    write_csv(&trial.dataset, &args.out, &metadata)
}

// ---------------------------------------------------------------------------
// replicate
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct ReplicateArgs {
    /// Scenario file (TOML or JSON): one scenario or a `scenarios` list
    #[arg(long)]
    scenario: PathBuf,
    /// Output CSV path (one row per scenario × method)
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Methods to run (default: every method applicable to each scenario's
    /// outcome type)
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Override every scenario's replication count (e.g. 2000 for the full
    /// study, 500 for desk scale)
    #[arg(long)]
    replications: Option<usize>,
    /// Number of imputed datasets
    #[arg(long)]
    imputations: Option<usize>,
    /// Chained-equation cycles per imputation stream
    #[arg(long)]
    fcs_iterations: Option<usize>,
    /// Posterior sampling chains
    #[arg(long)]
    chains: Option<usize>,
    /// Posterior sampling iterations per chain (including burn-in)
    #[arg(long)]
    mcmc_iterations: Option<usize>,
    /// Burn-in iterations discarded from each chain
    #[arg(long)]
    burn_in: Option<usize>,
    /// Bootstrap resamples for residual-inclusion standard errors
    #[arg(long)]
    bootstrap_resamples: Option<usize>,
}

fn default_methods(kind: OutcomeKind) -> Vec<Method> {
    match kind {
        OutcomeKind::Continuous => vec![
            Method::Wald,
            Method::Tsls,
            Method::MlMixture,
            Method::SmcMic,
            Method::Bayes,
        ],
        OutcomeKind::Binary => vec![
            Method::WaldOr,
            Method::Tsri,
            Method::MlMixture,
            Method::SmcMic,
            Method::Bayes,
        ],
    }
}

fn rule_name(rule: BetaCRule) -> &'static str {
    match rule {
        BetaCRule::Zero => "zero",
        BetaCRule::Half => "half",
    }
}

fn missing_name(rule: MissingRule) -> &'static str {
    match rule {
        MissingRule::None => "none",
        MissingRule::Mar20 => "mar20",
    }
}

fn outcome_name(kind: OutcomeKind) -> &'static str {
    match kind {
        OutcomeKind::Continuous => "continuous",
        OutcomeKind::Binary => "binary",
    }
}

fn run_replicate(args: &ReplicateArgs) -> Result<()> {
    let (mut cells, file_text) = load_scenarios(&args.scenario)?;
    if let Some(reps) = args.replications {
        for cell in &mut cells {
            cell.replications = reps;
        }
    }

    let mut base = AnalysisOptions::default();
    if let Some(v) = args.imputations {
        base.imputations = v;
    }
    if let Some(v) = args.fcs_iterations {
        base.fcs_iterations = v;
    }
    if let Some(v) = args.chains {
        base.chains = v;
    }
    if let Some(v) = args.mcmc_iterations {
        base.mcmc_iterations = v;
    }
    if let Some(v) = args.burn_in {
        base.burn_in = v;
    }
    if let Some(v) = args.bootstrap_resamples {
        base.bootstrap_resamples = v;
    }

    let explicit_methods = args
        .methods
        .iter()
        .map(|name| Method::parse(name))
        .collect::<Result<Vec<_>>>()?;

    let mut results: Vec<ScenarioResult> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let methods = if explicit_methods.is_empty() {
            default_methods(cell.outcome_kind)
        } else {
            explicit_methods.clone()
        };
        results.extend(run_factorial(std::slice::from_ref(cell), &methods, &base)?);
    }

    let config_hash = hex_sha256(&[
        &serde_json::to_vec(args).expect("arguments serialize"),
        file_text.as_bytes(),
    ]);
    let seeds: Vec<String> = cells.iter().map(|c| c.seed.to_string()).collect();

    let mut file = fs::File::create(&args.out)?;
    writeln!(file, "# tool_version: {TOOL_VERSION}")?;
    writeln!(file, "# seed: {}", seeds.join(";"))?;
    writeln!(file, "# config_hash: {config_hash}")?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record([
        "scenario",
        "n",
        "psi0",
        "outcome",
        "beta_cz",
        "beta_c_rule",
        "missing_y",
        "replications",
        "seed",
        "truth",
        "method",
        "bias",
        "mce_low",
        "mce_high",
        "coverage",
        "ci_width",
        "rmse",
        "nrep_effective",
        "warnings",
    ])?;
    for result in &results {
        let cfg = &result.scenario;
        let warnings = result.warnings.join("; ");
        for (method, m) in &result.methods {
            let (mce_low, mce_high) = m
                .mce_ci
                .map(|(lo, hi)| (lo.to_string(), hi.to_string()))
                .unwrap_or_default();
            writer.write_record([
                cfg.label(),
                cfg.n.to_string(),
                cfg.psi0.to_string(),
                outcome_name(cfg.outcome_kind).to_string(),
                cfg.beta_cz.to_string(),
                rule_name(cfg.beta_c_rule).to_string(),
                missing_name(cfg.missing_y).to_string(),
                cfg.replications.to_string(),
                cfg.seed.to_string(),
                result.truth.to_string(),
                method.name().to_string(),
                m.bias.to_string(),
                mce_low,
                mce_high,
                m.coverage.to_string(),
                m.ci_width.to_string(),
                m.rmse.to_string(),
                m.nrep_effective.to_string(),
                warnings.clone(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// summarize
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct SummarizeArgs {
    /// Results CSV produced by `replicate` (repeatable)
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Output CSV path for the tidy table
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

/// Metric columns carried from replicate output into the tidy table.
const SUMMARY_METRICS: &[&str] = &[
    "truth",
    "bias",
    "mce_low",
    "mce_high",
    "coverage",
    "ci_width",
    "rmse",
    "nrep_effective",
];

fn run_summarize(args: &SummarizeArgs) -> Result<()> {
    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut seeds: Vec<String> = Vec::new();
    for input in &args.inputs {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(input)?;
        let headers = reader.headers()?.clone();
        let column = |name: &str| -> Result<usize> {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                Error::Data(format!("{}: missing column '{name}'", input.display()))
            })
        };
        let scenario_col = column("scenario")?;
        let seed_col = column("seed")?;
        let method_col = column("method")?;
        let metric_cols = SUMMARY_METRICS
            .iter()
            .map(|name| column(name))
            .collect::<Result<Vec<_>>>()?;
        for record in reader.records() {
            let record = record?;
            let seed = record[seed_col].to_string();
            if !seeds.contains(&seed) {
                seeds.push(seed.clone());
            }
            for (name, &col) in SUMMARY_METRICS.iter().zip(&metric_cols) {
                rows.push([
                    record[scenario_col].to_string(),
                    seed.clone(),
                    record[method_col].to_string(),
                    name.to_string(),
                    record[col].to_string(),
                ]);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no result rows found in the input files".into()));
    }

    let config_hash = hex_sha256(&[&serde_json::to_vec(args).expect("arguments serialize")]);
    let mut file = fs::File::create(&args.out)?;
    writeln!(file, "# tool_version: {TOOL_VERSION}")?;
    writeln!(file, "# seed: {}", seeds.join(";"))?;
    writeln!(file, "# config_hash: {config_hash}")?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["scenario", "seed", "method", "metric", "value"])?;
    for row in &rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}
