//! Command-line front end: simulate synthetic populations, fit the global
//! model, forecast and blend sub-population rates, compute prediction
//! errors, and run the rolling-window evaluation, all driven by one JSON
//! configuration file with dotted-path flag overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use credmort::credibility::{write_credibility_csv, CredibilityOptions};
use credmort::evaluate::{run_replications, write_metrics_csv, EvalPlan};
use credmort::forecast::{fit_indices, MeanMode};
use credmort::gapc::{self, ModelFamily};
use credmort::msep::write_msep_csv;
use credmort::pipeline::{credibility_rows, fan_analysis, msep_rows, FanRow, FitDocument};
use credmort::popsim::{simulate, write_theta_csv, SimConfig};
use credmort::streams::{derive_seed, tag};
use credmort::table::{read_csv, write_csv, MortalityTable};

const FAN_SIMS: usize = 20_000;

const CONFIG_REFERENCE: &str = "\
Configuration file (JSON). Every key is optional; defaults shown. Flags
override keys by dotted path, e.g. `--forecast.h 5` or `--simulate.seed=7`;
the CREDMORT_SEED environment variable overrides the top-level seed. Unknown
keys are rejected, all violations reported at once.

  seed                    master seed; when set it also drives simulate.seed
                          and the evaluation seed (default: unset)
  simulate.ages           output age span (default {\"start\":0,\"end\":110})
  simulate.years          output year span (default {\"start\":1995,\"end\":2025})
  simulate.cohort_sizes   entrants per cohort, one per sub-population
                          (default [5000,500,94500])
  simulate.theta_laws     risk-level law per sub-population, tagged by \"law\":
                          constant{value} | uniform{lo,hi} |
                          lognormal_mean_one{variance} |
                          two_point_mean_one{variance}
                          (default [uniform 0.7..0.8, uniform 1.2..1.3,
                          constant 1])
  simulate.baseline       log-odds-of-death surface, tagged by \"kind\":
                          parametric{intercept,age_slope,time_slope,ref_year} |
                          matrix{ages,years,delta} | matrix_csv{path}
                          (default parametric: -9.5 + 0.085*age
                          - 0.01*(year-1995))
  simulate.seed           simulation seed (default 42)
  global_model.family     \"LC\" | \"APC\" | \"RH\" (default \"LC\")
  forecast.h              forecast horizon in years (default 5)
  forecast.mode           \"lognormal\" | \"plugin\" forecast mean
                          (default \"lognormal\")
  credibility.use_binned  smooth per-age risk levels into age bins
                          (default true)
  credibility.cv_folds    cross-validation folds for the binning (default 5)
  evaluate.t_prime        last in-sample year of the first window
                          (default 2019)
  evaluate.h              rolling-window steps (default 6)
  evaluate.age_groups     scoring brackets as {start,end} spans
                          (default five-year brackets over ages 16..85)
  evaluate.approaches     subset of [\"A\",\"B\",\"C\",\"D\"] (default all)
  evaluate.replications   independent simulation copies (default 3)
  io.out_dir              artifact directory (default \"out\")
  io.super_path           read the reference population from this CSV instead
                          of simulating (default: simulate)
  io.sub_paths            sub-population CSVs used with super_path
                          (default [])

The evaluate command always simulates its data from the simulate section;
global_model.family, forecast.mode, the credibility section and the master
seed feed its plan. Exit status: 0 success, 2 configuration error, 1 runtime
failure. Errors print as a single `error: ...` line on standard error.";

#[derive(Parser)]
#[command(
    name = "credmort",
    version,
    about = "Forecast sub-population mortality by blending a global model with relative-survival levels",
    after_help = CONFIG_REFERENCE
)]
struct Cli {
    /// JSON configuration file; omitted means all defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Cap worker threads; any value yields output identical to --threads 1.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate populations; writes population_<id>.csv and theta_true.csv.
    #[command(after_help = CONFIG_REFERENCE)]
    Simulate,
    /// Fit the global model; writes fit_global.json.
    #[command(after_help = CONFIG_REFERENCE)]
    Fit,
    /// Fit, forecast, and blend; writes fit_forecast.json and credibility.csv.
    #[command(after_help = CONFIG_REFERENCE)]
    Forecast,
    /// Closed-form prediction errors; writes msep.csv.
    #[command(after_help = CONFIG_REFERENCE)]
    Msep,
    /// Rolling-window comparison of approaches; writes results.csv and fan.csv.
    #[command(after_help = CONFIG_REFERENCE)]
    Evaluate,
}

fn default_family() -> ModelFamily {
    ModelFamily::Lc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GlobalModelConfig {
    #[serde(default = "default_family")]
    family: ModelFamily,
}

impl Default for GlobalModelConfig {
    fn default() -> Self {
        GlobalModelConfig { family: default_family() }
    }
}

fn default_horizon() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ForecastConfig {
    #[serde(default = "default_horizon")]
    h: usize,
    #[serde(default)]
    mode: MeanMode,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig { h: default_horizon(), mode: MeanMode::default() }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IoConfig {
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
    #[serde(default)]
    super_path: Option<PathBuf>,
    #[serde(default)]
    sub_paths: Vec<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: default_out_dir(), super_path: None, sub_paths: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct RunConfig {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    simulate: SimConfig,
    #[serde(default)]
    global_model: GlobalModelConfig,
    #[serde(default)]
    forecast: ForecastConfig,
    #[serde(default)]
    credibility: CredibilityOptions,
    #[serde(default)]
    evaluate: EvalPlan,
    #[serde(default)]
    io: IoConfig,
}

/// Allowed structure of the configuration document. The walker rejects any
/// key outside this tree so typos never silently fall back to defaults.
enum Schema {
    Any,
    Object(&'static [(&'static str, Schema)]),
    Array(&'static Schema),
    Tagged {
        tag: &'static str,
        variants: &'static [(&'static str, &'static [(&'static str, Schema)])],
    },
}

const SPAN: Schema =
    Schema::Object(&[("start", Schema::Any), ("end", Schema::Any)]);

const THETA_LAW: Schema = Schema::Tagged {
    tag: "law",
    variants: &[
        ("constant", &[("value", Schema::Any)]),
        ("uniform", &[("lo", Schema::Any), ("hi", Schema::Any)]),
        ("lognormal_mean_one", &[("variance", Schema::Any)]),
        ("two_point_mean_one", &[("variance", Schema::Any)]),
    ],
};

const BASELINE: Schema = Schema::Tagged {
    tag: "kind",
    variants: &[
        (
            "parametric",
            &[
                ("intercept", Schema::Any),
                ("age_slope", Schema::Any),
                ("time_slope", Schema::Any),
                ("ref_year", Schema::Any),
            ],
        ),
        ("matrix", &[("ages", SPAN), ("years", SPAN), ("delta", Schema::Any)]),
        ("matrix_csv", &[("path", Schema::Any)]),
    ],
};

const CONFIG_SCHEMA: Schema = Schema::Object(&[
    ("seed", Schema::Any),
    (
        "simulate",
        Schema::Object(&[
            ("ages", SPAN),
            ("years", SPAN),
            ("cohort_sizes", Schema::Any),
            ("theta_laws", Schema::Array(&THETA_LAW)),
            ("baseline", BASELINE),
            ("seed", Schema::Any),
        ]),
    ),
    ("global_model", Schema::Object(&[("family", Schema::Any)])),
    ("forecast", Schema::Object(&[("h", Schema::Any), ("mode", Schema::Any)])),
    (
        "credibility",
        Schema::Object(&[("use_binned", Schema::Any), ("cv_folds", Schema::Any)]),
    ),
    (
        "evaluate",
        Schema::Object(&[
            ("t_prime", Schema::Any),
            ("h", Schema::Any),
            ("age_groups", Schema::Array(&SPAN)),
            ("approaches", Schema::Any),
            ("replications", Schema::Any),
        ]),
    ),
    (
        "io",
        Schema::Object(&[
            ("out_dir", Schema::Any),
            ("super_path", Schema::Any),
            ("sub_paths", Schema::Any),
        ]),
    ),
]);

fn join_path(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn check_schema(value: &Value, schema: &Schema, path: &str, violations: &mut Vec<String>) {
    match schema {
        Schema::Any => {}
        Schema::Object(fields) => {
            let Some(map) = value.as_object() else {
                let at = if path.is_empty() { "the configuration root" } else { path };
                violations.push(format!("{at} must be an object"));
                return;
            };
            for (key, sub) in map {
                match fields.iter().find(|(name, _)| name == key) {
                    Some((_, field_schema)) => {
                        check_schema(sub, field_schema, &join_path(path, key), violations)
                    }
                    None => violations.push(format!("unknown config key {}", join_path(path, key))),
                }
            }
        }
        Schema::Array(inner) => {
            let Some(items) = value.as_array() else {
                violations.push(format!("{path} must be an array"));
                return;
            };
            for (i, item) in items.iter().enumerate() {
                check_schema(item, inner, &format!("{path}[{i}]"), violations);
            }
        }
        Schema::Tagged { tag, variants } => {
            let Some(map) = value.as_object() else {
                violations.push(format!("{path} must be an object"));
                return;
            };
            let selector = match map.get(*tag) {
                Some(Value::String(s)) => s.clone(),
                Some(_) => {
                    violations.push(format!("{} must be a string", join_path(path, tag)));
                    return;
                }
                None => {
                    violations.push(format!("{path} is missing its \"{tag}\" selector"));
                    return;
                }
            };
            let Some((_, fields)) = variants.iter().find(|(name, _)| *name == selector) else {
                let known: Vec<&str> = variants.iter().map(|(name, _)| *name).collect();
                violations.push(format!(
                    "{} has unknown value \"{selector}\" (expected one of {})",
                    join_path(path, tag),
                    known.join(", ")
                ));
                return;
            };
            for (key, sub) in map {
                if key == tag {
                    continue;
                }
                match fields.iter().find(|(name, _)| name == key) {
                    Some((_, field_schema)) => {
                        check_schema(sub, field_schema, &join_path(path, key), violations)
                    }
                    None => violations.push(format!("unknown config key {}", join_path(path, key))),
                }
            }
        }
    }
}

/// Pull `--section.key value` and `--section.key=value` tokens out of the
/// argument list before clap sees it. Values parse as JSON where possible
/// and fall back to plain strings.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, Value)>), String> {
    let mut kept = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--") else {
            kept.push(arg);
            continue;
        };
        let (key, inline_value) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (body, None),
        };
        let dotted = key.contains('.')
            && key.split('.').all(|seg| {
                !seg.is_empty()
                    && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            });
        if !dotted {
            kept.push(arg);
            continue;
        }
        let raw = match inline_value {
            Some(v) => v,
            None => iter
                .next()
                .ok_or_else(|| format!("override --{key} is missing a value"))?,
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        overrides.push((key.to_string(), value));
    }
    Ok((kept, overrides))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let segments: Vec<&str> = key.split('.').collect();
    let mut current = root;
    for segment in &segments[..segments.len() - 1] {
        let map = current
            .as_object_mut()
            .ok_or_else(|| format!("override --{key} descends into a non-object value"))?;
        current = map
            .entry(segment.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    let map = current
        .as_object_mut()
        .ok_or_else(|| format!("override --{key} descends into a non-object value"))?;
    map.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, String> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| format!("config {} is not valid JSON: {e}", p.display()))?
        }
        None => Value::Object(serde_json::Map::new()),
    };
    for (key, override_value) in overrides {
        set_path(&mut value, key, override_value.clone())?;
    }

    let mut violations = Vec::new();
    check_schema(&value, &CONFIG_SCHEMA, "", &mut violations);
    if !violations.is_empty() {
        return Err(violations.join("; "));
    }

    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| format!("invalid config value: {e}"))?;

    let master = match std::env::var("CREDMORT_SEED") {
        Ok(text) => Some(text.parse::<u64>().map_err(|_| {
            format!("CREDMORT_SEED must be a non-negative integer, got \"{text}\"")
        })?),
        Err(_) => config.seed,
    };
    if let Some(seed) = master {
        config.seed = Some(seed);
        config.simulate.seed = seed;
    }

    // the evaluation plan inherits the shared sections so the config file
    // states each choice exactly once
    config.evaluate.family = config.global_model.family;
    config.evaluate.mean_mode = config.forecast.mode;
    config.evaluate.credibility = config.credibility.clone();
    config.evaluate.seed = master.unwrap_or(config.simulate.seed);
    Ok(config)
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(pair) => pair,
        Err(message) => {
            eprintln!("error: {message}");
            return 2;
        }
    };
    let cli = Cli::parse_from(args);

    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} worker threads: {e}");
            return 2;
        }
    }

    let config = match load_config(cli.config.as_deref(), &overrides) {
        Ok(config) => config,
        Err(message) => {
            eprintln!("error: {message}");
            return 2;
        }
    };

    let result = match cli.command {
        Command::Simulate => cmd_simulate(&config),
        Command::Fit => cmd_fit(&config),
        Command::Forecast => cmd_forecast(&config),
        Command::Msep => cmd_msep(&config),
        Command::Evaluate => cmd_evaluate(&config),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn ensure_out_dir(config: &RunConfig) -> anyhow::Result<&Path> {
    let dir = config.io.out_dir.as_path();
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

/// Reference and sub-population tables: read from the configured CSVs when
/// `io.super_path` is set, otherwise simulate from the simulate section.
fn load_inputs(config: &RunConfig) -> anyhow::Result<(MortalityTable, Vec<MortalityTable>)> {
    match &config.io.super_path {
        Some(path) => {
            let super_table = read_csv(path)
                .with_context(|| format!("cannot read reference table {}", path.display()))?;
            let mut subs = Vec::with_capacity(config.io.sub_paths.len());
            for sub_path in &config.io.sub_paths {
                let table = read_csv(sub_path).with_context(|| {
                    format!("cannot read sub-population table {}", sub_path.display())
                })?;
                subs.push(table);
            }
            eprintln!(
                "loaded reference table {} and {} sub-population table(s)",
                path.display(),
                subs.len()
            );
            Ok((super_table, subs))
        }
        None => {
            let data = simulate(&config.simulate).context("simulation failed")?;
            eprintln!(
                "simulated {} sub-population(s), ages {}-{}, years {}-{} (seed {})",
                data.tables.len(),
                config.simulate.ages.start,
                config.simulate.ages.end,
                config.simulate.years.start,
                config.simulate.years.end,
                config.simulate.seed
            );
            Ok((data.aggregate, data.tables))
        }
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_simulate(config: &RunConfig) -> anyhow::Result<()> {
    let out_dir = ensure_out_dir(config)?;
    let data = simulate(&config.simulate).context("simulation failed")?;
    let aggregate_path = out_dir.join("population_0.csv");
    write_csv(&data.aggregate, &aggregate_path)
        .with_context(|| format!("cannot write {}", aggregate_path.display()))?;
    eprintln!("wrote {}", aggregate_path.display());
    for table in &data.tables {
        let path = out_dir.join(format!("population_{}.csv", table.population_id()));
        write_csv(table, &path).with_context(|| format!("cannot write {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    let theta_path = out_dir.join("theta_true.csv");
    let theta_file = std::fs::File::create(&theta_path)
        .with_context(|| format!("cannot write {}", theta_path.display()))?;
    write_theta_csv(&data.theta_true, theta_file)
        .with_context(|| format!("cannot write {}", theta_path.display()))?;
    eprintln!("wrote {}", theta_path.display());
    Ok(())
}

fn cmd_fit(config: &RunConfig) -> anyhow::Result<()> {
    let out_dir = ensure_out_dir(config)?;
    let (super_table, _) = load_inputs(config)?;
    let family = config.global_model.family;
    let fit = gapc::fit(&super_table, family)
        .with_context(|| format!("{family} fit on the reference table failed"))?;
    eprintln!(
        "fitted {family}: converged={} deviance={:.3} bic={:.3}",
        fit.converged, fit.deviance, fit.bic
    );
    let doc = FitDocument { fit, forecast: None };
    write_text(&out_dir.join("fit_global.json"), &format!("{}\n", doc.to_json()?))
}

fn cmd_forecast(config: &RunConfig) -> anyhow::Result<()> {
    let out_dir = ensure_out_dir(config)?;
    let (super_table, subs) = load_inputs(config)?;
    let family = config.global_model.family;
    let fit = gapc::fit(&super_table, family)
        .with_context(|| format!("{family} fit on the reference table failed"))?;
    let indices =
        fit_indices(&fit, config.forecast.h).context("index forecasting failed")?;
    eprintln!(
        "forecasting {} year(s) past {} under {family}",
        config.forecast.h, fit.years.end
    );

    let mut rows = Vec::new();
    for sub in &subs {
        let sub_rows =
            credibility_rows(&fit, &indices, sub, config.forecast.mode, &config.credibility)
                .with_context(|| {
                    format!("credibility blending failed for population {}", sub.population_id())
                })?;
        rows.extend(sub_rows);
    }
    let doc = FitDocument { fit, forecast: Some(indices) };
    write_text(&out_dir.join("fit_forecast.json"), &format!("{}\n", doc.to_json()?))?;

    let cred_path = out_dir.join("credibility.csv");
    let cred_file = std::fs::File::create(&cred_path)
        .with_context(|| format!("cannot write {}", cred_path.display()))?;
    write_credibility_csv(&rows, cred_file)
        .with_context(|| format!("cannot write {}", cred_path.display()))?;
    eprintln!("wrote {} ({} rows)", cred_path.display(), rows.len());
    Ok(())
}

fn cmd_msep(config: &RunConfig) -> anyhow::Result<()> {
    let out_dir = ensure_out_dir(config)?;
    let (super_table, subs) = load_inputs(config)?;
    let family = config.global_model.family;
    let fit = gapc::fit(&super_table, family)
        .with_context(|| format!("{family} fit on the reference table failed"))?;
    let indices =
        fit_indices(&fit, config.forecast.h).context("index forecasting failed")?;

    let mut rows = Vec::new();
    for sub in &subs {
        let sub_rows = msep_rows(&fit, &indices, sub, config.forecast.mode, &config.credibility)
            .with_context(|| {
                format!(
                    "prediction-error decomposition failed for population {}",
                    sub.population_id()
                )
            })?;
        rows.extend(sub_rows);
    }
    let msep_path = out_dir.join("msep.csv");
    let msep_file = std::fs::File::create(&msep_path)
        .with_context(|| format!("cannot write {}", msep_path.display()))?;
    write_msep_csv(&rows, msep_file)
        .with_context(|| format!("cannot write {}", msep_path.display()))?;
    eprintln!("wrote {} ({} rows)", msep_path.display(), rows.len());
    Ok(())
}

fn cmd_evaluate(config: &RunConfig) -> anyhow::Result<()> {
    let out_dir = ensure_out_dir(config)?;
    let plan = &config.evaluate;
    eprintln!(
        "evaluating {} approach(es) over {} window step(s) from {}, {} replication(s)",
        plan.approaches.len(),
        plan.h,
        plan.t_prime,
        plan.replications
    );
    let rows = run_replications(&config.simulate, plan).context("evaluation failed")?;
    let results_path = out_dir.join("results.csv");
    let results_file = std::fs::File::create(&results_path)
        .with_context(|| format!("cannot write {}", results_path.display()))?;
    write_metrics_csv(&rows, results_file)
        .with_context(|| format!("cannot write {}", results_path.display()))?;
    eprintln!("wrote {} ({} rows)", results_path.display(), rows.len());

    let data = simulate(&config.simulate).context("simulation failed")?;
    let train = data
        .aggregate
        .restrict_years(plan.t_prime)
        .context("cannot restrict the reference table to the in-sample window")?;
    let fit = gapc::fit(&train, plan.family)
        .with_context(|| format!("{} fit on the reference table failed", plan.family))?;
    let mut fan: Vec<FanRow> = Vec::new();
    for (index, sub) in data.tables.iter().enumerate() {
        let sub_rows = fan_analysis(
            &fit,
            sub,
            plan.t_prime,
            plan.h,
            plan.mean_mode,
            &plan.credibility,
            FAN_SIMS,
            derive_seed(plan.seed, &[tag::POISSON_BOUNDS, index as u64]),
        )
        .with_context(|| {
            format!("fan analysis failed for population {}", sub.population_id())
        })?;
        fan.extend(sub_rows);
    }
    let fan_path = out_dir.join("fan.csv");
    let fan_file = std::fs::File::create(&fan_path)
        .with_context(|| format!("cannot write {}", fan_path.display()))?;
    credmort::pipeline::write_fan_csv(&fan, fan_file)
        .with_context(|| format!("cannot write {}", fan_path.display()))?;
    eprintln!("wrote {} ({} rows)", fan_path.display(), fan.len());
    Ok(())
}
