//! Command-line driver: ingest pooled trial CSVs or generate calibrated
//! synthetic data, fit the partitioning methods or the one-stage pooled
//! models, and write reproducible artifacts (text/JSON/DOT trees, CSV
//! reports, and a JSON run manifest that captures every tunable).
//!
//! Exit codes: 0 on success, 1 when a model or ingestion step fails (stderr
//! carries a structured `error[kind]: ...` line), 2 on configuration errors
//! (bad flags, unknown scenario or method, malformed schema).
//!
//! Determinism contract: identical invocations write byte-identical
//! artifacts, and `--threads` never changes output — the replicate worker
//! pool reduces results in seed order. The only volatile values are the
//! `timings_ms` block of the manifest and the `runtime_ms` column of
//! `replicate.csv`.

mod render;
mod scenario_file;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ipdtree::dataset::{ingest_csv, ColumnRole, ColumnSpec, Dataset, IngestOptions, Schema};
use ipdtree::glmmtree::AlternationControl;
use ipdtree::methods::{
    pooled_lm, pooled_lm_trial_adjusted, pooled_lmm_random_treatment, run_method, Method,
    MethodControls, MethodError,
};
use ipdtree::mobtree::{GrowControl, NodeKind, SplitKind};
use ipdtree::synthgen::{generate, scenario as library_scenario, GenScenario};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Column mapping matching the header written by `simulate`.
const DEFAULT_SCHEMA: &str =
    "y=outcome,treat=treatment,trial=trial,rmdq0=baseline,age=numeric,sex=categorical";

#[derive(Parser)]
#[command(
    name = "ipdtree",
    version,
    about = "Subgroup discovery from individual-participant data pooled across trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one partitioning method to a CSV and write tree artifacts.
    Fit(FitArgs),
    /// Generate a scenario dataset plus its ground truth.
    Simulate(SimulateArgs),
    /// Fit the one-stage pooled models (plain, trial-adjusted, random-effect).
    Pooled(PooledArgs),
    /// Re-run methods across many seeds of a scenario and summarize.
    Replicate(ReplicateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Text,
    Json,
    Dot,
    CsvReport,
}

/// Tree and alternation tunables shared by `fit` and `replicate`.
#[derive(Args, Serialize)]
struct TreeFlags {
    /// Significance level for the Bonferroni-adjusted instability tests.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Minimum rows per node (default: ten times the node-model dimension).
    #[arg(long)]
    min_node_size: Option<usize>,
    /// Trimming fraction for the supremum test's admissible cut range.
    #[arg(long, default_value_t = 0.10)]
    trim: f64,
    /// Iteration cap for the tree / global-model alternation.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
}

impl TreeFlags {
    fn controls(&self) -> Result<MethodControls, Failure> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_error("--alpha must lie strictly inside (0, 1)"));
        }
        if !(self.trim > 0.0 && self.trim < 0.5) {
            return Err(config_error("--trim must lie strictly inside (0, 0.5)"));
        }
        if self.max_iter == 0 {
            return Err(config_error("--max-iter must be at least 1"));
        }
        Ok(MethodControls {
            grow: GrowControl {
                alpha: self.alpha,
                min_node_size: self.min_node_size,
                trim: self.trim,
                ..GrowControl::default()
            },
            alternation: AlternationControl {
                max_iterations: self.max_iter,
                ..AlternationControl::default()
            },
        })
    }
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV path.
    #[arg(long)]
    input: PathBuf,
    /// Column roles in file order: `name=role,...` with roles outcome,
    /// treatment, trial, numeric, categorical, baseline (a numeric splitter
    /// also used as the designated baseline covariate).
    #[arg(long, default_value = DEFAULT_SCHEMA)]
    schema: String,
    /// Method: MOB, MOB-SI, MOB-RI, metaMOB-RI, metaMOB-SI, palmtree.
    #[arg(long, default_value = "MOB")]
    method: String,
    #[command(flatten)]
    tree: TreeFlags,
    /// Recorded in the manifest; fitting itself is deterministic.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker-pool size. Fitting one model uses a single worker; the flag
    /// never changes output.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Artifact formats (comma-separated): text, json, dot, csv-report.
    #[arg(long, value_delimiter = ',', default_value = "json")]
    format: Vec<Format>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Library scenario name, or path to a scenario file (`base = <name>`
    /// plus overrides).
    #[arg(long)]
    scenario: String,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; writes data.csv, truth.json, manifest.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PooledArgs {
    /// Input CSV path.
    #[arg(long)]
    input: PathBuf,
    /// Column roles, as for `fit`.
    #[arg(long, default_value = DEFAULT_SCHEMA)]
    schema: String,
    /// Output directory; writes pooled.csv, pooled.json, manifest.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    /// Library scenario name or scenario file path.
    #[arg(long)]
    scenario: String,
    /// Methods to run per seed (comma-separated or repeated).
    #[arg(long, required = true, value_delimiter = ',')]
    method: Vec<String>,
    /// Number of seeds to run.
    #[arg(long)]
    n_seeds: usize,
    /// First seed; seeds run seed, seed+1, ..., seed+n_seeds-1.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    tree: TreeFlags,
    /// Worker-pool size for fanning out across seeds.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory; writes replicate.csv, summary.csv, manifest.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Failure carrying the process exit code and a preformatted stderr line.
struct Failure {
    code: i32,
    message: String,
}

fn config_error(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("error[config]: {message}"),
    }
}

fn module_error(kind: &str, err: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("error[{kind}]: {err}"),
    }
}

fn method_error(err: MethodError) -> Failure {
    let kind = match &err {
        MethodError::IncompatibleSpec { .. } => "method",
        MethodError::Tree(_) => "tree",
        MethodError::Alternation(_) => "alternation",
    };
    module_error(kind, err)
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Pooled(args) => cmd_pooled(args),
        Command::Replicate(args) => cmd_replicate(args),
    };
    if let Err(failure) = result {
        eprintln!("{}", failure.message);
        std::process::exit(failure.code);
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn parse_schema(spec: &str) -> Result<Schema, Failure> {
    let mut columns = Vec::new();
    let mut baseline: Option<String> = None;
    for part in spec.split(',') {
        let Some((name, role)) = part.split_once('=') else {
            return Err(config_error(format!(
                "schema entry `{part}` is not of the form name=role"
            )));
        };
        let name = name.trim().to_string();
        let role = match role.trim() {
            "outcome" => ColumnRole::OutcomeNumeric,
            "treatment" => ColumnRole::TreatmentBinary,
            "trial" => ColumnRole::TrialId,
            "numeric" => ColumnRole::SplitterNumeric,
            "categorical" => ColumnRole::SplitterCategorical,
            "baseline" => {
                if let Some(previous) = baseline.replace(name.clone()) {
                    return Err(config_error(format!(
                        "baseline designated twice (`{previous}` and `{name}`)"
                    )));
                }
                ColumnRole::SplitterNumeric
            }
            other => {
                return Err(config_error(format!(
                    "unknown role `{other}` for column `{name}`"
                )))
            }
        };
        columns.push(ColumnSpec { name, role });
    }
    let mut schema = Schema::new(columns).map_err(|e| config_error(e))?;
    if let Some(name) = baseline {
        schema = schema.with_baseline(&name).map_err(|e| config_error(e))?;
    }
    Ok(schema)
}

fn parse_method(name: &str) -> Result<Method, Failure> {
    Method::parse(name).ok_or_else(|| {
        config_error(format!(
            "unknown method `{name}`; expected one of {}",
            Method::ALL.map(Method::name).join(", ")
        ))
    })
}

fn resolve_scenario(value: &str) -> Result<GenScenario, Failure> {
    if let Some(scenario) = library_scenario(value) {
        return Ok(scenario);
    }
    let path = Path::new(value);
    if path.is_file() {
        return scenario_file::parse(path).map_err(config_error);
    }
    Err(config_error(format!(
        "unknown scenario `{value}`: neither a library scenario nor a readable file"
    )))
}

fn load_dataset(input: &Path, schema_spec: &str) -> Result<(Dataset, Schema), Failure> {
    let schema = parse_schema(schema_spec)?;
    if !input.is_file() {
        return Err(config_error(format!(
            "input `{}` does not exist or is not a file",
            input.display()
        )));
    }
    let ds = ingest_csv(input, &schema, &IngestOptions::default())
        .map_err(|e| module_error("dataset", e))?;
    Ok((ds, schema))
}

fn ensure_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| config_error(format!("cannot create `{}`: {e}", dir.display())))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::write(dir.join(name), contents)
        .map_err(|e| module_error("io", format!("writing {name}: {e}")))
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    version: &'static str,
    command: &'a str,
    /// Every tunable that can affect the artifacts' content, fully resolved.
    config: &'a C,
    /// SHA-256 over the canonical JSON serialization of `config`.
    config_hash: String,
    /// Where the artifacts went; provenance only, not part of the hash.
    out: String,
    /// Wall-clock timings; volatile, excluded from determinism comparisons.
    timings_ms: BTreeMap<&'static str, f64>,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    timings_ms: BTreeMap<&'static str, f64>,
) -> Result<(), Failure> {
    let canonical = serde_json::to_vec(config)
        .map_err(|e| module_error("io", format!("serializing manifest config: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        config_hash: format!("{:x}", hasher.finalize()),
        out: dir.display().to_string(),
        timings_ms,
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| module_error("io", format!("serializing manifest: {e}")))?;
    write_artifact(dir, "manifest.json", &body)
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FitConfig<'a> {
    input: String,
    schema: &'a str,
    method: &'a str,
    #[serde(flatten)]
    tree: &'a TreeFlags,
    seed: u64,
    threads: usize,
    format: &'a [Format],
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let total = Instant::now();
    let method = parse_method(&args.method)?;
    let controls = args.tree.controls()?;
    if args.threads == 0 {
        return Err(config_error("--threads must be at least 1"));
    }
    ensure_out_dir(&args.out)?;

    let ingest_start = Instant::now();
    let (ds, _) = load_dataset(&args.input, &args.schema)?;
    let ingest_ms = ms(ingest_start);

    let splitters: Vec<String> = ds.splitters.iter().map(|s| s.name.clone()).collect();
    let fit_start = Instant::now();
    let outcome = run_method(&ds, method, &splitters, &controls).map_err(method_error)?;
    let fit_ms = ms(fit_start);

    for format in &args.format {
        match format {
            Format::Json => {
                let value = render::tree_json(&outcome);
                let body = serde_json::to_string_pretty(&value)
                    .map_err(|e| module_error("io", format!("serializing tree: {e}")))?;
                write_artifact(&args.out, "tree.json", &body)?;
            }
            Format::Text => {
                write_artifact(&args.out, "tree.txt", &render::tree_text(&outcome, &ds))?
            }
            Format::Dot => {
                write_artifact(&args.out, "tree.dot", &render::tree_dot(&outcome, &ds))?
            }
            Format::CsvReport => write_artifact(
                &args.out,
                "leaf_effects.csv",
                &render::leaf_effects_csv(&outcome, &ds)
                    .map_err(|e| module_error("io", e))?,
            )?,
        }
    }

    let config = FitConfig {
        input: args.input.display().to_string(),
        schema: &args.schema,
        method: method.name(),
        tree: &args.tree,
        seed: args.seed,
        threads: args.threads,
        format: &args.format,
    };
    let timings = BTreeMap::from([
        ("ingest", ingest_ms),
        ("fit", fit_ms),
        ("total", ms(total)),
    ]);
    write_manifest(&args.out, "fit", &config, timings)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateConfig<'a> {
    scenario_source: &'a str,
    /// The fully resolved scenario, overrides included.
    scenario: &'a GenScenario,
    seed: u64,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let total = Instant::now();
    let mut scenario = resolve_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario = scenario.with_seed(seed);
    }
    ensure_out_dir(&args.out)?;

    let generate_start = Instant::now();
    // A library scenario cannot be invalid; a scenario file can.
    let (ds, truth) = generate(&scenario).map_err(config_error)?;
    let generate_ms = ms(generate_start);

    let write_start = Instant::now();
    let mut csv_bytes = Vec::new();
    ds.write_csv(&mut csv_bytes)
        .map_err(|e| module_error("dataset", e))?;
    std::fs::write(args.out.join("data.csv"), &csv_bytes)
        .map_err(|e| module_error("io", format!("writing data.csv: {e}")))?;
    let truth_body = serde_json::to_string_pretty(&truth)
        .map_err(|e| module_error("io", format!("serializing ground truth: {e}")))?;
    write_artifact(&args.out, "truth.json", &truth_body)?;

    let config = SimulateConfig {
        scenario_source: &args.scenario,
        scenario: &scenario,
        seed: scenario.seed,
    };
    let timings = BTreeMap::from([
        ("generate", generate_ms),
        ("write", ms(write_start)),
        ("total", ms(total)),
    ]);
    write_manifest(&args.out, "simulate", &config, timings)
}

// ---------------------------------------------------------------------------
// pooled
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PooledConfig<'a> {
    input: String,
    schema: &'a str,
}

fn cmd_pooled(args: PooledArgs) -> Result<(), Failure> {
    let total = Instant::now();
    ensure_out_dir(&args.out)?;
    let ingest_start = Instant::now();
    let (ds, schema) = load_dataset(&args.input, &args.schema)?;
    let ingest_ms = ms(ingest_start);

    let fit_start = Instant::now();
    // The plain pooled comparison is the anchor; it must fit. The
    // trial-aware refinements are skipped with a recorded reason when the
    // data cannot support them (e.g. a single trial).
    let adjust = schema.baseline_name().is_some();
    let plain = pooled_lm(&ds, adjust).map_err(|e| module_error("pooled", e))?;
    let mut entries = vec![render::PooledEntry {
        model: plain.model_label.clone(),
        status: "ok".into(),
        analysis: Some(plain),
    }];
    match pooled_lm_trial_adjusted(&ds) {
        Ok(analysis) => entries.push(render::PooledEntry {
            model: analysis.model_label.clone(),
            status: "ok".into(),
            analysis: Some(analysis),
        }),
        Err(e) => entries.push(render::PooledEntry {
            model: "pooled-lm-trial-adjusted".into(),
            status: format!("skipped: {e}"),
            analysis: None,
        }),
    }
    match pooled_lmm_random_treatment(&ds) {
        Ok(analysis) => entries.push(render::PooledEntry {
            model: analysis.model_label.clone(),
            status: "ok".into(),
            analysis: Some(analysis),
        }),
        Err(e) => entries.push(render::PooledEntry {
            model: "pooled-lmm-random-treatment".into(),
            status: format!("skipped: {e}"),
            analysis: None,
        }),
    }
    let fit_ms = ms(fit_start);

    write_artifact(
        &args.out,
        "pooled.csv",
        &render::pooled_csv(&entries).map_err(|e| module_error("io", e))?,
    )?;
    let json = serde_json::json!({ "models": entries });
    let body = serde_json::to_string_pretty(&json)
        .map_err(|e| module_error("io", format!("serializing pooled report: {e}")))?;
    write_artifact(&args.out, "pooled.json", &body)?;

    let config = PooledConfig {
        input: args.input.display().to_string(),
        schema: &args.schema,
    };
    let timings = BTreeMap::from([
        ("ingest", ingest_ms),
        ("fit", fit_ms),
        ("total", ms(total)),
    ]);
    write_manifest(&args.out, "pooled", &config, timings)
}

// ---------------------------------------------------------------------------
// replicate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ReplicateConfig<'a> {
    scenario_source: &'a str,
    scenario: &'a GenScenario,
    methods: Vec<&'static str>,
    n_seeds: usize,
    first_seed: u64,
    #[serde(flatten)]
    tree: &'a TreeFlags,
    threads: usize,
}

fn replicate_row(
    seed: u64,
    ds: &Dataset,
    method: Method,
    splitters: &[String],
    controls: &MethodControls,
) -> render::RepRow {
    let start = Instant::now();
    match run_method(ds, method, splitters, controls) {
        Err(e) => render::RepRow::failed(seed, method.name(), format!("error: {e}"), ms(start)),
        Ok(outcome) => {
            let tree = outcome.fit.tree();
            let (root_variable, root_cut) = match &tree.nodes[0].kind {
                NodeKind::Leaf { .. } => (None, None),
                NodeKind::Internal { split, .. } => {
                    let cut = match &split.kind {
                        SplitKind::NumericThreshold { threshold } => format!("{threshold}"),
                        SplitKind::CategoricalSubset { left_levels } => {
                            render::level_names(ds, &split.variable, left_levels).join("|")
                        }
                    };
                    (Some(split.variable.clone()), Some(cut))
                }
            };
            let leaf_effects = outcome
                .report
                .leaf_effects
                .iter()
                .map(|e| match e.estimate {
                    Some(est) => format!("{}={est}", e.leaf_id),
                    None => format!("{}=na", e.leaf_id),
                })
                .collect::<Vec<_>>()
                .join(";");
            render::RepRow {
                seed,
                method: method.name(),
                status: "ok".into(),
                n_leaves: Some(outcome.report.n_leaves),
                root_variable,
                root_cut,
                leaf_effects: Some(leaf_effects),
                tau0_sq: outcome.report.tau0_sq,
                tau1_sq: outcome.report.tau1_sq,
                converged: outcome.report.converged,
                runtime_ms: ms(start),
            }
        }
    }
}

fn cmd_replicate(args: ReplicateArgs) -> Result<(), Failure> {
    let total = Instant::now();
    let scenario = resolve_scenario(&args.scenario)?;
    let methods: Vec<Method> = args
        .method
        .iter()
        .map(|m| parse_method(m))
        .collect::<Result<_, _>>()?;
    if args.n_seeds == 0 {
        return Err(config_error("--n-seeds must be at least 1"));
    }
    if args.threads == 0 {
        return Err(config_error("--threads must be at least 1"));
    }
    let controls = args.tree.controls()?;
    ensure_out_dir(&args.out)?;

    let seeds: Vec<u64> = (0..args.n_seeds).map(|i| args.seed + i as u64).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| config_error(format!("cannot build worker pool: {e}")))?;

    // Fan out across seeds; collect() preserves seed order, so artifacts
    // are identical for any worker count.
    let per_seed: Vec<Vec<render::RepRow>> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| {
                let seeded = scenario.clone().with_seed(seed);
                match generate(&seeded) {
                    Err(e) => methods
                        .iter()
                        .map(|&m| {
                            render::RepRow::failed(seed, m.name(), format!("error: {e}"), 0.0)
                        })
                        .collect(),
                    Ok((ds, _)) => {
                        let splitters: Vec<String> =
                            ds.splitters.iter().map(|s| s.name.clone()).collect();
                        methods
                            .iter()
                            .map(|&m| replicate_row(seed, &ds, m, &splitters, &controls))
                            .collect()
                    }
                }
            })
            .collect()
    });
    let rows: Vec<render::RepRow> = per_seed.into_iter().flatten().collect();

    let rule_variable = scenario
        .subgroup_rule
        .as_ref()
        .map(|r| r.variable.clone());
    write_artifact(
        &args.out,
        "replicate.csv",
        &render::replicate_csv(&rows).map_err(|e| module_error("io", e))?,
    )?;
    write_artifact(
        &args.out,
        "summary.csv",
        &render::replicate_summary_csv(&rows, &methods, rule_variable.as_deref())
            .map_err(|e| module_error("io", e))?,
    )?;

    let config = ReplicateConfig {
        scenario_source: &args.scenario,
        scenario: &scenario,
        methods: methods.iter().map(|m| m.name()).collect(),
        n_seeds: args.n_seeds,
        first_seed: args.seed,
        tree: &args.tree,
        threads: args.threads,
    };
    let timings = BTreeMap::from([("total", ms(total))]);
    write_manifest(&args.out, "replicate", &config, timings)
}
