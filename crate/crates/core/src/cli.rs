//! Command-line front end: config loading, artifact layout and the
//! subcommands behind the `inferbench` binary.

use std::fs;
use std::io::{BufReader, IsTerminal, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::energy::{CarbonFactors, PowerTrace};
use crate::loadgen::{
    execute_run, read_samples_csv, run_batch_sweep, validate_batch_sweep, write_samples_csv,
    RawRun, RunError, RunPlan, TrafficModel, DEFAULT_MAX_IN_FLIGHT, DEFAULT_WARMUP_ITERATIONS,
};
use crate::metrics::{Quantile, DEFAULT_QUANTILES};
use crate::power::PowerSourceConfig;
use crate::protocol::synthetic::{serve, serve_tcp, SyntheticSpec};
use crate::protocol::{check_conformance, Handshake, RunnerSession, SessionOptions, Transport};
use crate::report::{
    build_record, default_objectives, emit_json, emit_table, load_json, merge_reports,
    pareto_frontier, render_frontier, FailureKind, Metric, Objective, RecordContext,
    ReportDocument, ReportError, RunFailure, TableFormat, TableOptions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

pub const MANIFEST_VERSION: u32 = 1;
const TRANSCRIPT_TAIL: usize = 20;

/// A config problem located by its key path, e.g. `carbon.pue`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config error at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: &str, message: impl ToString) -> Self {
        Self {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("runner: {0}")]
    Runner(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn default_warmup() -> u32 {
    DEFAULT_WARMUP_ITERATIONS
}

fn default_request_timeout_s() -> f64 {
    60.0
}

fn default_connect_timeout_s() -> f64 {
    10.0
}

fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

fn default_output() -> PathBuf {
    PathBuf::from("bench-output")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectives: Option<Vec<Objective>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<Quantile>>,
}

/// Declarative description of one run or sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub runner: Transport,
    pub traffic: TrafficModel,
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_sweep: Option<Vec<u32>>,
    pub power: PowerSourceConfig,
    pub carbon: CarbonFactors,
    /// Not archived, so the fingerprint does not depend on where results go.
    #[serde(default = "default_output", skip_serializing)]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_request_timeout_s")]
    pub request_timeout_s: f64,
    #[serde(default = "default_connect_timeout_s")]
    pub connect_timeout_s: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_length: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_ref: Option<String>,
    #[serde(default)]
    pub report: ReportConfig,
}

fn positive_seconds(path: &str, v: f64) -> Result<Duration, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(Duration::from_secs_f64(v))
    } else {
        Err(ConfigError::at(
            path,
            format!("must be a positive number of seconds, got {v}"),
        ))
    }
}

fn plan_message(e: RunError) -> String {
    match e {
        RunError::Plan(m) => m,
        other => other.to_string(),
    }
}

impl BenchConfig {
    /// Parses and validates. Errors carry the JSON key path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            ConfigError::at(&path, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(Self::from_json(&text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.runner {
            Transport::Command(argv) if argv.is_empty() => {
                return Err(ConfigError::at("runner.command", "must name a program"))
            }
            Transport::Tcp(addr) if addr.is_empty() => {
                return Err(ConfigError::at("runner.tcp", "must be host:port"))
            }
            _ => {}
        }
        self.traffic
            .validate()
            .map_err(|e| ConfigError::at("traffic", plan_message(e)))?;
        if let Some(sweep) = &self.batch_sweep {
            validate_batch_sweep(sweep)
                .map_err(|e| ConfigError::at("batch_sweep", plan_message(e)))?;
        }
        self.power
            .validate()
            .map_err(|e| ConfigError::at("power", e))?;
        positive_seconds("request_timeout_s", self.request_timeout_s)?;
        positive_seconds("connect_timeout_s", self.connect_timeout_s)?;
        if self.max_in_flight == 0 {
            return Err(ConfigError::at("max_in_flight", "must be >= 1"));
        }
        if matches!(&self.report.objectives, Some(o) if o.is_empty()) {
            return Err(ConfigError::at(
                "report.objectives",
                "must name at least one objective",
            ));
        }
        Ok(())
    }

    pub fn to_plan(&self) -> Result<RunPlan, ConfigError> {
        let mut plan = RunPlan::new(
            self.traffic.clone(),
            self.power.clone(),
            self.carbon.clone(),
        );
        plan.warmup_iterations = self.warmup;
        plan.batch_sweep = self.batch_sweep.clone();
        plan.seed = self.seed;
        plan.request_timeout = positive_seconds("request_timeout_s", self.request_timeout_s)?;
        plan.max_in_flight = self.max_in_flight;
        plan.sequence_length = self.sequence_length;
        plan.payload_ref = self.payload_ref.clone();
        Ok(plan)
    }

    pub fn quantiles(&self) -> Vec<Quantile> {
        self.report
            .quantiles
            .clone()
            .unwrap_or_else(|| DEFAULT_QUANTILES.to_vec())
    }

    /// The archived form: pretty JSON with a trailing newline.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------- artifacts

/// Files and metadata of one stored run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArtifact {
    pub traffic: TrafficModel,
    pub seed: u64,
    pub samples_file: String,
    pub trace_file: String,
    pub power_source_id: String,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_origin_ns: Option<u64>,
}

/// `run.json`: everything replay needs besides the CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub config_fingerprint: String,
    pub handshake: Handshake,
    pub carbon: CarbonFactors,
    pub quantiles: Vec<Quantile>,
    pub runs: Vec<RunArtifact>,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes samples and trace of `run` into `dir` and returns its manifest
/// entry.
pub fn store_run(dir: &Path, run: &RawRun, suffix: &str) -> Result<RunArtifact, CliError> {
    let samples_file = format!("samples{suffix}.csv");
    let trace_file = format!("trace{suffix}.csv");
    let mut samples = Vec::new();
    write_samples_csv(&run.samples, &run.items_processed, &mut samples)?;
    write_file(&dir.join(&samples_file), &samples)?;
    write_file(&dir.join(&trace_file), run.trace.to_csv_string().as_bytes())?;
    Ok(RunArtifact {
        traffic: run.traffic.clone(),
        seed: run.seed,
        samples_file,
        trace_file,
        power_source_id: run.trace.source_id().to_string(),
        window_start_ns: run.window_start_ns,
        window_end_ns: run.window_end_ns,
        schedule_origin_ns: run.schedule_origin_ns,
    })
}

pub fn load_run(dir: &Path, artifact: &RunArtifact) -> Result<RawRun, CliError> {
    let samples_path = dir.join(&artifact.samples_file);
    let file = fs::File::open(&samples_path).map_err(io_err(&samples_path))?;
    let (samples, items_processed) = read_samples_csv(BufReader::new(file))?;
    let trace_path = dir.join(&artifact.trace_file);
    let file = fs::File::open(&trace_path).map_err(io_err(&trace_path))?;
    let trace = PowerTrace::read_csv(artifact.power_source_id.clone(), BufReader::new(file))
        .map_err(|e| CliError::Io {
            path: trace_path.clone(),
            message: e.to_string(),
        })?;
    Ok(RawRun {
        traffic: artifact.traffic.clone(),
        seed: artifact.seed,
        samples,
        items_processed,
        trace,
        window_start_ns: artifact.window_start_ns,
        window_end_ns: artifact.window_end_ns,
        schedule_origin_ns: artifact.schedule_origin_ns,
    })
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join("run.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.manifest_version != MANIFEST_VERSION {
        return Err(CliError::Io {
            path,
            message: format!("unsupported manifest_version {}", manifest.manifest_version),
        });
    }
    Ok(manifest)
}

/// Recomputes the report of a stored run from its files alone.
pub fn report_from_artifacts(dir: &Path) -> Result<ReportDocument, CliError> {
    let manifest = read_manifest(dir)?;
    let ctx = RecordContext {
        config_fingerprint: manifest.config_fingerprint.clone(),
        quantiles: manifest.quantiles.clone(),
    };
    let mut records = Vec::with_capacity(manifest.runs.len());
    for artifact in &manifest.runs {
        let run = load_run(dir, artifact)?;
        records.push(build_record(
            &manifest.handshake,
            &run,
            &manifest.carbon,
            &ctx,
        )?);
    }
    Ok(ReportDocument::new(records, manifest.failures))
}

/// 1 when a run aborted or nothing was measured, 2 when a run exceeded
/// the error budget, 0 otherwise.
pub fn exit_code(doc: &ReportDocument) -> i32 {
    if doc.records.is_empty() || doc.failures.iter().any(|f| f.kind == FailureKind::Aborted) {
        EXIT_FAILURE
    } else if !doc.failures.is_empty() || doc.records.iter().any(|r| !r.valid) {
        EXIT_INVALID
    } else {
        EXIT_OK
    }
}

fn write_report(dir: &Path, doc: &ReportDocument) -> Result<(), CliError> {
    write_file(&dir.join("report.json"), emit_json(doc).as_bytes())?;
    let csv = emit_table(&doc.records, TableFormat::Csv, &TableOptions::default());
    write_file(&dir.join("report.csv"), csv.as_bytes())
}

fn table_options() -> TableOptions {
    TableOptions {
        color: TableOptions::from_env().color && std::io::stdout().is_terminal(),
    }
}

fn print_summary(doc: &ReportDocument, objectives: Option<&[Objective]>) -> Result<(), CliError> {
    let mut out = String::new();
    if !doc.records.is_empty() {
        out.push_str(&emit_table(
            &doc.records,
            TableFormat::Text,
            &table_options(),
        ));
        let objectives = objectives
            .map(<[Objective]>::to_vec)
            .unwrap_or_else(|| default_objectives(&doc.records));
        let analysis = pareto_frontier(&doc.records, &objectives)?;
        out.push('\n');
        out.push_str(&render_frontier(&doc.records, &analysis));
    }
    for f in &doc.failures {
        out.push_str(&format!(
            "FAILED {} (B={}): {} after {} samples\n",
            f.traffic, f.batch_size, f.reason, f.completed_samples
        ));
    }
    print!("{out}");
    let _ = std::io::stdout().flush();
    Ok(())
}

// ---------------------------------------------------------------- commands

#[derive(Debug, Parser)]
#[command(
    name = "inferbench",
    version,
    about = "Inference latency, throughput, energy and carbon benchmarking"
)]
pub struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute the configured run and write report.json, report.csv and trace.csv.
    Run(RunArgs),
    /// Execute one run per entry of the config's batch_sweep.
    Sweep(RunArgs),
    /// Recompute the report of a stored run without a runner.
    Replay(ReplayArgs),
    /// Check a runner against the wire protocol.
    Conformance(ConformanceArgs),
    /// Merge and re-render report.json files.
    Report(ReportArgs),
    /// Serve the synthetic runner over stdio or TCP.
    #[command(hide = true)]
    SyntheticRunner(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Directory written by `run` or `sweep`.
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/replay`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConformanceArgs {
    /// Take the runner from this config.
    #[arg(long, conflicts_with_all = ["tcp", "command"])]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "command")]
    pub tcp: Option<String>,
    /// Per-check response timeout in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub timeout_s: f64,
    /// Runner command line.
    #[arg(last = true)]
    pub command: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
    /// Also write the merged report.json and report.csv here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Pareto objective as `metric` or `metric:min|max`, repeatable.
    #[arg(long = "objective", value_parser = parse_objective)]
    pub objectives: Vec<Objective>,
}

pub fn parse_objective(s: &str) -> Result<Objective, String> {
    let (metric, direction) = match s.split_once(':') {
        Some((m, d)) => (m, Some(d)),
        None => (s, None),
    };
    let metric: Metric = serde_json::from_value(serde_json::Value::String(metric.to_string()))
        .map_err(|_| format!("unknown metric {metric:?}"))?;
    let direction = match direction {
        None => metric.natural_direction(),
        Some(d) => serde_json::from_value(serde_json::Value::String(d.to_string()))
            .map_err(|_| format!("direction must be min or max, got {d:?}"))?,
    };
    Ok(Objective::new(metric, direction))
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// JSON runner spec; overrides the delay flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// `stdio` or `tcp:<port>`.
    #[arg(long, default_value = "stdio")]
    pub transport: String,
    #[arg(long, default_value_t = 0.0)]
    pub base_delay_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub per_item_delay_ms: f64,
    #[arg(long)]
    pub reorder_window: Option<usize>,
}

fn session_failure(session: &RunnerSession, err: &dyn std::fmt::Display) -> CliError {
    let mut msg = err.to_string();
    let transcript = session.transcript();
    if !transcript.is_empty() {
        msg.push_str("\nlast protocol lines:");
        for line in transcript
            .iter()
            .skip(transcript.len().saturating_sub(TRANSCRIPT_TAIL))
        {
            msg.push_str(&format!("\n  {line}"));
        }
    }
    let stderr = session.stderr_tail();
    if !stderr.trim().is_empty() {
        msg.push_str(&format!("\nrunner stderr:\n{}", stderr.trim_end()));
    }
    CliError::Runner(msg)
}

fn failure_of(traffic: &TrafficModel, err: &RunError) -> RunFailure {
    let (kind, completed) = match err {
        RunError::AllFailed { samples } => (FailureKind::AllFailed, samples.len()),
        RunError::Partial { samples, .. } => (FailureKind::Aborted, samples.len()),
        _ => (FailureKind::Aborted, 0),
    };
    RunFailure {
        kind,
        traffic: traffic.label(),
        batch_size: traffic.batch_size(),
        reason: err.to_string(),
        completed_samples: completed as u64,
    }
}

/// `run` and `sweep`. Returns the exit code.
pub fn cmd_run(args: &RunArgs, sweep: bool, quiet: bool) -> Result<i32, CliError> {
    let mut config = BenchConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.output {
        config.output = out.clone();
    }
    if sweep && config.batch_sweep.is_none() {
        return Err(ConfigError::at("batch_sweep", "sweep needs a batch_sweep list").into());
    }
    let plan = config.to_plan()?;
    let dir = config.output.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let archived = config.canonical_json();
    let config_fingerprint = fingerprint(archived.as_bytes());
    write_file(&dir.join("config.json"), archived.as_bytes())?;

    let options = SessionOptions {
        connect_timeout: positive_seconds("connect_timeout_s", config.connect_timeout_s)?,
        record_transcript: true,
    };
    let session = RunnerSession::open(&config.runner, Clock::new(), &options)
        .map_err(|e| CliError::Runner(format!("{} ({})", e, config.runner)))?;
    let handshake = session.handshake_info().clone();
    log::info!(
        "runner: {} {} {} on {}",
        handshake.model_name,
        handshake.platform,
        handshake.precision,
        handshake.device.device_name
    );

    let outcomes: Vec<(TrafficModel, Result<RawRun, RunError>)> = if plan.batch_sweep.is_some() {
        run_batch_sweep(&plan, &session)?
            .into_iter()
            .map(|e| (plan.traffic.with_batch_size(e.batch_size), e.outcome))
            .collect()
    } else {
        vec![(plan.traffic.clone(), execute_run(&plan, &session))]
    };
    let is_sweep = plan.batch_sweep.is_some();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (traffic, outcome) in &outcomes {
        match outcome {
            Ok(run) => {
                let suffix = if is_sweep {
                    format!("_b{}", traffic.batch_size())
                } else {
                    String::new()
                };
                runs.push(store_run(&dir, run, &suffix)?);
            }
            Err(e) => {
                if !matches!(e, RunError::AllFailed { .. }) {
                    log::error!("{}", session_failure(&session, e));
                }
                failures.push(failure_of(traffic, e));
            }
        }
    }
    let shutdown = session.close();
    if shutdown.peer_closed_early {
        log::warn!("runner closed the connection before shutdown");
    }
    for v in session.violations() {
        log::warn!("protocol violation: {v}");
    }

    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        config_fingerprint,
        handshake,
        carbon: config.carbon.clone(),
        quantiles: config.quantiles(),
        runs,
        failures,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&dir.join("run.json"), text.as_bytes())?;

    let doc = report_from_artifacts(&dir)?;
    write_report(&dir, &doc)?;
    if !quiet {
        print_summary(&doc, config.report.objectives.as_deref())?;
    }
    Ok(exit_code(&doc))
}

pub fn cmd_replay(args: &ReplayArgs, quiet: bool) -> Result<i32, CliError> {
    let doc = report_from_artifacts(&args.run_dir)?;
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| args.run_dir.join("replay"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_report(&out, &doc)?;
    if !quiet {
        print_summary(&doc, None)?;
    }
    Ok(exit_code(&doc))
}

pub fn cmd_conformance(args: &ConformanceArgs, quiet: bool) -> Result<i32, CliError> {
    let transport = if let Some(path) = &args.config {
        BenchConfig::load(path)?.runner
    } else if let Some(addr) = &args.tcp {
        Transport::Tcp(addr.clone())
    } else if !args.command.is_empty() {
        Transport::Command(args.command.clone())
    } else {
        return Err(CliError::Usage(
            "conformance needs --config, --tcp or a runner command after `--`".into(),
        ));
    };
    let timeout = positive_seconds("timeout_s", args.timeout_s)?;
    let report = check_conformance(&transport, timeout);
    if !quiet || !report.all_passed() {
        print!("{}", report.render());
    }
    Ok(if report.all_passed() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

pub fn cmd_report(args: &ReportArgs, quiet: bool) -> Result<i32, CliError> {
    let mut docs = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        docs.push(load_json(&text).map_err(|e| CliError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?);
    }
    let doc = merge_reports(docs);
    if let Some(out) = &args.output {
        fs::create_dir_all(out).map_err(io_err(out))?;
        write_report(out, &doc)?;
    }
    if !quiet {
        match args.format {
            OutputFormat::Text => {
                let objectives =
                    (!args.objectives.is_empty()).then_some(args.objectives.as_slice());
                print_summary(&doc, objectives)?;
            }
            OutputFormat::Csv => print!(
                "{}",
                emit_table(&doc.records, TableFormat::Csv, &TableOptions::default())
            ),
            OutputFormat::Json => print!("{}", emit_json(&doc)),
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_synthetic_runner(args: &SyntheticArgs) -> Result<i32, CliError> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| CliError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => SyntheticSpec::new(args.base_delay_ms, args.per_item_delay_ms),
    };
    if let Some(w) = args.reorder_window {
        spec.reorder_window = w;
    }
    let code = if args.transport == "stdio" {
        serve(&spec, Box::new(std::io::stdin()), std::io::stdout())
    } else if let Some(port) = args.transport.strip_prefix("tcp:") {
        let listener = TcpListener::bind((
            "127.0.0.1",
            port.parse::<u16>().map_err(|_| {
                CliError::Usage(format!("bad port in --transport {:?}", args.transport))
            })?,
        ))
        .map_err(|e| CliError::Runner(e.to_string()))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::Runner(e.to_string()))?;
        eprintln!("listening on {addr}");
        serve_tcp(&spec, listener)
    } else {
        return Err(CliError::Usage(format!(
            "--transport must be stdio or tcp:<port>, got {:?}",
            args.transport
        )));
    };
    code.map_err(|e| CliError::Runner(e.to_string()))
}

/// Dispatches a parsed command line and maps errors to exit code 1.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, false, cli.quiet),
        Command::Sweep(a) => cmd_run(a, true, cli.quiet),
        Command::Replay(a) => cmd_replay(a, cli.quiet),
        Command::Conformance(a) => cmd_conformance(a, cli.quiet),
        Command::Report(a) => cmd_report(a, cli.quiet),
        Command::SyntheticRunner(a) => cmd_synthetic_runner(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
