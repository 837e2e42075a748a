//! Benchmark records, Pareto analysis and table/JSON emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{
    compute_carbon, integrate_energy, CarbonFactors, CarbonReading, EnergyError, EnergyReading,
};
use crate::loadgen::{RawRun, TrafficModel, PRNG_NAME};
use crate::metrics::{
    compute_throughput, summarize_latencies_with, summarize_workload, LatencyDistribution,
    LatencyMode, MetricsError, Quantile, ThroughputReading, WorkloadDescriptor, DEFAULT_QUANTILES,
};
use crate::protocol::{AccuracyMetadata, DeviceAnnotations, Handshake, ItemKind, Precision};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("report config: {0}")]
    Config(String),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported report_version {found} (expected {REPORT_VERSION})")]
    Version { found: u32 },
    #[error("csv: {0}")]
    Csv(String),
}

/// One (model, platform, precision, device) measurement joining every
/// metric family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRecord {
    pub model_name: String,
    pub platform: String,
    pub precision: Precision,
    pub device: DeviceAnnotations,
    pub item_kind: ItemKind,
    pub traffic: TrafficModel,
    pub batch_size: u32,
    pub workload: WorkloadDescriptor,
    /// Response time: intended start to response.
    pub latency: LatencyDistribution,
    /// Service time: actual send to response.
    pub service_latency: LatencyDistribution,
    pub throughput: ThroughputReading,
    pub energy: EnergyReading,
    pub carbon: CarbonReading,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<AccuracyMetadata>,
    pub error_count: u64,
    pub total_requests: u64,
    pub valid: bool,
    pub seed: u64,
    pub prng: String,
    pub config_fingerprint: String,
    pub power_source_id: String,
}

impl BenchmarkRecord {
    pub fn platform_precision(&self) -> String {
        format!("{} {}", self.platform, self.precision)
    }

    pub fn error_rate(&self) -> f64 {
        if self.total_requests == 0 {
            0.0
        } else {
            self.error_count as f64 / self.total_requests as f64
        }
    }
}

/// More than this share of failed requests marks a record invalid.
pub const MAX_VALID_ERROR_RATE: f64 = 0.10;

pub fn is_valid_error_rate(errors: u64, total: u64) -> bool {
    // errors / total <= 0.1 without rounding
    errors.saturating_mul(10) <= total
}

/// Run-independent inputs to [`build_record`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordContext {
    pub config_fingerprint: String,
    pub quantiles: Vec<Quantile>,
}

impl Default for RecordContext {
    fn default() -> Self {
        Self {
            config_fingerprint: String::new(),
            quantiles: DEFAULT_QUANTILES.to_vec(),
        }
    }
}

/// Joins a raw run with its runner labels. Pure: equal inputs give equal
/// records.
pub fn build_record(
    handshake: &Handshake,
    run: &RawRun,
    factors: &CarbonFactors,
    ctx: &RecordContext,
) -> Result<BenchmarkRecord, ReportError> {
    let latency =
        summarize_latencies_with(&run.samples, LatencyMode::ResponseTime, &ctx.quantiles)?;
    let service_latency =
        summarize_latencies_with(&run.samples, LatencyMode::ServiceTime, &ctx.quantiles)?;

    let successes: Vec<_> = run
        .samples
        .iter()
        .filter(|s| s.is_success())
        .cloned()
        .collect();
    let seq = run.sequence_lengths(handshake.item_kind);
    let workload = summarize_workload(&successes, seq.as_deref())?;
    let unit = handshake.item_kind.throughput_unit();
    let throughput = compute_throughput(&latency, &workload, unit)?;

    let energy = integrate_energy(&run.trace, run.window_start_ns, run.window_end_ns)?;
    let carbon = compute_carbon(&energy, factors);

    let total = run.samples.len() as u64;
    let errors = run.error_count() as u64;
    Ok(BenchmarkRecord {
        model_name: handshake.model_name.clone(),
        platform: handshake.platform.clone(),
        precision: handshake.precision,
        device: handshake.device.clone(),
        item_kind: handshake.item_kind,
        traffic: run.traffic.clone(),
        batch_size: run.batch_size(),
        workload,
        latency,
        service_latency,
        throughput,
        energy,
        carbon,
        accuracy: handshake.accuracy.clone(),
        error_count: errors,
        total_requests: total,
        valid: is_valid_error_rate(errors, total),
        seed: run.seed,
        prng: PRNG_NAME.to_string(),
        config_fingerprint: ctx.config_fingerprint.clone(),
        power_source_id: run.trace.source_id().to_string(),
    })
}

// ---------------------------------------------------------------- pareto

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LatencyMean,
    LatencyP50,
    LatencyP95,
    LatencyP99,
    Throughput,
    EnergyWh,
    CarbonG,
    Accuracy,
}

impl Metric {
    pub fn value(self, r: &BenchmarkRecord) -> Option<f64> {
        let v = match self {
            Metric::LatencyMean => r.latency.mean_ms,
            Metric::LatencyP50 => r.latency.p50(),
            Metric::LatencyP95 => r.latency.p95(),
            Metric::LatencyP99 => r.latency.p99(),
            Metric::Throughput => r.throughput.value,
            Metric::EnergyWh => r.energy.energy_wh(),
            Metric::CarbonG => r.carbon.carbon_g,
            Metric::Accuracy => r.accuracy.as_ref()?.value,
        };
        v.is_finite().then_some(v)
    }

    pub fn natural_direction(self) -> Direction {
        match self {
            Metric::Throughput | Metric::Accuracy => Direction::Max,
            _ => Direction::Min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub metric: Metric,
    pub direction: Direction,
}

impl Objective {
    pub fn new(metric: Metric, direction: Direction) -> Self {
        Self { metric, direction }
    }

    pub fn natural(metric: Metric) -> Self {
        Self::new(metric, metric.natural_direction())
    }
}

/// p95 latency, throughput, energy and carbon, plus accuracy when every
/// record carries it.
pub fn default_objectives(records: &[BenchmarkRecord]) -> Vec<Objective> {
    let mut out: Vec<_> = [
        Metric::LatencyP95,
        Metric::Throughput,
        Metric::EnergyWh,
        Metric::CarbonG,
    ]
    .into_iter()
    .map(Objective::natural)
    .collect();
    if !records.is_empty() && records.iter().all(|r| r.accuracy.is_some()) {
        out.push(Objective::natural(Metric::Accuracy));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// Index into the input records.
    pub record: usize,
    pub objectives: Vec<f64>,
    pub dominated: bool,
    /// A frontier point dominating this one.
    pub dominated_by: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub record: usize,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoAnalysis {
    pub objectives: Vec<Objective>,
    /// Every included record, in input order.
    pub points: Vec<ParetoPoint>,
    pub excluded: Vec<Exclusion>,
}

impl ParetoAnalysis {
    /// Record indices on the frontier, in input order.
    pub fn frontier(&self) -> Vec<usize> {
        self.points
            .iter()
            .filter(|p| !p.dominated)
            .map(|p| p.record)
            .collect()
    }
}

/// Oriented so that smaller is better in every coordinate.
fn oriented(objectives: &[Objective], values: &[f64]) -> Vec<f64> {
    objectives
        .iter()
        .zip(values)
        .map(|(o, &v)| match o.direction {
            Direction::Min => v,
            Direction::Max => -v,
        })
        .collect()
}

/// True when `a` is no worse than `b` everywhere and better somewhere.
/// Both vectors must already be oriented for minimization.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strictly |= x < y;
    }
    strictly
}

pub fn pareto_frontier(
    records: &[BenchmarkRecord],
    objectives: &[Objective],
) -> Result<ParetoAnalysis, ReportError> {
    if objectives.is_empty() {
        return Err(ReportError::Config(
            "at least one Pareto objective is required".into(),
        ));
    }
    let mut excluded = Vec::new();
    let mut included: Vec<(usize, Vec<f64>)> = Vec::new();
    'records: for (i, r) in records.iter().enumerate() {
        let mut values = Vec::with_capacity(objectives.len());
        for o in objectives {
            match o.metric.value(r) {
                Some(v) => values.push(v),
                None => {
                    log::warn!(
                        "record {i} ({} {}) lacks {:?}; excluded from the Pareto analysis",
                        r.model_name,
                        r.platform_precision(),
                        o.metric
                    );
                    excluded.push(Exclusion {
                        record: i,
                        metric: o.metric,
                    });
                    continue 'records;
                }
            }
        }
        included.push((i, values));
    }

    let keys: Vec<Vec<f64>> = included
        .iter()
        .map(|(_, v)| oriented(objectives, v))
        .collect();
    let dominated: Vec<bool> = keys
        .iter()
        .map(|k| keys.iter().any(|other| dominates(other, k)))
        .collect();
    let record_of: Vec<usize> = included.iter().map(|(i, _)| *i).collect();
    let points = included
        .into_iter()
        .enumerate()
        .map(|(j, (record, objectives))| ParetoPoint {
            record,
            objectives,
            dominated: dominated[j],
            dominated_by: (0..keys.len())
                .find(|&w| dominated[j] && !dominated[w] && dominates(&keys[w], &keys[j]))
                .map(|w| record_of[w]),
        })
        .collect();
    Ok(ParetoAnalysis {
        objectives: objectives.to_vec(),
        points,
        excluded,
    })
}

// ---------------------------------------------------------------- tables

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TableOptions {
    pub color: bool,
}

impl TableOptions {
    /// Colour unless `BENCH_NO_COLOR` is set.
    pub fn from_env() -> Self {
        Self {
            color: std::env::var_os("BENCH_NO_COLOR").is_none(),
        }
    }
}

pub const INVALID_MARKER: &str = "[INVALID]";

/// Header text of every CSV column; text columns are quoted.
const CSV_COLUMNS: &[(&str, bool)] = &[
    ("Model", true),
    ("Platform & Precision", true),
    ("Throughput", false),
    ("Latency (ms)", false),
    ("Energy (Wh)", false),
    ("CE (mg)", false),
    ("Accuracy", false),
    ("Accuracy Metric", true),
    ("Throughput Unit", true),
    ("Device", true),
    ("Batch Size", false),
    ("p50 (ms)", false),
    ("p95 (ms)", false),
    ("p99 (ms)", false),
    ("Traffic", true),
    ("Seed", false),
    ("PRNG", true),
    ("Requests", false),
    ("Errors", false),
    ("Valid", true),
    ("Config Fingerprint", true),
];

fn is_text_column(name: &str) -> bool {
    CSV_COLUMNS
        .iter()
        .find(|(n, _)| *n == name)
        .is_none_or(|(_, text)| *text)
}

/// Presentation rounding of the four headline numbers.
pub fn headline_cells(r: &BenchmarkRecord) -> [String; 4] {
    [
        format!("{:.2}", r.throughput.value),
        format!("{:.2}", r.latency.mean_ms),
        format!("{:.3}", r.energy.energy_wh()),
        format!("{:.2}", r.carbon.carbon_mg()),
    ]
}

/// Header plus rows of string cells, as written to CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn from_records(records: &[BenchmarkRecord]) -> Self {
        let header = CSV_COLUMNS.iter().map(|(n, _)| n.to_string()).collect();
        let rows = records
            .iter()
            .map(|r| {
                let [tp, lat, wh, mg] = headline_cells(r);
                let (acc, acc_name) = match &r.accuracy {
                    Some(a) => (a.value.to_string(), a.metric_name.clone()),
                    None => (String::new(), String::new()),
                };
                vec![
                    r.model_name.clone(),
                    r.platform_precision(),
                    tp,
                    lat,
                    wh,
                    mg,
                    acc,
                    acc_name,
                    r.throughput.unit.to_string(),
                    r.device.device_name.clone(),
                    r.batch_size.to_string(),
                    format!("{:.2}", r.latency.p50()),
                    format!("{:.2}", r.latency.p95()),
                    format!("{:.2}", r.latency.p99()),
                    r.traffic.label(),
                    r.seed.to_string(),
                    r.prng.clone(),
                    r.total_requests.to_string(),
                    r.error_count.to_string(),
                    if r.valid { "yes" } else { "no" }.to_string(),
                    r.config_fingerprint.clone(),
                ]
            })
            .collect();
        Self { header, rows }
    }

    /// Header row, comma separated, text fields quoted, LF line endings.
    pub fn to_csv(&self) -> String {
        let text: Vec<bool> = self.header.iter().map(|h| is_text_column(h)).collect();
        let mut out = String::new();
        let line = |cells: &[String], quote: &dyn Fn(usize) -> bool, out: &mut String| {
            for (i, c) in cells.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if quote(i) {
                    out.push('"');
                    out.push_str(&c.replace('"', "\"\""));
                    out.push('"');
                } else {
                    out.push_str(c);
                }
            }
            out.push('\n');
        };
        line(&self.header, &|_| true, &mut out);
        for row in &self.rows {
            line(row, &|i| text.get(i).copied().unwrap_or(true), &mut out);
        }
        out
    }

    pub fn parse(input: &str) -> Result<Self, ReportError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| ReportError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| ReportError::Csv(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }
}

fn render_text(records: &[BenchmarkRecord], opts: &TableOptions) -> String {
    let with_accuracy = records.iter().any(|r| r.accuracy.is_some());
    let mut header: Vec<String> = [
        "Model",
        "Platform & Precision",
        "Throughput",
        "Unit",
        "Latency (ms)",
        "Energy (Wh)",
        "CE (mg)",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if with_accuracy {
        header.push("Accuracy".into());
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let [tp, lat, wh, mg] = headline_cells(r);
            let mut row = vec![
                r.model_name.clone(),
                r.platform_precision(),
                tp,
                r.throughput.unit.to_string(),
                lat,
                wh,
                mg,
            ];
            if with_accuracy {
                row.push(
                    r.accuracy
                        .as_ref()
                        .map(|a| format!("{} {}", a.value, a.metric_name))
                        .unwrap_or_default(),
                );
            }
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let numeric = |c: usize| (2..header.len()).contains(&c) && c != 3;
    let fmt_row = |cells: &[String]| {
        let mut line = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            let pad = widths[c] - cell.chars().count();
            if numeric(c) {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            } else {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            }
        }
        line.trim_end().to_string()
    };

    let mut out = String::new();
    let _ = writeln!(out, "{}", fmt_row(&header));
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for (r, row) in records.iter().zip(&rows) {
        let mut line = fmt_row(row);
        if !r.valid {
            let marker = if opts.color {
                format!("\x1b[31m{INVALID_MARKER}\x1b[0m")
            } else {
                INVALID_MARKER.to_string()
            };
            let _ = write!(line, "  {marker} {:.1}% errors", r.error_rate() * 100.0);
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn emit_table(records: &[BenchmarkRecord], format: TableFormat, opts: &TableOptions) -> String {
    match format {
        TableFormat::Text => render_text(records, opts),
        TableFormat::Csv => CsvTable::from_records(records).to_csv(),
    }
}

/// Renders the frontier of `analysis` as a short list.
pub fn render_frontier(records: &[BenchmarkRecord], analysis: &ParetoAnalysis) -> String {
    let names: Vec<String> = analysis
        .objectives
        .iter()
        .map(|o| format!("{:?} {:?}", o.metric, o.direction).to_lowercase())
        .collect();
    let mut out = format!("Pareto frontier ({}):\n", names.join(", "));
    for p in &analysis.points {
        let r = &records[p.record];
        let _ = match p.dominated_by {
            None => writeln!(
                out,
                "  * {} {} B={}",
                r.model_name,
                r.platform_precision(),
                r.batch_size
            ),
            Some(w) => {
                let by = &records[w];
                writeln!(
                    out,
                    "    {} {} B={} (dominated by {} {} B={})",
                    r.model_name,
                    r.platform_precision(),
                    r.batch_size,
                    by.model_name,
                    by.platform_precision(),
                    by.batch_size
                )
            }
        };
    }
    for e in &analysis.excluded {
        let r = &records[e.record];
        let _ = writeln!(
            out,
            "    {} {} excluded: no {:?}",
            r.model_name,
            r.platform_precision(),
            e.metric
        );
    }
    out
}

// ---------------------------------------------------------------- json

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Every measured request failed.
    AllFailed,
    /// The run stopped early (runner exit, protocol error, power source).
    Aborted,
}

/// A run that produced no record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFailure {
    pub kind: FailureKind,
    pub traffic: String,
    pub batch_size: u32,
    pub reason: String,
    pub completed_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDocument {
    pub report_version: u32,
    pub records: Vec<BenchmarkRecord>,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
}

impl ReportDocument {
    pub fn new(records: Vec<BenchmarkRecord>, failures: Vec<RunFailure>) -> Self {
        Self {
            report_version: REPORT_VERSION,
            records,
            failures,
        }
    }
}

pub fn emit_json(doc: &ReportDocument) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("report serializes");
    s.push('\n');
    s
}

pub fn load_json(input: &str) -> Result<ReportDocument, ReportError> {
    #[derive(Deserialize)]
    struct Version {
        report_version: u32,
    }
    let v: Version = serde_json::from_str(input)?;
    if v.report_version != REPORT_VERSION {
        return Err(ReportError::Version {
            found: v.report_version,
        });
    }
    Ok(serde_json::from_str(input)?)
}

/// Concatenates reports, ordering records by model then precision. The
/// sort is stable so equal keys keep their file order.
pub fn merge_reports(docs: Vec<ReportDocument>) -> ReportDocument {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for d in docs {
        records.extend(d.records);
        failures.extend(d.failures);
    }
    records.sort_by(|a, b| {
        a.model_name
            .cmp(&b.model_name)
            .then(a.precision.cmp(&b.precision))
    });
    ReportDocument::new(records, failures)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::energy::{PowerSample, PowerTrace};
    use crate::metrics::{LatencySample, StatsTriple, ThroughputBasis, ThroughputUnit};
    use crate::protocol::{Interconnect, MemoryType, PROTOCOL_VERSION};
    use std::collections::BTreeMap;

    pub(crate) fn handshake(model: &str, platform: &str, precision: Precision) -> Handshake {
        Handshake {
            protocol_version: PROTOCOL_VERSION,
            model_name: model.into(),
            platform: platform.into(),
            precision,
            item_kind: ItemKind::Sample,
            device: DeviceAnnotations {
                device_name: "RTX 3090".into(),
                interconnect: Interconnect::PCIe,
                memory_type: MemoryType::GDDR,
                power_management: "default".into(),
            },
            accuracy: None,
        }
    }

    fn dist(mean: f64) -> LatencyDistribution {
        let percentiles: BTreeMap<_, _> = DEFAULT_QUANTILES.iter().map(|&q| (q, mean)).collect();
        LatencyDistribution {
            count: 10,
            mean_ms: mean,
            head_ms: mean,
            percentiles,
            max_ms: mean,
        }
    }

    /// Record with given headline numbers; carbon is set directly in mg.
    pub(crate) fn record(
        model: &str,
        platform: &str,
        precision: Precision,
        throughput: f64,
        latency_ms: f64,
        energy_wh: f64,
        ce_mg: f64,
    ) -> BenchmarkRecord {
        let factors = CarbonFactors::new(1.0, 1.0, "test", "").unwrap();
        let energy = EnergyReading {
            energy_j: energy_wh * 3600.0,
            window_start_ns: 0,
            window_end_ns: 1_000_000_000,
            sample_count: 2,
        };
        let mut carbon = compute_carbon(&energy, &factors);
        carbon.carbon_g = ce_mg / 1e3;
        let h = handshake(model, platform, precision);
        BenchmarkRecord {
            model_name: h.model_name,
            platform: h.platform,
            precision,
            device: h.device,
            item_kind: ItemKind::Sample,
            traffic: TrafficModel::StaticBatch {
                batch_size: 100,
                iterations: 10,
            },
            batch_size: 100,
            workload: WorkloadDescriptor {
                batch_size_stats: StatsTriple {
                    min: 100,
                    mean: 100.0,
                    max: 100,
                },
                sequence_length_stats: None,
                total_requests: 10,
                total_items: 1000,
            },
            latency: dist(latency_ms),
            service_latency: dist(latency_ms),
            throughput: ThroughputReading {
                value: throughput,
                unit: ThroughputUnit::SamplesPerSecond,
                basis: ThroughputBasis::PerBatch,
            },
            energy,
            carbon,
            accuracy: None,
            error_count: 0,
            total_requests: 10,
            valid: true,
            seed: 0,
            prng: PRNG_NAME.into(),
            config_fingerprint: "abc".into(),
            power_source_id: "synthetic:constant".into(),
        }
    }

    #[test]
    fn first_table_row_renders() {
        let r = record(
            "ResNet-18",
            "PyTorch",
            Precision::FP16,
            7922.41,
            12.61,
            0.154,
            8.99,
        );
        assert_eq!(headline_cells(&r), ["7922.41", "12.61", "0.154", "8.99"]);
        let csv = emit_table(
            std::slice::from_ref(&r),
            TableFormat::Csv,
            &TableOptions::default(),
        );
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("\"ResNet-18\",\"PyTorch FP16\",7922.41,12.61,0.154,8.99,,\"\","));
        let text = emit_table(&[r], TableFormat::Text, &TableOptions::default());
        let row = text.lines().nth(2).unwrap();
        for cell in [
            "ResNet-18",
            "PyTorch FP16",
            "7922.41",
            "12.61",
            "0.154",
            "8.99",
        ] {
            assert!(row.contains(cell), "{row}");
        }
        assert!(!text.contains("Accuracy"));
    }

    #[test]
    fn accuracy_column_only_when_present() {
        let mut r = record("m", "p", Precision::FP32, 1.0, 1.0, 1.0, 1.0);
        r.accuracy = Some(AccuracyMetadata {
            metric_name: "top1".into(),
            value: 0.76,
        });
        let text = emit_table(&[r], TableFormat::Text, &TableOptions::default());
        assert!(text.lines().next().unwrap().contains("Accuracy"));
        assert!(text.contains("0.76 top1"));
    }

    #[test]
    fn invalid_rows_are_flagged() {
        let good = record("a", "p", Precision::FP16, 1.0, 1.0, 1.0, 1.0);
        let mut bad = record("b", "p", Precision::FP16, 1.0, 1.0, 1.0, 1.0);
        bad.error_count = 2;
        bad.valid = false;
        let text = emit_table(
            &[good, bad.clone()],
            TableFormat::Text,
            &TableOptions::default(),
        );
        let lines: Vec<_> = text.lines().collect();
        assert!(!lines[2].contains(INVALID_MARKER));
        assert!(lines[3].contains(INVALID_MARKER) && lines[3].contains("20.0% errors"));
        assert!(!text.contains('\x1b'));
        let colored = emit_table(&[bad], TableFormat::Text, &TableOptions { color: true });
        assert!(colored.contains("\x1b[31m"));
    }

    #[test]
    fn validity_threshold() {
        assert!(is_valid_error_rate(0, 10));
        assert!(is_valid_error_rate(1, 10));
        assert!(!is_valid_error_rate(2, 10));
        assert!(is_valid_error_rate(10, 100));
        assert!(!is_valid_error_rate(11, 100));
    }

    #[test]
    fn csv_quotes_and_reparses() {
        let r = record("say \"hi\", ok", "p", Precision::INT8, 1.0, 2.0, 3.0, 4.0);
        let csv = emit_table(&[r], TableFormat::Csv, &TableOptions::default());
        assert!(csv.contains("\"say \"\"hi\"\", ok\""));
        assert!(!csv.contains('\r'));
        let parsed = CsvTable::parse(&csv).unwrap();
        assert_eq!(parsed.rows[0][0], "say \"hi\", ok");
        assert_eq!(parsed.to_csv(), csv);
    }

    #[test]
    fn table1_resnet50_frontier() {
        // ResNet-50 rows: throughput, latency, energy, CE
        let rows = [
            record(
                "ResNet-50",
                "PyTorch",
                Precision::FP16,
                1518.69,
                65.85,
                0.782,
                45.58,
            ),
            record(
                "ResNet-50",
                "ONNX",
                Precision::FP16,
                1910.61,
                52.34,
                0.653,
                38.01,
            ),
            record(
                "ResNet-50",
                "TensorRT",
                Precision::FP16,
                1703.77,
                58.69,
                0.647,
                37.68,
            ),
            record(
                "ResNet-50",
                "TensorRT",
                Precision::INT8,
                3004.10,
                33.29,
                0.297,
                17.29,
            ),
        ];
        let objectives = [
            Objective::natural(Metric::LatencyMean),
            Objective::natural(Metric::EnergyWh),
            Objective::natural(Metric::CarbonG),
            Objective::natural(Metric::Throughput),
        ];
        let a = pareto_frontier(&rows, &objectives).unwrap();
        assert_eq!(a.frontier(), vec![3]);
        assert!(a
            .points
            .iter()
            .filter(|p| p.dominated)
            .all(|p| p.dominated_by == Some(3)));
    }

    #[test]
    fn pareto_basics() {
        let one = [record("m", "p", Precision::FP16, 1.0, 1.0, 1.0, 1.0)];
        let objs = default_objectives(&one);
        assert_eq!(pareto_frontier(&one, &objs).unwrap().frontier(), vec![0]);
        assert!(matches!(
            pareto_frontier(&one, &[]),
            Err(ReportError::Config(_))
        ));

        // identical vectors are both kept
        let twins = [one[0].clone(), one[0].clone()];
        assert_eq!(
            pareto_frontier(&twins, &objs).unwrap().frontier(),
            vec![0, 1]
        );

        // missing accuracy excludes the record
        let mut with_acc = one[0].clone();
        with_acc.accuracy = Some(AccuracyMetadata {
            metric_name: "top1".into(),
            value: 0.7,
        });
        let recs = [one[0].clone(), with_acc];
        let a = pareto_frontier(&recs, &[Objective::natural(Metric::Accuracy)]).unwrap();
        assert_eq!(a.frontier(), vec![1]);
        assert_eq!(
            a.excluded,
            vec![Exclusion {
                record: 0,
                metric: Metric::Accuracy
            }]
        );
        assert_eq!(default_objectives(&recs).len(), 4);
    }

    #[test]
    fn witness_points_at_record_index() {
        let mut recs = vec![record("m", "p", Precision::FP16, 1.0, 1.0, 1.0, 1.0)];
        recs[0].accuracy = None;
        recs.push(record("n", "p", Precision::FP16, 1.0, 5.0, 1.0, 1.0));
        recs.push(record("o", "p", Precision::FP16, 1.0, 0.5, 1.0, 1.0));
        let a = pareto_frontier(&recs, &[Objective::natural(Metric::LatencyMean)]).unwrap();
        assert_eq!(a.frontier(), vec![2]);
        assert_eq!(a.points[0].dominated_by, Some(2));
        assert_eq!(a.points[1].dominated_by, Some(2));
    }

    #[test]
    fn json_round_trip_and_version() {
        let mut r = record("m", "p", Precision::FP16, 1.5, 2.25, 0.125, 3.0);
        r.latency
            .percentiles
            .insert(Quantile::new(0.999).unwrap(), 9.0);
        let doc = ReportDocument::new(vec![r], vec![]);
        let s = emit_json(&doc);
        assert!(s.contains("\"report_version\": 1"));
        assert!(s.contains("\"0.999\""));
        assert!(s.contains("\"pue\": 1.0"));
        assert_eq!(load_json(&s).unwrap(), doc);
        let bumped = s.replace("\"report_version\": 1", "\"report_version\": 2");
        assert!(matches!(
            load_json(&bumped),
            Err(ReportError::Version { found: 2 })
        ));
    }

    #[test]
    fn merge_sorts_by_model_then_precision() {
        let a = ReportDocument::new(
            vec![
                record("opt-350m", "PyTorch", Precision::INT8, 1.0, 1.0, 1.0, 1.0),
                record("opt-125m", "PyTorch", Precision::INT8, 1.0, 1.0, 1.0, 1.0),
            ],
            vec![],
        );
        let b = ReportDocument::new(
            vec![
                record("opt-125m", "PyTorch", Precision::FP16, 1.0, 1.0, 1.0, 1.0),
                record("opt-350m", "PyTorch", Precision::FP16, 1.0, 1.0, 1.0, 1.0),
            ],
            vec![],
        );
        let merged = merge_reports(vec![a, b]);
        let keys: Vec<_> = merged
            .records
            .iter()
            .map(|r| (r.model_name.as_str(), r.precision))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("opt-125m", Precision::FP16),
                ("opt-125m", Precision::INT8),
                ("opt-350m", Precision::FP16),
                ("opt-350m", Precision::INT8),
            ]
        );
    }

    #[test]
    fn build_record_joins_metrics() {
        let samples: Vec<_> = (0..10u64)
            .map(|i| {
                let t0 = i * 20_000_000;
                LatencySample::new(
                    i,
                    t0,
                    t0,
                    t0 + 12_610_000,
                    100,
                    crate::metrics::Outcome::Success,
                )
                .unwrap()
            })
            .collect();
        let trace = PowerTrace::new(
            "synthetic:constant",
            vec![
                PowerSample {
                    timestamp_ns: 0,
                    power_w: 50.0,
                },
                PowerSample {
                    timestamp_ns: 1_000_000_000,
                    power_w: 50.0,
                },
            ],
        )
        .unwrap();
        let run = RawRun {
            traffic: TrafficModel::StaticBatch {
                batch_size: 100,
                iterations: 10,
            },
            seed: 3,
            items_processed: vec![100; 10],
            window_start_ns: 0,
            window_end_ns: samples[9].end_ns,
            samples,
            trace,
            schedule_origin_ns: None,
        };
        let factors = CarbonFactors::new(1.5, 0.4, "X", "").unwrap();
        let r = build_record(
            &handshake("ResNet-18", "PyTorch", Precision::FP16),
            &run,
            &factors,
            &RecordContext::default(),
        )
        .unwrap();
        assert!((r.latency.mean_ms - 12.61).abs() < 1e-9);
        assert!((r.throughput.value - 100.0 / 0.01261).abs() < 1e-6);
        let window_s = 192_610_000.0 / 1e9;
        assert!((r.energy.energy_wh() - 50.0 * window_s / 3600.0).abs() < 1e-12);
        assert!((r.carbon.carbon_g - 1.5 * 0.4 * r.energy.energy_wh()).abs() < 1e-15);
        assert_eq!(r.prng, PRNG_NAME);
        assert!(r.valid);
        assert_eq!(r.power_source_id, "synthetic:constant");
    }
}
