//! Latency and throughput statistics computed from timed request samples.
//!
//! Everything here is a pure function of its inputs. Percentiles use the
//! nearest-rank rule: the value at 1-based index `ceil(q * N)` of the sorted
//! sample, so every reported percentile is an observed latency.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples to summarize")]
    EmptyInput,
    #[error("all {failed} samples failed; nothing to summarize")]
    AllFailed { failed: usize },
    #[error("sample {request_id} is invalid: {reason}")]
    InvalidSample { request_id: u64, reason: String },
    #[error("quantile {0} is outside (0, 1]")]
    InvalidQuantile(f64),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("sequence length list has {sequence_lengths} entries but there are {samples} samples")]
    ShapeMismatch {
        samples: usize,
        sequence_lengths: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Error,
}

/// One timed request as seen from the harness clock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub request_id: u64,
    /// Scheduled arrival. Equal to `actual_start_ns` outside open-loop runs.
    pub intended_start_ns: u64,
    pub actual_start_ns: u64,
    pub end_ns: u64,
    pub batch_size: u32,
    pub outcome: Outcome,
}

impl LatencySample {
    pub fn new(
        request_id: u64,
        intended_start_ns: u64,
        actual_start_ns: u64,
        end_ns: u64,
        batch_size: u32,
        outcome: Outcome,
    ) -> Result<Self, MetricsError> {
        let sample = Self {
            request_id,
            intended_start_ns,
            actual_start_ns,
            end_ns,
            batch_size,
            outcome,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let reason = if self.actual_start_ns < self.intended_start_ns {
            "actual start precedes intended start"
        } else if self.end_ns < self.actual_start_ns {
            "end precedes actual start"
        } else if self.batch_size == 0 {
            "batch size must be at least 1"
        } else {
            return Ok(());
        };
        Err(MetricsError::InvalidSample {
            request_id: self.request_id,
            reason: reason.to_string(),
        })
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Measured interval in nanoseconds for the given mode.
    pub fn latency_ns(&self, mode: LatencyMode) -> u64 {
        match mode {
            LatencyMode::ServiceTime => self.end_ns - self.actual_start_ns,
            LatencyMode::ResponseTime => self.end_ns - self.intended_start_ns,
        }
    }
}

/// Which interval of a sample counts as its latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyMode {
    /// `end - actual_start`: time the runner took once the request was sent.
    ServiceTime,
    /// `end - intended_start`: includes queueing before the send.
    ResponseTime,
}

/// A quantile in (0, 1], stored in parts per million so it can key an
/// ordered map and round-trip through text exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quantile(u32);

const PPM: u64 = 1_000_000;

impl Quantile {
    pub const P50: Quantile = Quantile(500_000);
    pub const P90: Quantile = Quantile(900_000);
    pub const P95: Quantile = Quantile(950_000);
    pub const P99: Quantile = Quantile(990_000);
    pub const P999: Quantile = Quantile(999_000);

    pub fn new(q: f64) -> Result<Self, MetricsError> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(MetricsError::InvalidQuantile(q));
        }
        let ppm = (q * PPM as f64).round() as u32;
        if ppm == 0 {
            return Err(MetricsError::InvalidQuantile(q));
        }
        Ok(Quantile(ppm))
    }

    pub fn from_ppm(ppm: u32) -> Result<Self, MetricsError> {
        if ppm == 0 || u64::from(ppm) > PPM {
            return Err(MetricsError::InvalidQuantile(ppm as f64 / PPM as f64));
        }
        Ok(Quantile(ppm))
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / PPM as f64
    }

    /// 1-based nearest rank `ceil(q * n)`, clamped to `[1, n]`.
    pub fn nearest_rank(self, n: usize) -> usize {
        let rank = (u128::from(self.0) * n as u128).div_ceil(u128::from(PPM)) as usize;
        rank.clamp(1, n.max(1))
    }

    /// Short label such as `p50` or `p99.9`.
    pub fn label(self) -> String {
        // 0.95 -> 95, 0.999 -> 99.9
        let hundredths = u64::from(self.0) * 100;
        let whole = hundredths / PPM;
        let frac = hundredths % PPM;
        if frac == 0 {
            format!("p{whole}")
        } else {
            let digits = format!("{frac:06}");
            format!("p{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl fmt::Display for Quantile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if u64::from(self.0) == PPM {
            return write!(f, "1");
        }
        let digits = format!("{:06}", self.0);
        write!(f, "0.{}", digits.trim_end_matches('0'))
    }
}

impl FromStr for Quantile {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricsError::InvalidQuantile(f64::NAN);
        if s == "1" {
            return Ok(Quantile(PPM as u32));
        }
        let frac = s.strip_prefix("0.").ok_or_else(bad)?;
        if frac.is_empty() || frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let ppm: u32 = format!("{frac:0<6}").parse().map_err(|_| bad())?;
        Quantile::from_ppm(ppm)
    }
}

impl Serialize for Quantile {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Quantile {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Quantiles reported when the caller does not ask for a specific set.
pub const DEFAULT_QUANTILES: [Quantile; 5] = [
    Quantile::P50,
    Quantile::P90,
    Quantile::P95,
    Quantile::P99,
    Quantile::P999,
];

const REQUIRED_QUANTILES: [Quantile; 3] = [Quantile::P50, Quantile::P95, Quantile::P99];

/// Head, average and tail view of a set of successful request latencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyDistribution {
    pub count: usize,
    pub mean_ms: f64,
    /// Minimum observed latency.
    pub head_ms: f64,
    pub percentiles: BTreeMap<Quantile, f64>,
    pub max_ms: f64,
}

impl LatencyDistribution {
    pub fn percentile(&self, q: Quantile) -> Option<f64> {
        self.percentiles.get(&q).copied()
    }

    pub fn p50(&self) -> f64 {
        self.percentiles[&Quantile::P50]
    }

    pub fn p95(&self) -> f64 {
        self.percentiles[&Quantile::P95]
    }

    pub fn p99(&self) -> f64 {
        self.percentiles[&Quantile::P99]
    }
}

fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

pub fn summarize_latencies(
    samples: &[LatencySample],
    mode: LatencyMode,
) -> Result<LatencyDistribution, MetricsError> {
    summarize_latencies_with(samples, mode, &DEFAULT_QUANTILES)
}

/// Summarizes successful samples. `quantiles` is merged with p50/p95/p99,
/// which are always reported.
pub fn summarize_latencies_with(
    samples: &[LatencySample],
    mode: LatencyMode,
    quantiles: &[Quantile],
) -> Result<LatencyDistribution, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for s in samples {
        s.validate()?;
    }
    let mut latencies: Vec<u64> = samples
        .iter()
        .filter(|s| s.is_success())
        .map(|s| s.latency_ns(mode))
        .collect();
    if latencies.is_empty() {
        return Err(MetricsError::AllFailed {
            failed: samples.len(),
        });
    }
    latencies.sort_unstable();

    let n = latencies.len();
    let total: u128 = latencies.iter().map(|&t| u128::from(t)).sum();
    let mean_ns = total as f64 / n as f64;

    let percentiles = quantiles
        .iter()
        .chain(REQUIRED_QUANTILES.iter())
        .map(|&q| (q, ns_to_ms(latencies[q.nearest_rank(n) - 1])))
        .collect();

    Ok(LatencyDistribution {
        count: n,
        mean_ms: mean_ns / 1e6,
        head_ms: ns_to_ms(latencies[0]),
        percentiles,
        max_ms: ns_to_ms(latencies[n - 1]),
    })
}

/// Throughput unit, tagged from the runner's declared item kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThroughputUnit {
    #[serde(rename = "samples/s")]
    SamplesPerSecond,
    #[serde(rename = "tokens/s")]
    TokensPerSecond,
    #[serde(rename = "requests/s")]
    RequestsPerSecond,
    #[serde(rename = "transactions/s")]
    TransactionsPerSecond,
}

impl ThroughputUnit {
    pub fn basis(self) -> ThroughputBasis {
        match self {
            ThroughputUnit::SamplesPerSecond | ThroughputUnit::TokensPerSecond => {
                ThroughputBasis::PerBatch
            }
            ThroughputUnit::RequestsPerSecond | ThroughputUnit::TransactionsPerSecond => {
                ThroughputBasis::PerRequest
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ThroughputUnit::SamplesPerSecond => "samples/s",
            ThroughputUnit::TokensPerSecond => "tokens/s",
            ThroughputUnit::RequestsPerSecond => "requests/s",
            ThroughputUnit::TransactionsPerSecond => "transactions/s",
        }
    }
}

impl fmt::Display for ThroughputUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether throughput counts items inside each request or whole requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThroughputBasis {
    PerBatch,
    PerRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReading {
    pub value: f64,
    pub unit: ThroughputUnit,
    pub basis: ThroughputBasis,
}

/// Min, mean and max of an integer-valued quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsTriple {
    pub min: u64,
    pub mean: f64,
    pub max: u64,
}

impl StatsTriple {
    fn of(values: impl Iterator<Item = u64> + Clone) -> Option<Self> {
        let n = values.clone().count();
        if n == 0 {
            return None;
        }
        let min = values.clone().min()?;
        let max = values.clone().max()?;
        let total: u128 = values.map(u128::from).sum();
        Some(Self {
            min,
            mean: total as f64 / n as f64,
            max,
        })
    }
}

/// Describes the offered load behind a latency distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadDescriptor {
    pub batch_size_stats: StatsTriple,
    pub sequence_length_stats: Option<StatsTriple>,
    pub total_requests: u64,
    /// Sum of batch sizes, or of token counts when sequence lengths are known.
    pub total_items: u64,
}

impl WorkloadDescriptor {
    /// Items carried per request on average; the `B` of `throughput = B / L`
    /// for the given unit.
    pub fn items_per_request(&self, unit: ThroughputUnit) -> f64 {
        match (unit, &self.sequence_length_stats) {
            (ThroughputUnit::TokensPerSecond, Some(seq)) => seq.mean,
            _ => self.batch_size_stats.mean,
        }
    }
}

pub fn summarize_workload(
    samples: &[LatencySample],
    sequence_lengths: Option<&[u32]>,
) -> Result<WorkloadDescriptor, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(lengths) = sequence_lengths {
        if lengths.len() != samples.len() {
            return Err(MetricsError::ShapeMismatch {
                samples: samples.len(),
                sequence_lengths: lengths.len(),
            });
        }
    }
    let batches = samples.iter().map(|s| u64::from(s.batch_size));
    let batch_size_stats = StatsTriple::of(batches.clone()).ok_or(MetricsError::EmptyInput)?;
    let sequence_length_stats =
        sequence_lengths.and_then(|l| StatsTriple::of(l.iter().map(|&x| u64::from(x))));
    let total_items = match sequence_lengths {
        Some(lengths) => lengths.iter().map(|&x| u64::from(x)).sum(),
        None => batches.sum(),
    };
    Ok(WorkloadDescriptor {
        batch_size_stats,
        sequence_length_stats,
        total_requests: samples.len() as u64,
        total_items,
    })
}

/// `throughput = B / L` with `L` the mean latency in seconds. Per-request
/// units count each request as one item.
pub fn compute_throughput(
    distribution: &LatencyDistribution,
    workload: &WorkloadDescriptor,
    unit: ThroughputUnit,
) -> Result<ThroughputReading, MetricsError> {
    let mean_s = distribution.mean_ms / 1e3;
    if !(mean_s.is_finite() && mean_s > 0.0) {
        return Err(MetricsError::InvalidMeasurement(format!(
            "mean latency must be positive, got {} ms",
            distribution.mean_ms
        )));
    }
    let basis = unit.basis();
    let items = match basis {
        ThroughputBasis::PerBatch => workload.items_per_request(unit),
        ThroughputBasis::PerRequest => 1.0,
    };
    Ok(ThroughputReading {
        value: items / mean_s,
        unit,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok_sample(id: u64, latency_ns: u64, batch: u32) -> LatencySample {
        LatencySample::new(id, 0, 0, latency_ns, batch, Outcome::Success).unwrap()
    }

    fn dist_with_mean(mean_ms: f64) -> LatencyDistribution {
        let percentiles = REQUIRED_QUANTILES.iter().map(|&q| (q, mean_ms)).collect();
        LatencyDistribution {
            count: 1,
            mean_ms,
            head_ms: mean_ms,
            percentiles,
            max_ms: mean_ms,
        }
    }

    fn constant_workload(batch: u64) -> WorkloadDescriptor {
        WorkloadDescriptor {
            batch_size_stats: StatsTriple {
                min: batch,
                mean: batch as f64,
                max: batch,
            },
            sequence_length_stats: None,
            total_requests: 1,
            total_items: batch,
        }
    }

    #[test]
    fn single_sample() {
        let d =
            summarize_latencies(&[ok_sample(1, 10_000_000, 1)], LatencyMode::ServiceTime).unwrap();
        assert_eq!(d.count, 1);
        for v in [d.mean_ms, d.head_ms, d.p50(), d.p95(), d.p99(), d.max_ms] {
            assert_eq!(v, 10.0);
        }
    }

    #[test]
    fn one_to_hundred_ms() {
        let samples: Vec<_> = (1..=100).map(|i| ok_sample(i, i * 1_000_000, 1)).collect();
        let d = summarize_latencies(&samples, LatencyMode::ServiceTime).unwrap();
        assert!((d.mean_ms - 50.5).abs() < 1e-12);
        assert_eq!(d.head_ms, 1.0);
        assert_eq!(d.p50(), 50.0);
        assert_eq!(d.p95(), 95.0);
        assert_eq!(d.p99(), 99.0);
        assert_eq!(d.max_ms, 100.0);
    }

    #[test]
    fn empty_and_all_failed_are_distinct() {
        assert_eq!(
            summarize_latencies(&[], LatencyMode::ServiceTime),
            Err(MetricsError::EmptyInput)
        );
        let failed: Vec<_> = (0..3)
            .map(|i| LatencySample::new(i, 0, 0, 5, 1, Outcome::Error).unwrap())
            .collect();
        assert_eq!(
            summarize_latencies(&failed, LatencyMode::ServiceTime),
            Err(MetricsError::AllFailed { failed: 3 })
        );
    }

    #[test]
    fn failed_samples_excluded() {
        let samples = vec![
            ok_sample(1, 2_000_000, 1),
            LatencySample::new(2, 0, 0, 900_000_000, 1, Outcome::Error).unwrap(),
        ];
        let d = summarize_latencies(&samples, LatencyMode::ServiceTime).unwrap();
        assert_eq!(d.count, 1);
        assert_eq!(d.max_ms, 2.0);
    }

    #[test]
    fn response_time_includes_queueing() {
        let s = LatencySample::new(1, 0, 4_000_000, 10_000_000, 1, Outcome::Success).unwrap();
        assert_eq!(s.latency_ns(LatencyMode::ServiceTime), 6_000_000);
        assert_eq!(s.latency_ns(LatencyMode::ResponseTime), 10_000_000);
    }

    #[test]
    fn sample_invariants() {
        assert!(LatencySample::new(1, 5, 4, 10, 1, Outcome::Success).is_err());
        assert!(LatencySample::new(1, 0, 4, 3, 1, Outcome::Success).is_err());
        assert!(LatencySample::new(1, 0, 0, 3, 0, Outcome::Success).is_err());
    }

    #[test]
    fn custom_quantiles_always_include_required() {
        let samples: Vec<_> = (1..=10).map(|i| ok_sample(i, i * 1_000_000, 1)).collect();
        let q75 = Quantile::new(0.75).unwrap();
        let d = summarize_latencies_with(&samples, LatencyMode::ServiceTime, &[q75]).unwrap();
        let keys: Vec<_> = d.percentiles.keys().copied().collect();
        assert_eq!(keys, vec![Quantile::P50, q75, Quantile::P95, Quantile::P99]);
        assert_eq!(d.percentile(q75), Some(8.0));
    }

    #[test]
    fn quantile_text_round_trip() {
        for (q, text, label) in [
            (Quantile::P50, "0.5", "p50"),
            (Quantile::P95, "0.95", "p95"),
            (Quantile::P999, "0.999", "p99.9"),
            (Quantile::from_ppm(1_000_000).unwrap(), "1", "p100"),
        ] {
            assert_eq!(q.to_string(), text);
            assert_eq!(q.label(), label);
            assert_eq!(text.parse::<Quantile>().unwrap(), q);
        }
        assert!(Quantile::new(0.0).is_err());
        assert!(Quantile::new(1.5).is_err());
        assert!("0.".parse::<Quantile>().is_err());
        assert!("50".parse::<Quantile>().is_err());
    }

    #[test]
    fn throughput_table_rows() {
        let r = compute_throughput(
            &dist_with_mean(12.61),
            &constant_workload(100),
            ThroughputUnit::SamplesPerSecond,
        )
        .unwrap();
        assert!((r.value - 7930.214115781126).abs() < 1e-6);
        assert!((r.value - 7922.41).abs() / 7922.41 < 0.005);

        let r = compute_throughput(
            &dist_with_mean(33.29),
            &constant_workload(100),
            ThroughputUnit::SamplesPerSecond,
        )
        .unwrap();
        assert!((r.value - 3003.9050766).abs() < 1e-4);
        assert!((r.value - 3004.10).abs() / 3004.10 < 0.005);
    }

    #[test]
    fn throughput_unit_case() {
        let r = compute_throughput(
            &dist_with_mean(1000.0),
            &constant_workload(1),
            ThroughputUnit::RequestsPerSecond,
        )
        .unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.basis, ThroughputBasis::PerRequest);
    }

    #[test]
    fn throughput_rejects_nonpositive_latency() {
        for mean in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                compute_throughput(
                    &dist_with_mean(mean),
                    &constant_workload(1),
                    ThroughputUnit::SamplesPerSecond
                ),
                Err(MetricsError::InvalidMeasurement(_))
            ));
        }
    }

    #[test]
    fn token_throughput_uses_sequence_lengths() {
        let samples = vec![ok_sample(1, 1, 1), ok_sample(2, 1, 1)];
        let w = summarize_workload(&samples, Some(&[128, 256])).unwrap();
        let r = compute_throughput(&dist_with_mean(1000.0), &w, ThroughputUnit::TokensPerSecond)
            .unwrap();
        assert_eq!(r.value, 192.0);
    }

    #[test]
    fn workload_constant_batch() {
        let samples: Vec<_> = (0..5).map(|i| ok_sample(i, 1, 100)).collect();
        let w = summarize_workload(&samples, None).unwrap();
        assert_eq!(
            w.batch_size_stats,
            StatsTriple {
                min: 100,
                mean: 100.0,
                max: 100
            }
        );
        assert_eq!(w.total_requests, 5);
        assert_eq!(w.total_items, 500);
        assert!(w.sequence_length_stats.is_none());
    }

    #[test]
    fn workload_mixed_batches() {
        let samples = vec![ok_sample(1, 1, 1), ok_sample(2, 1, 8), ok_sample(3, 1, 32)];
        let w = summarize_workload(&samples, None).unwrap();
        assert_eq!(w.batch_size_stats.min, 1);
        assert_eq!(w.batch_size_stats.max, 32);
        assert!((w.batch_size_stats.mean - 41.0 / 3.0).abs() < 1e-12);
        assert_eq!(w.total_items, 41);
    }

    #[test]
    fn workload_sequence_lengths() {
        let samples = vec![ok_sample(1, 1, 1), ok_sample(2, 1, 1)];
        let w = summarize_workload(&samples, Some(&[128, 256])).unwrap();
        assert_eq!(
            w.sequence_length_stats,
            Some(StatsTriple {
                min: 128,
                mean: 192.0,
                max: 256
            })
        );
        assert_eq!(w.total_items, 384);
        assert_eq!(
            summarize_workload(&samples, Some(&[1])),
            Err(MetricsError::ShapeMismatch {
                samples: 2,
                sequence_lengths: 1
            })
        );
    }
}
