#![allow(dead_code)]

use std::collections::BTreeMap;

use inferbench::energy::{compute_carbon, CarbonFactors, EnergyReading};
use inferbench::loadgen::{TrafficModel, PRNG_NAME};
use inferbench::metrics::{
    LatencyDistribution, StatsTriple, ThroughputBasis, ThroughputReading, ThroughputUnit,
    WorkloadDescriptor, DEFAULT_QUANTILES,
};
use inferbench::protocol::{DeviceAnnotations, Interconnect, ItemKind, MemoryType, Precision};
use inferbench::report::BenchmarkRecord;

/// Headline numbers of one table row.
#[derive(Debug, Clone, Copy)]
pub struct Row {
    pub throughput: f64,
    pub latency_ms: f64,
    pub energy_wh: f64,
    pub ce_mg: f64,
}

pub const fn row(throughput: f64, latency_ms: f64, energy_wh: f64, ce_mg: f64) -> Row {
    Row {
        throughput,
        latency_ms,
        energy_wh,
        ce_mg,
    }
}

/// ResNet rows on RTX 3090, batch size 100: (model, platform, precision, row).
pub const RESNET_ROWS: [(&str, &str, Precision, Row); 8] = [
    (
        "ResNet-18",
        "PyTorch",
        Precision::FP16,
        row(7922.41, 12.61, 0.154, 8.99),
    ),
    (
        "ResNet-18",
        "ONNX",
        Precision::FP16,
        row(4471.58, 22.36, 0.270, 15.92),
    ),
    (
        "ResNet-18",
        "TensorRT",
        Precision::FP16,
        row(2492.40, 40.12, 0.399, 23.25),
    ),
    (
        "ResNet-18",
        "TensorRT",
        Precision::INT8,
        row(3364.51, 29.72, 0.206, 12.01),
    ),
    (
        "ResNet-50",
        "PyTorch",
        Precision::FP16,
        row(1518.69, 65.85, 0.782, 45.58),
    ),
    (
        "ResNet-50",
        "ONNX",
        Precision::FP16,
        row(1910.61, 52.34, 0.653, 38.01),
    ),
    (
        "ResNet-50",
        "TensorRT",
        Precision::FP16,
        row(1703.77, 58.69, 0.647, 37.68),
    ),
    (
        "ResNet-50",
        "TensorRT",
        Precision::INT8,
        row(3004.10, 33.29, 0.297, 17.29),
    ),
];

/// OPT rows on RTX 3090 (tokens/s).
pub const OPT_ROWS: [(&str, &str, Precision, Row); 4] = [
    (
        "OPT-125M",
        "PyTorch",
        Precision::FP16,
        row(394.80, 374.94, 3.70, 215.46),
    ),
    (
        "OPT-125M",
        "SmoothQuant",
        Precision::INT8,
        row(429.10, 155.13, 1.54, 89.60),
    ),
    (
        "OPT-1.3B",
        "PyTorch",
        Precision::FP16,
        row(124.26, 1207.11, 16.56, 964.30),
    ),
    (
        "OPT-1.3B",
        "SmoothQuant",
        Precision::INT8,
        row(294.51, 44.14, 0.59, 34.77),
    ),
];

fn flat_distribution(ms: f64) -> LatencyDistribution {
    LatencyDistribution {
        count: 1,
        mean_ms: ms,
        head_ms: ms,
        percentiles: DEFAULT_QUANTILES
            .iter()
            .map(|&q| (q, ms))
            .collect::<BTreeMap<_, _>>(),
        max_ms: ms,
    }
}

/// A record carrying exactly the given headline values. Latency is flat so
/// every latency statistic equals `latency_ms`.
pub fn record(model: &str, platform: &str, precision: Precision, r: Row) -> BenchmarkRecord {
    let factors = CarbonFactors::new(1.0, 1.0, "fixture", "").unwrap();
    let energy = EnergyReading {
        energy_j: r.energy_wh * 3600.0,
        window_start_ns: 0,
        window_end_ns: 1_000_000_000,
        sample_count: 2,
    };
    let mut carbon = compute_carbon(&energy, &factors);
    carbon.carbon_g = r.ce_mg / 1e3;
    BenchmarkRecord {
        model_name: model.into(),
        platform: platform.into(),
        precision,
        device: DeviceAnnotations {
            device_name: "RTX 3090".into(),
            interconnect: Interconnect::PCIe,
            memory_type: MemoryType::GDDR,
            power_management: "default".into(),
        },
        item_kind: ItemKind::Sample,
        traffic: TrafficModel::StaticBatch {
            batch_size: 100,
            iterations: 1,
        },
        batch_size: 100,
        workload: WorkloadDescriptor {
            batch_size_stats: StatsTriple {
                min: 100,
                mean: 100.0,
                max: 100,
            },
            sequence_length_stats: None,
            total_requests: 1,
            total_items: 100,
        },
        latency: flat_distribution(r.latency_ms),
        service_latency: flat_distribution(r.latency_ms),
        throughput: ThroughputReading {
            value: r.throughput,
            unit: ThroughputUnit::SamplesPerSecond,
            basis: ThroughputBasis::PerBatch,
        },
        energy,
        carbon,
        accuracy: None,
        error_count: 0,
        total_requests: 1,
        valid: true,
        seed: 0,
        prng: PRNG_NAME.into(),
        config_fingerprint: String::new(),
        power_source_id: "fixture".into(),
    }
}

/// Brute-force strict Pareto dominance over all pairs, smaller is better
/// in every coordinate.
pub fn brute_force_frontier(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                j != i
                    && points[j].iter().zip(&points[i]).all(|(a, b)| a <= b)
                    && points[j].iter().zip(&points[i]).any(|(a, b)| a < b)
            })
        })
        .collect()
}

/// Nearest-rank percentile by definition: the smallest value whose rank k
/// satisfies k / n >= q, with q given in parts per million.
pub fn nearest_rank_oracle(sorted: &[u64], q_ppm: u64) -> u64 {
    let n = sorted.len() as u64;
    let k = (1..=n).find(|&k| k * 1_000_000 >= q_ppm * n).unwrap();
    sorted[(k - 1) as usize]
}
