//! Energy from sampled power, and carbon from energy.
//!
//! Energy is the time integral of power, evaluated with the trapezoidal rule
//! over samples clipped to a window (power is linearly interpolated at the
//! window edges). Joules are used internally; watt-hours only at the
//! presentation boundary. Carbon is `PUE * kappa * E`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const JOULES_PER_WH: f64 = 3600.0;
const WH_PER_KWH: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("power must be a finite non-negative number of watts, got {0}")]
    NegativePower(f64),
    #[error("timestamps must be strictly increasing ({previous} then {next})")]
    Unordered { previous: u64, next: u64 },
    #[error("need at least 2 power samples to integrate, have {0}")]
    InsufficientSamples(usize),
    #[error(
        "window [{start}, {end}] does not overlap the trace span [{trace_start}, {trace_end}]"
    )]
    NoOverlap {
        start: u64,
        end: u64,
        trace_start: u64,
        trace_end: u64,
    },
    #[error("window end {end} must be after start {start}")]
    EmptyWindow { start: u64, end: u64 },
    #[error("{field}: {reason}")]
    InvalidFactor { field: &'static str, reason: String },
    #[error("unknown energy unit {0:?} (expected J, Wh or kWh)")]
    UnknownUnit(String),
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for EnergyError {
    fn from(e: std::io::Error) -> Self {
        EnergyError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_ns: u64,
    pub power_w: f64,
}

/// Time-ordered power samples from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    source_id: String,
    samples: Vec<PowerSample>,
}

impl PowerTrace {
    pub fn new(
        source_id: impl Into<String>,
        samples: Vec<PowerSample>,
    ) -> Result<Self, EnergyError> {
        for s in &samples {
            if !(s.power_w.is_finite() && s.power_w >= 0.0) {
                return Err(EnergyError::NegativePower(s.power_w));
            }
        }
        for pair in samples.windows(2) {
            if pair[1].timestamp_ns <= pair[0].timestamp_ns {
                return Err(EnergyError::Unordered {
                    previous: pair[0].timestamp_ns,
                    next: pair[1].timestamp_ns,
                });
            }
        }
        Ok(Self {
            source_id: source_id.into(),
            samples,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(first, last)` timestamps, if any samples exist.
    pub fn span(&self) -> Option<(u64, u64)> {
        Some((
            self.samples.first()?.timestamp_ns,
            self.samples.last()?.timestamp_ns,
        ))
    }

    /// Multiplies every power value by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, EnergyError> {
        let samples = self
            .samples
            .iter()
            .map(|s| PowerSample {
                timestamp_ns: s.timestamp_ns,
                power_w: s.power_w * factor,
            })
            .collect();
        PowerTrace::new(self.source_id.clone(), samples)
    }

    /// Linearly interpolated power at `t`, which must lie inside the span.
    fn power_at(&self, t: u64) -> f64 {
        let idx = self.samples.partition_point(|s| s.timestamp_ns < t);
        let right = self.samples[idx];
        if right.timestamp_ns == t || idx == 0 {
            return right.power_w;
        }
        let left = self.samples[idx - 1];
        let frac = (t - left.timestamp_ns) as f64 / (right.timestamp_ns - left.timestamp_ns) as f64;
        left.power_w + (right.power_w - left.power_w) * frac
    }

    /// Writes the archive CSV (`timestamp_ns,power_w`, LF endings).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), EnergyError> {
        out.write_all(b"timestamp_ns,power_w\n")?;
        for s in &self.samples {
            writeln!(out, "{},{}", s.timestamp_ns, s.power_w)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace CSV is ASCII")
    }

    /// Parses the archive CSV. Errors carry 1-based line numbers.
    pub fn read_csv<R: BufRead>(
        source_id: impl Into<String>,
        input: R,
    ) -> Result<Self, EnergyError> {
        let mut samples = Vec::new();
        let mut saw_header = false;
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if !saw_header {
                if line.trim() != "timestamp_ns,power_w" {
                    return Err(EnergyError::Parse {
                        line: line_no,
                        reason: format!("expected header `timestamp_ns,power_w`, got {line:?}"),
                    });
                }
                saw_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| EnergyError::Parse {
                line: line_no,
                reason,
            };
            let (ts, pw) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("expected two fields, got {line:?}")))?;
            let timestamp_ns: u64 = ts
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad timestamp {ts:?}: {e}")))?;
            let power_w: f64 = pw
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad power {pw:?}: {e}")))?;
            if !(power_w.is_finite() && power_w >= 0.0) {
                return Err(parse_err(format!(
                    "power must be non-negative, got {power_w}"
                )));
            }
            if let Some(prev) = samples.last().map(|s: &PowerSample| s.timestamp_ns) {
                if timestamp_ns <= prev {
                    return Err(parse_err(format!(
                        "timestamp {timestamp_ns} does not follow {prev}"
                    )));
                }
            }
            samples.push(PowerSample {
                timestamp_ns,
                power_w,
            });
        }
        if !saw_header {
            return Err(EnergyError::Parse {
                line: 1,
                reason: "empty trace file".to_string(),
            });
        }
        PowerTrace::new(source_id, samples)
    }
}

/// Integrated energy over a window of the harness clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReading {
    pub energy_j: f64,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
    pub sample_count: usize,
}

impl EnergyReading {
    pub fn energy_wh(&self) -> f64 {
        self.energy_j / JOULES_PER_WH
    }

    pub fn window_s(&self) -> f64 {
        (self.window_end_ns - self.window_start_ns) as f64 / 1e9
    }
}

/// Trapezoidal energy over `[start_ns, end_ns]`, clipped to the trace span.
/// `sample_count` counts the points used, including interpolated edges.
pub fn integrate_energy(
    trace: &PowerTrace,
    start_ns: u64,
    end_ns: u64,
) -> Result<EnergyReading, EnergyError> {
    if end_ns <= start_ns {
        return Err(EnergyError::EmptyWindow {
            start: start_ns,
            end: end_ns,
        });
    }
    if trace.len() < 2 {
        return Err(EnergyError::InsufficientSamples(trace.len()));
    }
    let (first, last) = trace.span().expect("trace has samples");
    if end_ns <= first || start_ns >= last {
        return Err(EnergyError::NoOverlap {
            start: start_ns,
            end: end_ns,
            trace_start: first,
            trace_end: last,
        });
    }
    let lo = start_ns.max(first);
    let hi = end_ns.min(last);

    let mut points = Vec::with_capacity(trace.len() + 2);
    points.push((lo, trace.power_at(lo)));
    points.extend(
        trace
            .samples()
            .iter()
            .filter(|s| s.timestamp_ns > lo && s.timestamp_ns < hi)
            .map(|s| (s.timestamp_ns, s.power_w)),
    );
    points.push((hi, trace.power_at(hi)));

    let energy_j = points
        .windows(2)
        .map(|w| {
            let dt = (w[1].0 - w[0].0) as f64 / 1e9;
            0.5 * (w[0].1 + w[1].1) * dt
        })
        .sum();

    Ok(EnergyReading {
        energy_j,
        window_start_ns: start_ns,
        window_end_ns: end_ns,
        sample_count: points.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnergyUnit {
    #[serde(rename = "J")]
    Joule,
    #[serde(rename = "Wh")]
    WattHour,
    #[serde(rename = "kWh")]
    KilowattHour,
}

impl EnergyUnit {
    fn joules(self) -> f64 {
        match self {
            EnergyUnit::Joule => 1.0,
            EnergyUnit::WattHour => JOULES_PER_WH,
            EnergyUnit::KilowattHour => JOULES_PER_WH * WH_PER_KWH,
        }
    }
}

impl FromStr for EnergyUnit {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "J" => Ok(EnergyUnit::Joule),
            "Wh" => Ok(EnergyUnit::WattHour),
            "kWh" => Ok(EnergyUnit::KilowattHour),
            other => Err(EnergyError::UnknownUnit(other.to_string())),
        }
    }
}

impl fmt::Display for EnergyUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnergyUnit::Joule => "J",
            EnergyUnit::WattHour => "Wh",
            EnergyUnit::KilowattHour => "kWh",
        })
    }
}

pub fn convert_energy(value: f64, from: EnergyUnit, to: EnergyUnit) -> f64 {
    if from == to {
        return value;
    }
    let (f, t) = (from.joules(), to.joules());
    if f >= t {
        value * (f / t)
    } else {
        value / (t / f)
    }
}

/// String-typed entry point for unit conversion; unknown units are errors.
pub fn convert_energy_units(value: f64, from: &str, to: &str) -> Result<f64, EnergyError> {
    Ok(convert_energy(value, from.parse()?, to.parse()?))
}

/// Facility overhead and grid intensity used for carbon accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCarbonFactors", deny_unknown_fields)]
pub struct CarbonFactors {
    pue: f64,
    /// kg CO2e per kWh.
    kappa: f64,
    region_label: String,
    timestamp_label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCarbonFactors {
    #[serde(deserialize_with = "de_pue")]
    pue: f64,
    #[serde(deserialize_with = "de_kappa")]
    kappa: f64,
    #[serde(default)]
    region_label: String,
    #[serde(default)]
    timestamp_label: String,
}

fn de_pue<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    check_pue(v).map_err(serde::de::Error::custom)
}

fn de_kappa<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    check_kappa(v).map_err(serde::de::Error::custom)
}

fn check_pue(pue: f64) -> Result<f64, EnergyError> {
    if pue.is_finite() && pue >= 1.0 {
        Ok(pue)
    } else {
        Err(EnergyError::InvalidFactor {
            field: "pue",
            reason: format!("must be >= 1.0, got {pue}"),
        })
    }
}

fn check_kappa(kappa: f64) -> Result<f64, EnergyError> {
    if kappa.is_finite() && kappa >= 0.0 {
        Ok(kappa)
    } else {
        Err(EnergyError::InvalidFactor {
            field: "kappa",
            reason: format!("must be >= 0 kg/kWh, got {kappa}"),
        })
    }
}

impl TryFrom<RawCarbonFactors> for CarbonFactors {
    type Error = EnergyError;

    fn try_from(raw: RawCarbonFactors) -> Result<Self, Self::Error> {
        CarbonFactors::new(raw.pue, raw.kappa, raw.region_label, raw.timestamp_label)
    }
}

impl CarbonFactors {
    pub fn new(
        pue: f64,
        kappa: f64,
        region_label: impl Into<String>,
        timestamp_label: impl Into<String>,
    ) -> Result<Self, EnergyError> {
        let pue = check_pue(pue)?;
        let kappa = check_kappa(kappa)?;
        Ok(Self {
            pue,
            kappa,
            region_label: region_label.into(),
            timestamp_label: timestamp_label.into(),
        })
    }

    pub fn pue(&self) -> f64 {
        self.pue
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn region_label(&self) -> &str {
        &self.region_label
    }

    pub fn timestamp_label(&self) -> &str {
        &self.timestamp_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonReading {
    pub carbon_g: f64,
    pub factors: CarbonFactors,
    pub energy: EnergyReading,
}

impl CarbonReading {
    pub fn carbon_mg(&self) -> f64 {
        self.carbon_g * 1e3
    }
}

/// `C = PUE * kappa * E`. With kappa in kg/kWh and E in Wh the product is
/// already in grams.
pub fn compute_carbon(energy: &EnergyReading, factors: &CarbonFactors) -> CarbonReading {
    CarbonReading {
        carbon_g: factors.pue * factors.kappa * energy.energy_wh(),
        factors: factors.clone(),
        energy: energy.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(points: &[(u64, f64)]) -> PowerTrace {
        PowerTrace::new(
            "test",
            points
                .iter()
                .map(|&(timestamp_ns, power_w)| PowerSample {
                    timestamp_ns,
                    power_w,
                })
                .collect(),
        )
        .unwrap()
    }

    const S: u64 = 1_000_000_000;

    #[test]
    fn constant_power_one_wh() {
        let t = trace(&(0..=36).map(|i| (i * S, 100.0)).collect::<Vec<_>>());
        let e = integrate_energy(&t, 0, 36 * S).unwrap();
        assert!((e.energy_wh() - 1.0).abs() < 1e-12);
        assert_eq!(e.sample_count, 37);
    }

    #[test]
    fn ramp_is_exact() {
        let t = trace(
            &(0..=72)
                .map(|i| (i * S, 100.0 * i as f64 / 72.0))
                .collect::<Vec<_>>(),
        );
        let e = integrate_energy(&t, 0, 72 * S).unwrap();
        assert!((e.energy_wh() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_interpolation() {
        // 0 W at t=0 rising to 100 W at t=10 s; window [2.5 s, 7.5 s]
        // analytic: mean power 50 W * 5 s = 250 J
        let t = trace(&[(0, 0.0), (10 * S, 100.0)]);
        let e = integrate_energy(&t, 2 * S + S / 2, 7 * S + S / 2).unwrap();
        assert!((e.energy_j - 250.0).abs() < 1e-9);
        assert_eq!(e.sample_count, 2);
    }

    #[test]
    fn window_clipped_to_trace() {
        let t = trace(&[(10 * S, 10.0), (20 * S, 10.0)]);
        let e = integrate_energy(&t, 0, 100 * S).unwrap();
        assert!((e.energy_j - 100.0).abs() < 1e-9);
    }

    #[test]
    fn integration_errors() {
        let t = trace(&[(10 * S, 10.0), (20 * S, 10.0)]);
        assert!(matches!(
            integrate_energy(&t, 21 * S, 30 * S),
            Err(EnergyError::NoOverlap { .. })
        ));
        assert!(matches!(
            integrate_energy(&t, 0, 10 * S),
            Err(EnergyError::NoOverlap { .. })
        ));
        assert!(matches!(
            integrate_energy(&t, 15 * S, 15 * S),
            Err(EnergyError::EmptyWindow { .. })
        ));
        let single = trace(&[(0, 10.0)]);
        assert_eq!(
            integrate_energy(&single, 0, S),
            Err(EnergyError::InsufficientSamples(1))
        );
    }

    #[test]
    fn trace_invariants() {
        assert!(PowerTrace::new(
            "x",
            vec![PowerSample {
                timestamp_ns: 0,
                power_w: -1.0
            }]
        )
        .is_err());
        assert!(matches!(
            PowerTrace::new(
                "x",
                vec![
                    PowerSample {
                        timestamp_ns: 5,
                        power_w: 1.0
                    },
                    PowerSample {
                        timestamp_ns: 5,
                        power_w: 1.0
                    }
                ]
            ),
            Err(EnergyError::Unordered { .. })
        ));
    }

    #[test]
    fn carbon_examples() {
        let energy = |wh: f64| EnergyReading {
            energy_j: wh * 3600.0,
            window_start_ns: 0,
            window_end_ns: 1,
            sample_count: 2,
        };
        let unit = CarbonFactors::new(1.0, 1.0, "unit", "").unwrap();
        assert!((compute_carbon(&energy(1000.0), &unit).carbon_g - 1000.0).abs() < 1e-9);
        let f = CarbonFactors::new(1.5, 0.4, "r", "").unwrap();
        assert!((compute_carbon(&energy(2.0), &f).carbon_g - 1.2).abs() < 1e-12);
    }

    #[test]
    fn factor_validation() {
        assert!(CarbonFactors::new(0.9, 0.4, "", "").is_err());
        assert!(CarbonFactors::new(1.0, -0.1, "", "").is_err());
        assert!(CarbonFactors::new(f64::NAN, 0.1, "", "").is_err());
        let err = serde_json::from_str::<CarbonFactors>(r#"{"pue":0.9,"kappa":0.4}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("pue"), "{err}");
        assert!(serde_json::from_str::<CarbonFactors>(r#"{"pue":1.2,"kappa":0.4,"x":1}"#).is_err());
    }

    #[test]
    fn unit_conversion() {
        assert_eq!(convert_energy_units(3600.0, "J", "Wh").unwrap(), 1.0);
        assert_eq!(convert_energy_units(1.0, "kWh", "Wh").unwrap(), 1000.0);
        assert!((convert_energy_units(0.154, "Wh", "J").unwrap() - 554.4).abs() < 1e-9);
        assert_eq!(convert_energy_units(1.0, "kWh", "J").unwrap(), 3.6e6);
        assert_eq!(convert_energy_units(3.6e6, "J", "kWh").unwrap(), 1.0);
        assert_eq!(
            convert_energy_units(1.0, "cal", "J"),
            Err(EnergyError::UnknownUnit("cal".into()))
        );
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let t = trace(&[(0, 1.5), (100, 0.1 + 0.2), (250, 42.0)]);
        let text = t.to_csv_string();
        assert_eq!(
            text,
            "timestamp_ns,power_w\n0,1.5\n100,0.30000000000000004\n250,42\n"
        );
        let back = PowerTrace::read_csv("test", text.as_bytes()).unwrap();
        assert_eq!(back, t);

        let err =
            PowerTrace::read_csv("x", "timestamp_ns,power_w\n0,1\nabc,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, EnergyError::Parse { line: 3, .. }), "{err}");
        let err = PowerTrace::read_csv("x", "time,watts\n".as_bytes()).unwrap_err();
        assert!(matches!(err, EnergyError::Parse { line: 1, .. }));
        let err =
            PowerTrace::read_csv("x", "timestamp_ns,power_w\n5,1\n5,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, EnergyError::Parse { line: 3, .. }));
    }
}
