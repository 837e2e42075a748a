//! Traffic generation and run orchestration.
//!
//! Three traffic shapes are supported: open-loop Poisson arrivals (requests
//! are issued on schedule regardless of outstanding responses), closed-loop
//! with a fixed number of concurrent clients, and sequential static batches.
//! A run issues warmup requests, starts power sampling, executes the
//! measured phase and seals the power trace once the last response is in.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{CarbonFactors, PowerTrace};
use crate::metrics::{LatencySample, Outcome};
use crate::power::{start_sampling, PowerError, PowerSourceConfig};
use crate::protocol::{
    Completed, InferRequest, ItemKind, PendingResponse, RunnerSession, SessionError,
};

/// Name of the generator behind arrival schedules, recorded in reports.
pub const PRNG_NAME: &str = "ChaCha8Rng";
pub const DEFAULT_WARMUP_ITERATIONS: u32 = 10;
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 1024;
/// Lead time between building an open-loop schedule and its first slot.
const SCHEDULE_LEAD_NS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("samples file: {0}")]
    SamplesFile(String),
    #[error("invalid run plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error("runner session: {0}")]
    Session(#[from] SessionError),
    #[error("run aborted after {} measured samples: {reason}", .samples.len())]
    Partial {
        samples: Vec<LatencySample>,
        reason: String,
    },
    #[error("all {} measured requests failed", .samples.len())]
    AllFailed { samples: Vec<LatencySample> },
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrafficModel {
    /// Exponential inter-arrivals at `rate_rps` for `duration_s`.
    OpenLoopPoisson {
        rate_rps: f64,
        duration_s: f64,
        #[serde(default = "one")]
        batch_size: u32,
    },
    /// `concurrency` clients, each issuing its next request on completion,
    /// until `requests` have been issued.
    ClosedLoop {
        concurrency: u32,
        requests: u64,
        #[serde(default = "one")]
        batch_size: u32,
    },
    StaticBatch {
        batch_size: u32,
        iterations: u64,
    },
}

impl TrafficModel {
    pub fn validate(&self) -> Result<(), RunError> {
        let err = |m: &str| Err(RunError::Plan(m.to_string()));
        if self.batch_size() == 0 {
            return err("batch_size must be >= 1");
        }
        match *self {
            TrafficModel::OpenLoopPoisson {
                rate_rps,
                duration_s,
                ..
            } => {
                if !(rate_rps.is_finite() && rate_rps > 0.0) {
                    return err("rate_rps must be > 0");
                }
                if !(duration_s.is_finite() && duration_s > 0.0) {
                    return err("duration_s must be > 0");
                }
            }
            TrafficModel::ClosedLoop {
                concurrency,
                requests,
                ..
            } => {
                if concurrency == 0 {
                    return err("concurrency must be >= 1");
                }
                if requests == 0 {
                    return err("requests must be >= 1");
                }
            }
            TrafficModel::StaticBatch { iterations, .. } => {
                if iterations == 0 {
                    return err("iterations must be >= 1");
                }
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> u32 {
        match *self {
            TrafficModel::OpenLoopPoisson { batch_size, .. }
            | TrafficModel::ClosedLoop { batch_size, .. }
            | TrafficModel::StaticBatch { batch_size, .. } => batch_size,
        }
    }

    pub fn with_batch_size(&self, b: u32) -> Self {
        let mut t = self.clone();
        match &mut t {
            TrafficModel::OpenLoopPoisson { batch_size, .. }
            | TrafficModel::ClosedLoop { batch_size, .. }
            | TrafficModel::StaticBatch { batch_size, .. } => *batch_size = b,
        }
        t
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            TrafficModel::OpenLoopPoisson { .. } => "open-loop-poisson",
            TrafficModel::ClosedLoop { .. } => "closed-loop",
            TrafficModel::StaticBatch { .. } => "static-batch",
        }
    }

    /// Compact descriptor such as `static-batch(B=100,iterations=10)`.
    pub fn label(&self) -> String {
        match *self {
            TrafficModel::OpenLoopPoisson {
                rate_rps,
                duration_s,
                batch_size,
            } => format!(
                "open-loop-poisson(rate={rate_rps}rps,duration={duration_s}s,B={batch_size})"
            ),
            TrafficModel::ClosedLoop {
                concurrency,
                requests,
                batch_size,
            } => {
                format!("closed-loop(concurrency={concurrency},requests={requests},B={batch_size})")
            }
            TrafficModel::StaticBatch {
                batch_size,
                iterations,
            } => format!("static-batch(B={batch_size},iterations={iterations})"),
        }
    }
}

/// Everything needed to execute one run (or one sweep) against a session.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub traffic: TrafficModel,
    pub warmup_iterations: u32,
    pub batch_sweep: Option<Vec<u32>>,
    pub power: PowerSourceConfig,
    pub carbon: CarbonFactors,
    pub seed: u64,
    pub request_timeout: Duration,
    /// Cap on outstanding open-loop requests.
    pub max_in_flight: usize,
    pub sequence_length: Option<u32>,
    pub payload_ref: Option<String>,
}

impl RunPlan {
    pub fn new(traffic: TrafficModel, power: PowerSourceConfig, carbon: CarbonFactors) -> Self {
        Self {
            traffic,
            warmup_iterations: DEFAULT_WARMUP_ITERATIONS,
            batch_sweep: None,
            power,
            carbon,
            seed: 0,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            sequence_length: None,
            payload_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.traffic.validate()?;
        self.power.validate()?;
        if self.max_in_flight == 0 {
            return Err(RunError::Plan("max_in_flight must be >= 1".into()));
        }
        if self.request_timeout.is_zero() {
            return Err(RunError::Plan("request timeout must be > 0".into()));
        }
        if let Some(sweep) = &self.batch_sweep {
            validate_batch_sweep(sweep)?;
        }
        Ok(())
    }
}

/// Sweep entries must be >= 1 and strictly increasing.
pub fn validate_batch_sweep(sweep: &[u32]) -> Result<(), RunError> {
    if sweep.is_empty() {
        return Err(RunError::Plan("batch_sweep must not be empty".into()));
    }
    if sweep[0] == 0 {
        return Err(RunError::Plan("batch_sweep entries must be >= 1".into()));
    }
    if sweep.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RunError::Plan(
            "batch_sweep must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Intended-start offsets (ns from schedule origin) of a Poisson process
/// with rate `rate_rps`, truncated at `duration_s`. Inter-arrivals are drawn
/// by inverse CDF from a [`PRNG_NAME`] stream seeded with `seed`.
pub fn generate_arrivals(rate_rps: f64, duration_s: f64, seed: u64) -> Result<Vec<u64>, RunError> {
    if !(rate_rps.is_finite() && rate_rps > 0.0 && duration_s.is_finite() && duration_s > 0.0) {
        return Err(RunError::Plan(format!(
            "arrival rate and duration must be positive, got {rate_rps} rps over {duration_s} s"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0f64;
    let mut offsets = Vec::with_capacity((rate_rps * duration_s * 1.1) as usize + 1);
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / rate_rps;
        if t >= duration_s {
            break;
        }
        offsets.push((t * 1e9).round() as u64);
    }
    Ok(offsets)
}

/// Samples, power trace and window from one executed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRun {
    pub traffic: TrafficModel,
    pub seed: u64,
    pub samples: Vec<LatencySample>,
    /// Items the runner reported per sample, aligned with `samples`.
    pub items_processed: Vec<u64>,
    pub trace: PowerTrace,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
    /// Harness-clock origin of the open-loop schedule.
    pub schedule_origin_ns: Option<u64>,
}

impl RawRun {
    pub fn batch_size(&self) -> u32 {
        self.traffic.batch_size()
    }

    pub fn error_count(&self) -> usize {
        self.samples.iter().filter(|s| !s.is_success()).count()
    }

    /// Token counts for workload statistics when the runner counts tokens.
    pub fn sequence_lengths(&self, item_kind: ItemKind) -> Option<Vec<u32>> {
        (item_kind == ItemKind::Token).then(|| {
            self.samples
                .iter()
                .zip(&self.items_processed)
                .filter(|(s, _)| s.is_success())
                .map(|(_, &n)| n.min(u64::from(u32::MAX)) as u32)
                .collect()
        })
    }

    /// Energy window: first intended start to last response.
    pub fn window(&self) -> (u64, u64) {
        (self.window_start_ns, self.window_end_ns)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    request_id: u64,
    intended_start_ns: u64,
    actual_start_ns: u64,
    end_ns: u64,
    batch_size: u32,
    outcome: Outcome,
    items_processed: u64,
}

/// Writes one CSV row per sample, items processed alongside.
pub fn write_samples_csv<W: std::io::Write>(
    samples: &[LatencySample],
    items_processed: &[u64],
    out: W,
) -> Result<(), RunError> {
    let err = |e: csv::Error| RunError::SamplesFile(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for (s, &items) in samples.iter().zip(items_processed) {
        w.serialize(SampleRow {
            request_id: s.request_id,
            intended_start_ns: s.intended_start_ns,
            actual_start_ns: s.actual_start_ns,
            end_ns: s.end_ns,
            batch_size: s.batch_size,
            outcome: s.outcome,
            items_processed: items,
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| RunError::SamplesFile(e.to_string()))
}

/// Inverse of [`write_samples_csv`]; every row is validated.
pub fn read_samples_csv<R: std::io::Read>(
    input: R,
) -> Result<(Vec<LatencySample>, Vec<u64>), RunError> {
    let mut samples = Vec::new();
    let mut items = Vec::new();
    for (i, row) in csv::Reader::from_reader(input)
        .deserialize::<SampleRow>()
        .enumerate()
    {
        let row = row.map_err(|e| RunError::SamplesFile(e.to_string()))?;
        let sample = LatencySample::new(
            row.request_id,
            row.intended_start_ns,
            row.actual_start_ns,
            row.end_ns,
            row.batch_size,
            row.outcome,
        )
        .map_err(|e| RunError::SamplesFile(format!("row {}: {e}", i + 1)))?;
        samples.push(sample);
        items.push(row.items_processed);
    }
    Ok((samples, items))
}

struct Measured {
    sample: LatencySample,
    items: u64,
}

enum Step {
    Done(Measured),
    Abort(String),
}

fn measure(
    id: u64,
    batch_size: u32,
    intended_start_ns: u64,
    actual_start_ns: u64,
    outcome: Result<Completed, SessionError>,
    now_ns: u64,
) -> Step {
    let (end_ns, outcome, items) = match outcome {
        Ok(done) if done.response.is_ok() => {
            (done.end_ns, Outcome::Success, done.response.items_processed)
        }
        Ok(done) => (done.end_ns, Outcome::Error, 0),
        Err(SessionError::Timeout { .. }) => (now_ns, Outcome::Error, 0),
        Err(e) => return Step::Abort(e.to_string()),
    };
    Step::Done(Measured {
        sample: LatencySample {
            request_id: id,
            intended_start_ns,
            actual_start_ns,
            end_ns: end_ns.max(actual_start_ns),
            batch_size,
            outcome,
        },
        items,
    })
}

struct Ctx<'a> {
    plan: &'a RunPlan,
    session: &'a RunnerSession,
    batch_size: u32,
}

impl Ctx<'_> {
    fn request(&self) -> InferRequest {
        InferRequest {
            id: self.session.next_request_id(),
            batch_size: self.batch_size,
            sequence_length: self.plan.sequence_length,
            payload_ref: self.plan.payload_ref.clone(),
        }
    }

    /// One request issued now and awaited; intended start equals actual start.
    fn issue_and_wait(&self) -> Step {
        let request = self.request();
        let pending = match self.session.send(&request) {
            Ok(p) => p,
            Err(e) => return Step::Abort(e.to_string()),
        };
        let start = pending.actual_start_ns();
        let outcome = pending.wait(self.plan.request_timeout);
        measure(
            request.id,
            self.batch_size,
            start,
            start,
            outcome,
            self.session.clock().now_ns(),
        )
    }

    fn warmup(&self) -> Result<(), RunError> {
        for _ in 0..self.plan.warmup_iterations {
            if let Step::Abort(reason) = self.issue_and_wait() {
                return Err(RunError::Partial {
                    samples: Vec::new(),
                    reason: format!("during warmup: {reason}"),
                });
            }
        }
        Ok(())
    }

    fn static_batch(&self, iterations: u64) -> (Vec<Measured>, Option<String>) {
        let mut out = Vec::with_capacity(iterations as usize);
        for _ in 0..iterations {
            match self.issue_and_wait() {
                Step::Done(m) => out.push(m),
                Step::Abort(reason) => return (out, Some(reason)),
            }
        }
        (out, None)
    }

    fn closed_loop(&self, concurrency: u32, requests: u64) -> (Vec<Measured>, Option<String>) {
        let issued = AtomicU64::new(0);
        let aborted = AtomicBool::new(false);
        let results = Mutex::new(Vec::with_capacity(requests as usize));
        let failure = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..concurrency {
                scope.spawn(|| {
                    while !aborted.load(Ordering::Acquire)
                        && issued.fetch_add(1, Ordering::AcqRel) < requests
                    {
                        match self.issue_and_wait() {
                            Step::Done(m) => results.lock().unwrap().push(m),
                            Step::Abort(reason) => {
                                aborted.store(true, Ordering::Release);
                                failure.lock().unwrap().get_or_insert(reason);
                            }
                        }
                    }
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|m| m.sample.actual_start_ns);
        (results, failure.into_inner().unwrap())
    }

    fn open_loop(&self, schedule: &[u64], origin_ns: u64) -> (Vec<Measured>, Option<String>) {
        let clock = self.session.clock();
        let timeout = self.plan.request_timeout;
        let mut outstanding: VecDeque<(u64, PendingResponse)> = VecDeque::new();
        let mut out = Vec::with_capacity(schedule.len());
        let collect = |intended: u64, p: PendingResponse, out: &mut Vec<Measured>| {
            let (id, start) = (p.id(), p.actual_start_ns());
            match measure(
                id,
                self.batch_size,
                intended,
                start,
                p.wait(timeout),
                clock.now_ns(),
            ) {
                Step::Done(m) => {
                    out.push(m);
                    None
                }
                Step::Abort(reason) => Some(reason),
            }
        };
        for &offset in schedule {
            let intended = origin_ns + offset;
            while self.session.in_flight() >= self.plan.max_in_flight {
                let Some((i, p)) = outstanding.pop_front() else {
                    break;
                };
                if let Some(reason) = collect(i, p, &mut out) {
                    return (out, Some(reason));
                }
            }
            clock.sleep_until(intended);
            let request = self.request();
            match self.session.send(&request) {
                Ok(p) => outstanding.push_back((intended, p)),
                Err(e) => return (out, Some(e.to_string())),
            }
        }
        for (i, p) in outstanding {
            if let Some(reason) = collect(i, p, &mut out) {
                return (out, Some(reason));
            }
        }
        (out, None)
    }
}

/// Executes one run of `plan.traffic` (the sweep list is ignored here).
pub fn execute_run(plan: &RunPlan, session: &RunnerSession) -> Result<RawRun, RunError> {
    plan.validate()?;
    let ctx = Ctx {
        plan,
        session,
        batch_size: plan.traffic.batch_size(),
    };
    let clock = session.clock();
    // sampling starts before warmup so the source is primed; warmup energy
    // falls outside the window
    let sampler = start_sampling(&plan.power, clock)?;
    if let Err(e) = ctx.warmup() {
        let _ = sampler.stop();
        return Err(e);
    }

    let mut schedule_origin_ns = None;
    let (measured, failure) = match plan.traffic {
        TrafficModel::StaticBatch { iterations, .. } => ctx.static_batch(iterations),
        TrafficModel::ClosedLoop {
            concurrency,
            requests,
            ..
        } => ctx.closed_loop(concurrency, requests),
        TrafficModel::OpenLoopPoisson {
            rate_rps,
            duration_s,
            ..
        } => {
            let schedule = generate_arrivals(rate_rps, duration_s, plan.seed)?;
            let origin = clock.now_ns() + SCHEDULE_LEAD_NS;
            schedule_origin_ns = Some(origin);
            ctx.open_loop(&schedule, origin)
        }
    };
    let trace = sampler.stop();

    let (samples, items_processed): (Vec<_>, Vec<_>) =
        measured.into_iter().map(|m| (m.sample, m.items)).unzip();
    if let Some(reason) = failure {
        return Err(RunError::Partial { samples, reason });
    }
    let trace = trace?;
    if samples.is_empty() {
        return Err(RunError::Plan(
            "the traffic model produced no measured requests".into(),
        ));
    }
    if samples.iter().all(|s| !s.is_success()) {
        return Err(RunError::AllFailed { samples });
    }
    let window_start_ns = samples.iter().map(|s| s.intended_start_ns).min().unwrap();
    let window_end_ns = samples
        .iter()
        .map(|s| s.end_ns)
        .max()
        .unwrap()
        .max(window_start_ns + 1);

    Ok(RawRun {
        traffic: plan.traffic.clone(),
        seed: plan.seed,
        samples,
        items_processed,
        trace,
        window_start_ns,
        window_end_ns,
        schedule_origin_ns,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub batch_size: u32,
    pub outcome: Result<RawRun, RunError>,
}

/// One run per entry of `plan.batch_sweep`, same traffic otherwise. A failed
/// batch size is recorded and the sweep moves on.
pub fn run_batch_sweep(
    plan: &RunPlan,
    session: &RunnerSession,
) -> Result<Vec<SweepEntry>, RunError> {
    plan.validate()?;
    let sweep = plan
        .batch_sweep
        .as_ref()
        .ok_or_else(|| RunError::Plan("plan has no batch_sweep".into()))?;
    Ok(sweep
        .iter()
        .map(|&batch_size| {
            let mut single = plan.clone();
            single.traffic = plan.traffic.with_batch_size(batch_size);
            single.batch_sweep = None;
            SweepEntry {
                batch_size,
                outcome: execute_run(&single, session),
            }
        })
        .collect())
}
