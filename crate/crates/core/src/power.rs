//! Power sources that record a [`PowerTrace`] alongside a benchmark run.
//!
//! A sampling session has exactly one writer: a background thread for
//! tick-driven and streaming sources, or nothing at all for replayed files.
//! The trace only becomes visible once [`SamplingSession::stop`] seals it.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::energy::{EnergyError, PowerSample, PowerTrace};

pub const DEFAULT_INTERVAL_MS: u64 = 100;
const STREAM_FIRST_LINE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerError {
    #[error("power source config: {0}")]
    Config(String),
    #[error("failed to start power command {command:?}: {reason}")]
    Spawn { command: String, reason: String },
    #[error("power command {command:?} exited with {status}: {stderr}")]
    CommandFailed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("power command {command:?} printed {output:?}, expected a watts value")]
    BadOutput { command: String, output: String },
    #[error("replay {path}: {source}")]
    Replay { path: String, source: EnergyError },
    #[error(transparent)]
    Trace(#[from] EnergyError),
}

/// Deterministic power waveform, evaluated at seconds since session start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum Waveform {
    Constant {
        watts: f64,
    },
    /// Linear from `start_w` to `end_w` over `duration_s`, then held.
    Ramp {
        start_w: f64,
        end_w: f64,
        duration_s: f64,
    },
    Sinusoid {
        mean_w: f64,
        amplitude_w: f64,
        period_s: f64,
    },
}

impl Waveform {
    pub fn validate(&self) -> Result<(), PowerError> {
        let bad = |msg: String| Err(PowerError::Config(msg));
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            Waveform::Constant { watts } if !nonneg(watts) => {
                bad(format!("constant watts must be >= 0, got {watts}"))
            }
            Waveform::Ramp {
                start_w,
                end_w,
                duration_s,
            } if !(nonneg(start_w) && nonneg(end_w) && duration_s > 0.0) => bad(format!(
                "ramp needs non-negative endpoints and positive duration, got {start_w}..{end_w} over {duration_s}s"
            )),
            Waveform::Sinusoid {
                mean_w,
                amplitude_w,
                period_s,
            } if !(nonneg(mean_w) && amplitude_w.abs() <= mean_w && period_s > 0.0) => bad(format!(
                "sinusoid needs mean >= |amplitude| and positive period, got mean {mean_w}, amplitude {amplitude_w}, period {period_s}"
            )),
            _ => Ok(()),
        }
    }

    pub fn power_at(&self, t_s: f64) -> f64 {
        match *self {
            Waveform::Constant { watts } => watts,
            Waveform::Ramp {
                start_w,
                end_w,
                duration_s,
            } => start_w + (end_w - start_w) * (t_s / duration_s).clamp(0.0, 1.0),
            Waveform::Sinusoid {
                mean_w,
                amplitude_w,
                period_s,
            } => (mean_w + amplitude_w * (std::f64::consts::TAU * t_s / period_s).sin()).max(0.0),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Waveform::Constant { .. } => "constant",
            Waveform::Ramp { .. } => "ramp",
            Waveform::Sinusoid { .. } => "sinusoid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayAlign {
    /// Shift the file so its first timestamp lands on the session start.
    #[default]
    SessionStart,
    /// Keep timestamps as written; used when the file was recorded on the
    /// harness clock of the run being replayed.
    AsRecorded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayParams {
    pub path: PathBuf,
    #[serde(default)]
    pub align: ReplayAlign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandMode {
    /// Run the command once per tick; the first stdout line is the reading.
    #[default]
    PerTick,
    /// Run the command once; every stdout line is a reading.
    Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCommandParams {
    pub command: Vec<String>,
    #[serde(default)]
    pub mode: CommandMode,
}

/// Where power readings come from. Exactly one of `replay`, `synthetic`
/// and `external_command` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSourceConfig {
    #[serde(default = "default_interval_ms")]
    pub interval_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplayParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<Waveform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_command: Option<ExternalCommandParams>,
}

fn default_interval_ms() -> u64 {
    DEFAULT_INTERVAL_MS
}

/// Borrowed view of the populated source kind.
#[derive(Debug, Clone, Copy)]
pub enum PowerSourceKind<'a> {
    Replay(&'a ReplayParams),
    Synthetic(&'a Waveform),
    ExternalCommand(&'a ExternalCommandParams),
}

impl PowerSourceConfig {
    pub fn synthetic(waveform: Waveform, interval_ms: u64) -> Self {
        Self {
            interval_ms,
            source_id: None,
            replay: None,
            synthetic: Some(waveform),
            external_command: None,
        }
    }

    pub fn replay(path: impl Into<PathBuf>, align: ReplayAlign) -> Self {
        Self {
            interval_ms: DEFAULT_INTERVAL_MS,
            source_id: None,
            replay: Some(ReplayParams {
                path: path.into(),
                align,
            }),
            synthetic: None,
            external_command: None,
        }
    }

    pub fn external_command(command: Vec<String>, mode: CommandMode, interval_ms: u64) -> Self {
        Self {
            interval_ms,
            source_id: None,
            replay: None,
            synthetic: None,
            external_command: Some(ExternalCommandParams { command, mode }),
        }
    }

    pub fn kind(&self) -> Result<PowerSourceKind<'_>, PowerError> {
        if self.interval_ms == 0 {
            return Err(PowerError::Config("interval_ms must be > 0".into()));
        }
        let mut kinds = Vec::new();
        if let Some(r) = &self.replay {
            kinds.push(PowerSourceKind::Replay(r));
        }
        if let Some(w) = &self.synthetic {
            w.validate()?;
            kinds.push(PowerSourceKind::Synthetic(w));
        }
        if let Some(c) = &self.external_command {
            if c.command.is_empty() {
                return Err(PowerError::Config(
                    "external_command.command is empty".into(),
                ));
            }
            kinds.push(PowerSourceKind::ExternalCommand(c));
        }
        match kinds.as_slice() {
            [one] => Ok(*one),
            [] => Err(PowerError::Config(
                "one of replay, synthetic or external_command must be set".into(),
            )),
            _ => Err(PowerError::Config(
                "only one of replay, synthetic or external_command may be set".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<(), PowerError> {
        self.kind().map(|_| ())
    }

    pub fn resolved_source_id(&self) -> Result<String, PowerError> {
        if let Some(id) = &self.source_id {
            return Ok(id.clone());
        }
        Ok(match self.kind()? {
            PowerSourceKind::Replay(r) => format!("replay:{}", r.path.display()),
            PowerSourceKind::Synthetic(w) => format!("synthetic:{}", w.label()),
            PowerSourceKind::ExternalCommand(c) => format!("command:{}", c.command.join(" ")),
        })
    }
}

type Shared<T> = Arc<Mutex<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SessionMode {
    Replay,
    Ticker,
    Stream,
}

/// A running power sampler. Safe to stop from any thread; stopping more
/// than once returns the same sealed result.
pub struct SamplingSession {
    clock: Clock,
    start_ns: u64,
    source_id: String,
    samples: Shared<Vec<PowerSample>>,
    failure: Shared<Option<PowerError>>,
    stop_tx: Mutex<Option<mpsc::Sender<()>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
    child: Mutex<Option<Child>>,
    mode: SessionMode,
    sealed: OnceLock<Result<PowerTrace, PowerError>>,
}

impl std::fmt::Debug for SamplingSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SamplingSession")
            .field("source_id", &self.source_id)
            .field("start_ns", &self.start_ns)
            .finish_non_exhaustive()
    }
}

fn push_strict(samples: &mut Vec<PowerSample>, sample: PowerSample) {
    match samples.last() {
        Some(last) if sample.timestamp_ns <= last.timestamp_ns => {}
        _ => samples.push(sample),
    }
}

fn parse_watts(command: &str, text: &str) -> Result<f64, PowerError> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    match line.parse::<f64>() {
        Ok(w) if w.is_finite() && w >= 0.0 => Ok(w),
        _ => Err(PowerError::BadOutput {
            command: command.to_string(),
            output: line.to_string(),
        }),
    }
}

fn run_once(argv: &[String]) -> Result<f64, PowerError> {
    let display = argv.join(" ");
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .output()
        .map_err(|e| PowerError::Spawn {
            command: display.clone(),
            reason: e.to_string(),
        })?;
    if !output.status.success() {
        return Err(PowerError::CommandFailed {
            command: display,
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    parse_watts(&display, &String::from_utf8_lossy(&output.stdout))
}

enum TickReader {
    Synthetic { waveform: Waveform, start_ns: u64 },
    Command { argv: Vec<String> },
}

impl TickReader {
    fn sample(&self, clock: &Clock) -> Result<PowerSample, PowerError> {
        match self {
            TickReader::Synthetic { waveform, start_ns } => {
                let t = clock.now_ns();
                Ok(PowerSample {
                    timestamp_ns: t,
                    power_w: waveform.power_at((t - start_ns) as f64 / 1e9),
                })
            }
            TickReader::Command { argv } => {
                let power_w = run_once(argv)?;
                Ok(PowerSample {
                    timestamp_ns: clock.now_ns(),
                    power_w,
                })
            }
        }
    }
}

/// Begins sampling on `clock`. An initial sample is taken before returning,
/// so spawn and parse failures surface here rather than at stop time.
pub fn start_sampling(
    config: &PowerSourceConfig,
    clock: Clock,
) -> Result<SamplingSession, PowerError> {
    let kind = config.kind()?;
    let source_id = config.resolved_source_id()?;
    let start_ns = clock.now_ns();
    let interval_ns = config.interval_ms * 1_000_000;

    let mut session = SamplingSession {
        clock,
        start_ns,
        source_id,
        samples: Arc::new(Mutex::new(Vec::new())),
        failure: Arc::new(Mutex::new(None)),
        stop_tx: Mutex::new(None),
        worker: Mutex::new(None),
        child: Mutex::new(None),
        mode: SessionMode::Ticker,
        sealed: OnceLock::new(),
    };

    match kind {
        PowerSourceKind::Replay(params) => {
            let file = std::fs::File::open(&params.path).map_err(|e| PowerError::Replay {
                path: params.path.display().to_string(),
                source: EnergyError::Io(e.to_string()),
            })?;
            let trace = PowerTrace::read_csv(session.source_id.clone(), BufReader::new(file))
                .map_err(|source| PowerError::Replay {
                    path: params.path.display().to_string(),
                    source,
                })?;
            let offset = match (params.align, trace.samples().first()) {
                (ReplayAlign::SessionStart, Some(first)) => {
                    start_ns as i128 - first.timestamp_ns as i128
                }
                _ => 0,
            };
            let rebased = trace
                .samples()
                .iter()
                .map(|s| PowerSample {
                    timestamp_ns: (s.timestamp_ns as i128 + offset).max(0) as u64,
                    power_w: s.power_w,
                })
                .collect();
            *session.samples.lock().unwrap() = rebased;
            session.mode = SessionMode::Replay;
        }
        PowerSourceKind::Synthetic(waveform) => {
            let reader = TickReader::Synthetic {
                waveform: waveform.clone(),
                start_ns,
            };
            session.spawn_ticker(reader, interval_ns)?;
        }
        PowerSourceKind::ExternalCommand(params) => match params.mode {
            CommandMode::PerTick => {
                let reader = TickReader::Command {
                    argv: params.command.clone(),
                };
                session.spawn_ticker(reader, interval_ns)?;
            }
            CommandMode::Stream => session.spawn_stream(&params.command)?,
        },
    }
    Ok(session)
}

impl SamplingSession {
    pub fn start_ns(&self) -> u64 {
        self.start_ns
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    fn spawn_ticker(&mut self, reader: TickReader, interval_ns: u64) -> Result<(), PowerError> {
        let first = reader.sample(&self.clock)?;
        self.samples.lock().unwrap().push(first);

        let (tx, rx) = mpsc::channel::<()>();
        let clock = self.clock;
        let start_ns = self.start_ns;
        let samples = Arc::clone(&self.samples);
        let failure = Arc::clone(&self.failure);
        let handle = std::thread::Builder::new()
            .name("power-sampler".into())
            .spawn(move || {
                let mut next_tick = start_ns + interval_ns;
                loop {
                    let wait = next_tick.saturating_sub(clock.now_ns());
                    let stopping = !matches!(
                        rx.recv_timeout(Duration::from_nanos(wait)),
                        Err(RecvTimeoutError::Timeout)
                    );
                    if stopping {
                        // final sample at stop time; spin until the clock moves
                        let last = samples.lock().unwrap().last().map(|s| s.timestamp_ns);
                        while Some(clock.now_ns()) <= last {
                            std::hint::spin_loop();
                        }
                    }
                    match reader.sample(&clock) {
                        Ok(sample) => push_strict(&mut samples.lock().unwrap(), sample),
                        Err(e) => {
                            *failure.lock().unwrap() = Some(e);
                            return;
                        }
                    }
                    if stopping {
                        return;
                    }
                    // missed ticks are skipped, never back-filled
                    let now = clock.now_ns();
                    while next_tick <= now {
                        next_tick += interval_ns;
                    }
                }
            })
            .map_err(|e| PowerError::Config(format!("cannot spawn sampler thread: {e}")))?;
        *self.stop_tx.lock().unwrap() = Some(tx);
        *self.worker.lock().unwrap() = Some(handle);
        Ok(())
    }

    fn spawn_stream(&mut self, argv: &[String]) -> Result<(), PowerError> {
        let display = argv.join(" ");
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| PowerError::Spawn {
                command: display.clone(),
                reason: e.to_string(),
            })?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let clock = self.clock;
        let samples = Arc::clone(&self.samples);
        let failure = Arc::clone(&self.failure);
        let (first_tx, first_rx) = mpsc::channel::<Result<(), PowerError>>();
        let cmd = display.clone();
        let handle = std::thread::Builder::new()
            .name("power-stream".into())
            .spawn(move || {
                let mut first_tx = Some(first_tx);
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    let timestamp_ns = clock.now_ns();
                    match parse_watts(&cmd, &line) {
                        Ok(power_w) => {
                            push_strict(
                                &mut samples.lock().unwrap(),
                                PowerSample {
                                    timestamp_ns,
                                    power_w,
                                },
                            );
                            if let Some(tx) = first_tx.take() {
                                let _ = tx.send(Ok(()));
                            }
                        }
                        Err(e) => {
                            if let Some(tx) = first_tx.take() {
                                let _ = tx.send(Err(e.clone()));
                            }
                            *failure.lock().unwrap() = Some(e);
                            return;
                        }
                    }
                }
                if let Some(tx) = first_tx.take() {
                    let _ = tx.send(Err(PowerError::BadOutput {
                        command: cmd,
                        output: String::new(),
                    }));
                }
            })
            .map_err(|e| PowerError::Config(format!("cannot spawn sampler thread: {e}")))?;

        *self.worker.lock().unwrap() = Some(handle);
        let first = first_rx
            .recv_timeout(STREAM_FIRST_LINE_TIMEOUT)
            .unwrap_or_else(|_| {
                Err(PowerError::BadOutput {
                    command: display.clone(),
                    output: "<no output>".into(),
                })
            });
        if let Err(e) = first {
            let _ = child.kill();
            let status = child.wait().map(|s| s.to_string()).unwrap_or_default();
            return Err(match e {
                PowerError::BadOutput { output, .. } if output.is_empty() => {
                    PowerError::CommandFailed {
                        command: display,
                        status,
                        stderr: read_stderr(&mut child),
                    }
                }
                other => other,
            });
        }
        *self.child.lock().unwrap() = Some(child);
        self.mode = SessionMode::Stream;
        Ok(())
    }

    /// Stops sampling and seals the trace. Later calls return the same result.
    pub fn stop(&self) -> Result<PowerTrace, PowerError> {
        self.sealed.get_or_init(|| self.seal()).clone()
    }

    fn seal(&self) -> Result<PowerTrace, PowerError> {
        drop(self.stop_tx.lock().unwrap().take());
        let child = self.child.lock().unwrap().take();
        let mut stream_exit = None;
        if let Some(mut child) = child {
            match child.try_wait() {
                Ok(Some(status)) if !status.success() => {
                    stream_exit = Some(PowerError::CommandFailed {
                        command: self.source_id.clone(),
                        status: status.to_string(),
                        stderr: read_stderr(&mut child),
                    });
                }
                Ok(Some(_)) => {}
                _ => {
                    let _ = child.kill();
                    let _ = child.wait();
                }
            }
        }
        if let Some(handle) = self.worker.lock().unwrap().take() {
            let _ = handle.join();
        }
        if let Some(e) = self.failure.lock().unwrap().take().or(stream_exit) {
            return Err(e);
        }

        let mut samples = std::mem::take(&mut *self.samples.lock().unwrap());
        let stop_ns = self.clock.now_ns();
        // replayed and streamed sources cannot be polled at stop time, so the
        // last reading is held until then
        if self.mode != SessionMode::Ticker {
            if let Some(last) = samples.last().copied() {
                if stop_ns > last.timestamp_ns {
                    samples.push(PowerSample {
                        timestamp_ns: stop_ns,
                        power_w: last.power_w,
                    });
                }
            }
        }
        let trace = PowerTrace::new(self.source_id.clone(), samples)?;
        if trace.len() < 2 {
            return Err(EnergyError::InsufficientSamples(trace.len()).into());
        }
        Ok(trace)
    }
}

fn read_stderr(child: &mut Child) -> String {
    use std::io::Read;
    let mut buf = String::new();
    if let Some(mut err) = child.stderr.take() {
        let _ = err.read_to_string(&mut buf);
    }
    buf.trim().to_string()
}

impl Drop for SamplingSession {
    fn drop(&mut self) {
        if self.sealed.get().is_none() {
            let _ = self.stop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn constant(watts: f64, interval_ms: u64) -> PowerSourceConfig {
        PowerSourceConfig::synthetic(Waveform::Constant { watts }, interval_ms)
    }

    #[test]
    fn immediate_stop_has_two_samples() {
        let session = start_sampling(&constant(100.0, 100), Clock::new()).unwrap();
        let trace = session.stop().unwrap();
        assert!(trace.len() >= 2);
        assert!(trace.samples().iter().all(|s| s.power_w == 100.0));
    }

    #[test]
    fn double_stop_is_idempotent() {
        let session = start_sampling(&constant(5.0, 10), Clock::new()).unwrap();
        std::thread::sleep(Duration::from_millis(30));
        let a = session.stop().unwrap();
        std::thread::sleep(Duration::from_millis(20));
        let b = session.stop().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_source_over_one_second() {
        let session = start_sampling(&constant(100.0, 100), Clock::new()).unwrap();
        std::thread::sleep(Duration::from_secs(1));
        let trace = session.stop().unwrap();
        assert!(trace.len() >= 9, "{} samples", trace.len());
        assert!(trace.samples().iter().all(|s| s.power_w == 100.0));
    }

    #[test]
    fn synthetic_is_reproducible_from_timestamps() {
        let wave = Waveform::Sinusoid {
            mean_w: 100.0,
            amplitude_w: 50.0,
            period_s: 0.05,
        };
        let session =
            start_sampling(&PowerSourceConfig::synthetic(wave.clone(), 5), Clock::new()).unwrap();
        std::thread::sleep(Duration::from_millis(60));
        let start = session.start_ns();
        let trace = session.stop().unwrap();
        for s in trace.samples() {
            assert_eq!(
                s.power_w,
                wave.power_at((s.timestamp_ns - start) as f64 / 1e9)
            );
        }
    }

    #[test]
    fn replay_rebases_to_session_start() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "timestamp_ns,power_w\n1000,10\n2000,20\n3000000000,30\n").unwrap();
        let config = PowerSourceConfig::replay(f.path(), ReplayAlign::SessionStart);
        let session = start_sampling(&config, Clock::new()).unwrap();
        let start = session.start_ns();
        let trace = session.stop().unwrap();
        let got: Vec<_> = trace
            .samples()
            .iter()
            .map(|s| (s.timestamp_ns - start, s.power_w))
            .collect();
        assert_eq!(got, vec![(0, 10.0), (1000, 20.0), (2_999_999_000, 30.0)]);
    }

    #[test]
    fn replay_parse_error_has_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "timestamp_ns,power_w\n0,1\n10,oops\n").unwrap();
        let err = start_sampling(
            &PowerSourceConfig::replay(f.path(), ReplayAlign::SessionStart),
            Clock::new(),
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                PowerError::Replay {
                    source: EnergyError::Parse { line: 3, .. },
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn per_tick_command() {
        let config = PowerSourceConfig::external_command(
            vec!["sh".into(), "-c".into(), "echo 42.5".into()],
            CommandMode::PerTick,
            20,
        );
        let session = start_sampling(&config, Clock::new()).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let trace = session.stop().unwrap();
        assert!(trace.len() >= 2);
        assert!(trace.samples().iter().all(|s| s.power_w == 42.5));
    }

    #[test]
    fn stream_command() {
        let config = PowerSourceConfig::external_command(
            vec![
                "sh".into(),
                "-c".into(),
                "while true; do echo 7.25; sleep 0.01; done".into(),
            ],
            CommandMode::Stream,
            100,
        );
        let session = start_sampling(&config, Clock::new()).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let trace = session.stop().unwrap();
        assert!(trace.len() >= 3, "{}", trace.len());
        assert!(trace.samples().iter().all(|s| s.power_w == 7.25));
    }

    #[test]
    fn command_spawn_failure() {
        let config = PowerSourceConfig::external_command(
            vec!["/nonexistent/power-probe".into()],
            CommandMode::PerTick,
            100,
        );
        assert!(matches!(
            start_sampling(&config, Clock::new()),
            Err(PowerError::Spawn { .. })
        ));
    }

    #[test]
    fn command_failing_mid_run_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("count");
        let script = format!(
            "n=$(cat {m} 2>/dev/null || echo 0); n=$((n+1)); echo $n > {m}; \
             if [ $n -ge 3 ]; then echo boom >&2; exit 3; fi; echo 10",
            m = marker.display()
        );
        let config = PowerSourceConfig::external_command(
            vec!["sh".into(), "-c".into(), script],
            CommandMode::PerTick,
            10,
        );
        let session = start_sampling(&config, Clock::new()).unwrap();
        std::thread::sleep(Duration::from_millis(150));
        let err = session.stop().unwrap_err();
        assert!(
            matches!(&err, PowerError::CommandFailed { stderr, .. } if stderr == "boom"),
            "{err}"
        );
    }

    #[test]
    fn config_requires_exactly_one_kind() {
        let mut c = constant(1.0, 100);
        assert!(c.validate().is_ok());
        c.replay = Some(ReplayParams {
            path: "x.csv".into(),
            align: ReplayAlign::SessionStart,
        });
        assert!(c.validate().is_err());
        c.replay = None;
        c.synthetic = None;
        assert!(c.validate().is_err());
        let mut c = constant(1.0, 0);
        assert!(c.validate().is_err());
        c.interval_ms = 100;
        c.synthetic = Some(Waveform::Sinusoid {
            mean_w: 10.0,
            amplitude_w: 20.0,
            period_s: 1.0,
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_shape() {
        let c: PowerSourceConfig = serde_json::from_str(
            r#"{"interval_ms": 50, "synthetic": {"shape": "ramp", "start_w": 0, "end_w": 100, "duration_s": 72}}"#,
        )
        .unwrap();
        assert_eq!(c.interval_ms, 50);
        assert!(matches!(
            c.kind().unwrap(),
            PowerSourceKind::Synthetic(Waveform::Ramp { .. })
        ));
        let c: PowerSourceConfig =
            serde_json::from_str(r#"{"synthetic": {"shape": "constant", "watts": 3}}"#).unwrap();
        assert_eq!(c.interval_ms, DEFAULT_INTERVAL_MS);
        assert!(serde_json::from_str::<PowerSourceConfig>(
            r#"{"synthetic": {"shape": "constant", "watts": 3, "bogus": 1}}"#
        )
        .is_err());
    }
}
