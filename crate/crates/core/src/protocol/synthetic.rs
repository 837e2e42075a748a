//! A deterministic-delay runner speaking the wire protocol.
//!
//! Service time for a batch of `B` items is `base_delay_ms + per_item_delay_ms * B`.
//! It backs the `synthetic-runner` subcommand and the in-process fakes used
//! by tests; fault switches make it misbehave in specific ways.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::os::unix::net::UnixStream;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    DeviceAnnotations, Handshake, InferResponse, Interconnect, ItemKind, MemoryType, Message,
    Precision, ResponseStatus, ResultMessage, RunnerSession, SessionError, SessionOptions,
    WireStatus, PROTOCOL_VERSION,
};
use crate::clock::Clock;

const REORDER_IDLE_FLUSH: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Answer with `id + 1_000_000` instead of the request id.
    WrongIds,
    /// Exit with `code` instead of serving request number `requests + 1`.
    ExitAfter { requests: u64, code: i32 },
    /// Declare this protocol version in the handshake.
    ProtocolVersion(u32),
    /// Emit a syntactically broken handshake line.
    MalformedHello,
    /// Fail every request with this batch size.
    ErrorOnBatch(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub base_delay_ms: f64,
    pub per_item_delay_ms: f64,
    /// Reported as `items_processed` when set, instead of the batch size.
    #[serde(default)]
    pub tokens_per_request: Option<u64>,
    /// Responses are released in reverse order once this many are buffered.
    #[serde(default)]
    pub reorder_window: usize,
    pub handshake: Handshake,
    #[serde(default)]
    pub fault: Option<Fault>,
}

impl SyntheticSpec {
    pub fn new(base_delay_ms: f64, per_item_delay_ms: f64) -> Self {
        Self {
            base_delay_ms,
            per_item_delay_ms,
            tokens_per_request: None,
            reorder_window: 0,
            handshake: Handshake {
                protocol_version: PROTOCOL_VERSION,
                model_name: "synthetic".into(),
                platform: "synthetic".into(),
                precision: Precision::FP32,
                item_kind: ItemKind::Sample,
                device: DeviceAnnotations {
                    device_name: "none".into(),
                    interconnect: Interconnect::None,
                    memory_type: MemoryType::Other,
                    power_management: String::new(),
                },
                accuracy: None,
            },
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn service_time(&self, batch_size: u32) -> Duration {
        Duration::from_secs_f64(
            (self.base_delay_ms + self.per_item_delay_ms * f64::from(batch_size)).max(0.0) / 1e3,
        )
    }
}

fn write_line(out: &mut impl Write, message: &Message) -> std::io::Result<()> {
    out.write_all(message.to_line().as_bytes())?;
    out.flush()
}

/// Serves one session until `shutdown` or end of input. Returns the exit
/// code the runner process should use.
pub fn serve(
    spec: &SyntheticSpec,
    input: Box<dyn Read + Send>,
    mut output: impl Write,
) -> std::io::Result<i32> {
    let origin = Instant::now();
    let since = |at: Instant| at.duration_since(origin).as_nanos() as u64;

    match spec.fault {
        Some(Fault::MalformedHello) => {
            output.write_all(b"{\"type\":\"hello\",\"protocol_version\":\n")?;
            output.flush()?;
        }
        Some(Fault::ProtocolVersion(v)) => {
            let mut h = spec.handshake.clone();
            h.protocol_version = v;
            write_line(&mut output, &Message::Hello(h))?;
        }
        _ => write_line(&mut output, &Message::Hello(spec.handshake.clone()))?,
    }

    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in BufReader::new(input).lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let mut buffered: Vec<ResultMessage> = Vec::new();
    let flush = |buffered: &mut Vec<ResultMessage>, out: &mut dyn Write| -> std::io::Result<()> {
        for r in buffered.drain(..).rev() {
            out.write_all(Message::Result(r).to_line().as_bytes())?;
        }
        out.flush()
    };
    let mut served = 0u64;
    loop {
        let line = if buffered.is_empty() {
            rx.recv().map_err(|_| RecvTimeoutError::Disconnected)
        } else {
            rx.recv_timeout(REORDER_IDLE_FLUSH)
        };
        let line = match line {
            Ok(line) => line,
            Err(RecvTimeoutError::Timeout) => {
                flush(&mut buffered, &mut output)?;
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => {
                flush(&mut buffered, &mut output)?;
                return Ok(0);
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let request = match serde_json::from_str::<Message>(&line) {
            Ok(Message::Infer(request)) => request,
            Ok(Message::Shutdown) => {
                flush(&mut buffered, &mut output)?;
                return Ok(0);
            }
            Ok(_) => continue,
            Err(e) => {
                let reply = ResultMessage {
                    id: 0,
                    status: WireStatus::Error,
                    items_processed: None,
                    message: Some(format!("malformed line: {e}")),
                    runner_start_ns: None,
                    runner_end_ns: None,
                };
                write_line(&mut output, &Message::Result(reply))?;
                continue;
            }
        };
        if let Some(Fault::ExitAfter { requests, code }) = spec.fault {
            if served >= requests {
                return Ok(code);
            }
        }
        let start = Instant::now();
        let status = if request.batch_size == 0 {
            ResponseStatus::Error("batch_size must be >= 1".into())
        } else if spec.fault == Some(Fault::ErrorOnBatch(request.batch_size)) {
            ResponseStatus::Error(format!(
                "injected failure for batch size {}",
                request.batch_size
            ))
        } else {
            std::thread::sleep(spec.service_time(request.batch_size));
            ResponseStatus::Ok
        };
        let end = Instant::now();
        served += 1;
        let id = match spec.fault {
            Some(Fault::WrongIds) => request.id + 1_000_000,
            _ => request.id,
        };
        let response = InferResponse {
            id,
            items_processed: match status {
                ResponseStatus::Ok => spec
                    .tokens_per_request
                    .unwrap_or(u64::from(request.batch_size)),
                ResponseStatus::Error(_) => 0,
            },
            status,
            runner_start_ns: Some(since(start)),
            runner_end_ns: Some(since(end)),
        };
        let reply = ResultMessage::from(&response);
        if spec.reorder_window > 1 {
            buffered.push(reply);
            if buffered.len() >= spec.reorder_window {
                flush(&mut buffered, &mut output)?;
            }
        } else {
            write_line(&mut output, &Message::Result(reply))?;
        }
    }
}

/// Harness-side reader and writer plus the runner thread.
pub type InProcessRunner = (Box<dyn Read + Send>, Box<dyn Write + Send>, JoinHandle<i32>);

/// Runs the synthetic runner on a thread, connected through a socket pair.
pub fn spawn_in_process(spec: SyntheticSpec) -> std::io::Result<InProcessRunner> {
    let (harness, runner) = UnixStream::pair()?;
    let runner_in = runner.try_clone()?;
    let handle = std::thread::Builder::new()
        .name("synthetic-runner".into())
        .spawn(move || {
            let code = serve(&spec, Box::new(runner_in), &runner).unwrap_or(1);
            let _ = runner.shutdown(std::net::Shutdown::Both);
            code
        })?;
    let reader = harness.try_clone()?;
    Ok((Box::new(reader), Box::new(harness), handle))
}

/// Opens a session against an in-process synthetic runner.
pub fn connect_in_process(
    spec: SyntheticSpec,
    clock: Clock,
    options: &SessionOptions,
) -> Result<(RunnerSession, JoinHandle<i32>), SessionError> {
    let (reader, writer, handle) =
        spawn_in_process(spec).map_err(|e| SessionError::Io(e.to_string()))?;
    let session = RunnerSession::from_streams(reader, writer, clock, options)?;
    Ok((session, handle))
}

/// Accepts a single TCP connection and serves it.
pub fn serve_tcp(spec: &SyntheticSpec, listener: TcpListener) -> std::io::Result<i32> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    let input = stream.try_clone()?;
    let code = serve(spec, Box::new(input), &stream)?;
    // the line reader thread still holds a clone; shut down so the peer sees EOF
    let _ = stream.shutdown(std::net::Shutdown::Both);
    Ok(code)
}
