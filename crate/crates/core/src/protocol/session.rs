use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Handshake, InferRequest, InferResponse, Message, PROTOCOL_VERSION};
use crate::clock::Clock;

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);
const STDERR_TAIL_BYTES: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("cannot start runner {command:?}: {reason}")]
    Spawn { command: String, reason: String },
    #[error("cannot connect to {address}: {reason}")]
    Connect { address: String, reason: String },
    #[error("connect timeout: no handshake from the runner within {0:?}")]
    ConnectTimeout(Duration),
    #[error("handshake: runner speaks protocol version {runner}, harness supports {harness}")]
    VersionMismatch { runner: u32, harness: u32 },
    #[error("malformed message on line {line_no}: {reason}: {line:?}")]
    Parse {
        line_no: usize,
        line: String,
        reason: String,
    },
    #[error("session is closed")]
    Closed,
    #[error("transport closed: {0}")]
    TransportClosed(String),
    #[error("request id {0} is already in flight")]
    DuplicateId(u64),
    #[error("request {id} timed out after {timeout:?}")]
    Timeout { id: u64, timeout: Duration },
    #[error("transport i/o: {0}")]
    Io(String),
}

/// How to reach a runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Spawn `argv` and talk over its stdin/stdout.
    Command(Vec<String>),
    /// `host:port` of a listening runner.
    Tcp(String),
}

impl std::fmt::Display for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transport::Command(argv) => write!(f, "command `{}`", argv.join(" ")),
            Transport::Tcp(addr) => write!(f, "tcp {addr}"),
        }
    }
}

const CONNECT_RETRY: Duration = Duration::from_millis(50);

/// Lines kept when transcript recording is on.
pub const TRANSCRIPT_CAP: usize = 4096;

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub connect_timeout: Duration,
    /// Keep the most recent lines sent and received, for diagnostics and
    /// conformance.
    pub record_transcript: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            record_transcript: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Connecting,
    Ready,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptLine {
    pub outbound: bool,
    pub at_ns: u64,
    pub text: String,
}

impl std::fmt::Display for TranscriptLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let arrow = if self.outbound { ">>" } else { "<<" };
        write!(f, "{arrow} {}", self.text)
    }
}

/// A response together with harness-clock send and receipt times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completed {
    pub response: InferResponse,
    pub actual_start_ns: u64,
    pub end_ns: u64,
}

enum Delivery {
    Response(InferResponse, u64),
    Closed(String),
}

struct Shared {
    clock: Clock,
    state: Mutex<SessionState>,
    pending: Mutex<HashMap<u64, mpsc::Sender<Delivery>>>,
    violations: Mutex<Vec<String>>,
    transcript: Option<Mutex<VecDeque<TranscriptLine>>>,
    closed_reason: Mutex<Option<String>>,
    shutdown_sent: Mutex<bool>,
    peer_closed_early: Mutex<bool>,
}

impl Shared {
    fn record(&self, outbound: bool, at_ns: u64, text: &str) {
        if let Some(t) = &self.transcript {
            let mut t = t.lock().unwrap();
            if t.len() == TRANSCRIPT_CAP {
                t.pop_front();
            }
            t.push_back(TranscriptLine {
                outbound,
                at_ns,
                text: text.trim_end().to_string(),
            });
        }
    }

    fn mark_closed(&self, reason: String) {
        {
            let mut state = self.state.lock().unwrap();
            if *state != SessionState::Closed && !*self.shutdown_sent.lock().unwrap() {
                *self.peer_closed_early.lock().unwrap() = true;
            }
            *state = SessionState::Closed;
        }
        self.closed_reason
            .lock()
            .unwrap()
            .get_or_insert(reason.clone());
        for (_, tx) in self.pending.lock().unwrap().drain() {
            let _ = tx.send(Delivery::Closed(reason.clone()));
        }
    }
}

/// A request that has been written to the runner and awaits its result.
pub struct PendingResponse {
    id: u64,
    actual_start_ns: u64,
    rx: mpsc::Receiver<Delivery>,
    shared: Arc<Shared>,
}

impl PendingResponse {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn actual_start_ns(&self) -> u64 {
        self.actual_start_ns
    }

    /// Waits until `timeout` has elapsed since the request was sent.
    pub fn wait(self, timeout: Duration) -> Result<Completed, SessionError> {
        let deadline = self.shared.clock.instant_at(self.actual_start_ns) + timeout;
        let remaining = deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(remaining) {
            Ok(Delivery::Response(response, end_ns)) => Ok(Completed {
                response,
                actual_start_ns: self.actual_start_ns,
                end_ns,
            }),
            Ok(Delivery::Closed(reason)) => Err(SessionError::TransportClosed(reason)),
            Err(RecvTimeoutError::Timeout) => {
                self.shared.pending.lock().unwrap().remove(&self.id);
                // the response may have landed between the timeout and removal
                if let Ok(Delivery::Response(response, end_ns)) = self.rx.try_recv() {
                    return Ok(Completed {
                        response,
                        actual_start_ns: self.actual_start_ns,
                        end_ns,
                    });
                }
                Err(SessionError::Timeout {
                    id: self.id,
                    timeout,
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(SessionError::TransportClosed(
                self.shared
                    .closed_reason
                    .lock()
                    .unwrap()
                    .clone()
                    .unwrap_or_else(|| "reader stopped".into()),
            )),
        }
    }
}

/// Outcome of closing a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShutdownReport {
    /// The transport closed before the harness sent `shutdown`.
    pub peer_closed_early: bool,
    /// Child exit status, for command transports.
    pub exit_status: Option<ExitStatus>,
    /// The runner closed its end within the grace period.
    pub clean_eof: bool,
}

/// A handshaken connection to one runner. Outbound writes are serialized
/// through one writer; a reader thread routes results to waiters by id.
pub struct RunnerSession {
    handshake: Handshake,
    shared: Arc<Shared>,
    writer: Mutex<Option<Box<dyn Write + Send>>>,
    child: Mutex<Option<Child>>,
    tcp: Option<TcpStream>,
    reader_done: Mutex<Option<mpsc::Receiver<()>>>,
    stderr_tail: Arc<Mutex<Vec<u8>>>,
    shutdown_report: Mutex<Option<ShutdownReport>>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for RunnerSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunnerSession")
            .field("handshake", &self.handshake)
            .field("state", &self.state())
            .finish_non_exhaustive()
    }
}

impl RunnerSession {
    pub fn open(
        transport: &Transport,
        clock: Clock,
        options: &SessionOptions,
    ) -> Result<Self, SessionError> {
        match transport {
            Transport::Command(argv) => Self::spawn(argv, clock, options),
            Transport::Tcp(address) => Self::connect(address, clock, options),
        }
    }

    fn spawn(
        argv: &[String],
        clock: Clock,
        options: &SessionOptions,
    ) -> Result<Self, SessionError> {
        let display = argv.join(" ");
        let Some((program, args)) = argv.split_first() else {
            return Err(SessionError::Spawn {
                command: display,
                reason: "empty command line".into(),
            });
        };
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SessionError::Spawn {
                command: display,
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let stderr = child.stderr.take().expect("stderr is piped");
        let tail = Arc::new(Mutex::new(Vec::new()));
        let tail_writer = Arc::clone(&tail);
        std::thread::spawn(move || drain_stderr(stderr, tail_writer));
        let result = Self::handshake(
            Box::new(stdout),
            Box::new(stdin),
            clock,
            options,
            None,
            tail,
        );
        match result {
            Ok(session) => {
                *session.child.lock().unwrap() = Some(child);
                Ok(session)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    fn connect(
        address: &str,
        clock: Clock,
        options: &SessionOptions,
    ) -> Result<Self, SessionError> {
        let connect_err = |reason: String| SessionError::Connect {
            address: address.to_string(),
            reason,
        };
        let addrs: Vec<_> = address
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .collect();
        if addrs.is_empty() {
            return Err(connect_err("no addresses resolved".into()));
        }
        // a runner that is still starting refuses connections; retry until
        // the connect timeout
        let deadline = Instant::now() + options.connect_timeout;
        let mut last_err;
        loop {
            last_err = String::new();
            for addr in &addrs {
                let remaining = deadline.saturating_duration_since(Instant::now());
                if remaining.is_zero() {
                    return Err(SessionError::ConnectTimeout(options.connect_timeout));
                }
                match TcpStream::connect_timeout(addr, remaining) {
                    Ok(stream) => {
                        let _ = stream.set_nodelay(true);
                        let reader = stream.try_clone().map_err(|e| connect_err(e.to_string()))?;
                        let writer = stream.try_clone().map_err(|e| connect_err(e.to_string()))?;
                        return Self::handshake(
                            Box::new(reader),
                            Box::new(writer),
                            clock,
                            options,
                            Some(stream),
                            Arc::new(Mutex::new(Vec::new())),
                        );
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::TimedOut => {
                        return Err(SessionError::ConnectTimeout(options.connect_timeout))
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => {
                        last_err = e.to_string();
                    }
                    Err(e) => return Err(connect_err(e.to_string())),
                }
            }
            if Instant::now() >= deadline {
                log::debug!("last connect error: {last_err}");
                return Err(SessionError::ConnectTimeout(options.connect_timeout));
            }
            std::thread::sleep(CONNECT_RETRY);
        }
    }

    /// Runs the handshake over an already-connected byte stream pair.
    pub fn from_streams(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        clock: Clock,
        options: &SessionOptions,
    ) -> Result<Self, SessionError> {
        Self::handshake(
            reader,
            writer,
            clock,
            options,
            None,
            Arc::new(Mutex::new(Vec::new())),
        )
    }

    fn handshake(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        clock: Clock,
        options: &SessionOptions,
        tcp: Option<TcpStream>,
        stderr_tail: Arc<Mutex<Vec<u8>>>,
    ) -> Result<Self, SessionError> {
        let shared = Arc::new(Shared {
            clock,
            state: Mutex::new(SessionState::Connecting),
            pending: Mutex::new(HashMap::new()),
            violations: Mutex::new(Vec::new()),
            transcript: options
                .record_transcript
                .then(|| Mutex::new(VecDeque::new())),
            closed_reason: Mutex::new(None),
            shutdown_sent: Mutex::new(false),
            peer_closed_early: Mutex::new(false),
        });
        let (hello_tx, hello_rx) = mpsc::channel::<Option<String>>();
        let (done_tx, done_rx) = mpsc::channel::<()>();
        let reader_shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("runner-reader".into())
            .spawn(move || {
                read_loop(BufReader::new(reader), reader_shared, hello_tx);
                drop(done_tx);
            })
            .map_err(|e| SessionError::Io(e.to_string()))?;

        let session_err = |e: SessionError| {
            if let Some(stream) = &tcp {
                let _ = stream.shutdown(Shutdown::Both);
            }
            e
        };
        let line = match hello_rx.recv_timeout(options.connect_timeout) {
            Ok(Some(line)) => line,
            Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                let tail = String::from_utf8_lossy(&stderr_tail.lock().unwrap()).into_owned();
                return Err(session_err(SessionError::TransportClosed(format!(
                    "runner closed the stream before its handshake{}",
                    if tail.is_empty() {
                        String::new()
                    } else {
                        format!("; stderr: {}", tail.trim())
                    }
                ))));
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(session_err(SessionError::ConnectTimeout(
                    options.connect_timeout,
                )))
            }
        };
        let parse_err = |reason: String| SessionError::Parse {
            line_no: 1,
            line: line.trim_end().to_string(),
            reason,
        };
        let handshake = match serde_json::from_str::<Message>(&line) {
            Ok(Message::Hello(h)) => h,
            Ok(other) => {
                return Err(session_err(parse_err(format!(
                    "expected a hello message, got {other:?}"
                ))))
            }
            Err(e) => {
                // distinguish a wrong version from a malformed hello
                let version = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("protocol_version")?.as_u64());
                if let Some(v) = version.filter(|&v| v != u64::from(PROTOCOL_VERSION)) {
                    return Err(session_err(SessionError::VersionMismatch {
                        runner: v as u32,
                        harness: PROTOCOL_VERSION,
                    }));
                }
                return Err(session_err(parse_err(e.to_string())));
            }
        };
        if handshake.protocol_version != PROTOCOL_VERSION {
            return Err(session_err(SessionError::VersionMismatch {
                runner: handshake.protocol_version,
                harness: PROTOCOL_VERSION,
            }));
        }

        let session = Self {
            handshake,
            shared,
            writer: Mutex::new(Some(writer)),
            child: Mutex::new(None),
            tcp,
            reader_done: Mutex::new(Some(done_rx)),
            stderr_tail,
            shutdown_report: Mutex::new(None),
            next_id: AtomicU64::new(1),
        };
        session.write_message(&Message::HelloAck {
            protocol_version: PROTOCOL_VERSION,
        })?;
        *session.shared.state.lock().unwrap() = SessionState::Ready;
        Ok(session)
    }

    pub fn handshake_info(&self) -> &Handshake {
        &self.handshake
    }

    pub fn state(&self) -> SessionState {
        *self.shared.state.lock().unwrap()
    }

    pub fn clock(&self) -> Clock {
        self.shared.clock
    }

    /// A request id not yet handed out by this session.
    pub fn next_request_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    pub fn in_flight(&self) -> usize {
        self.shared.pending.lock().unwrap().len()
    }

    /// Protocol violations observed by the reader (unknown ids, junk lines).
    pub fn violations(&self) -> Vec<String> {
        self.shared.violations.lock().unwrap().clone()
    }

    pub fn transcript(&self) -> Vec<TranscriptLine> {
        self.shared
            .transcript
            .as_ref()
            .map(|t| t.lock().unwrap().iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn stderr_tail(&self) -> String {
        String::from_utf8_lossy(&self.stderr_tail.lock().unwrap()).into_owned()
    }

    fn write_message(&self, message: &Message) -> Result<u64, SessionError> {
        let line = message.to_line();
        let mut guard = self.writer.lock().unwrap();
        let writer = guard.as_mut().ok_or(SessionError::Closed)?;
        let at_ns = self.shared.clock.now_ns();
        let written = writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush());
        drop(guard);
        self.shared.record(true, at_ns, &line);
        match written {
            Ok(()) => Ok(at_ns),
            Err(e) => {
                let reason = format!("write failed: {e}");
                self.shared.mark_closed(reason.clone());
                Err(SessionError::TransportClosed(reason))
            }
        }
    }

    /// Sends a request without waiting. `actual_start_ns` is stamped after
    /// serialization, just before the bytes are written.
    pub fn send(&self, request: &InferRequest) -> Result<PendingResponse, SessionError> {
        if self.state() != SessionState::Ready {
            return Err(SessionError::Closed);
        }
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.shared.pending.lock().unwrap();
            if pending.contains_key(&request.id) {
                return Err(SessionError::DuplicateId(request.id));
            }
            pending.insert(request.id, tx);
        }
        match self.write_message(&Message::Infer(request.clone())) {
            Ok(actual_start_ns) => Ok(PendingResponse {
                id: request.id,
                actual_start_ns,
                rx,
                shared: Arc::clone(&self.shared),
            }),
            Err(e) => {
                self.shared.pending.lock().unwrap().remove(&request.id);
                Err(e)
            }
        }
    }

    pub fn infer(
        &self,
        request: &InferRequest,
        timeout: Duration,
    ) -> Result<Completed, SessionError> {
        self.send(request)?.wait(timeout)
    }

    /// Sends `shutdown`, closes the outbound stream and waits briefly for the
    /// runner to exit. Idempotent.
    pub fn close(&self) -> ShutdownReport {
        if let Some(report) = self.shutdown_report.lock().unwrap().clone() {
            return report;
        }
        if self.state() != SessionState::Closed {
            *self.shared.shutdown_sent.lock().unwrap() = true;
            let _ = self.write_message(&Message::Shutdown);
        }
        *self.shared.state.lock().unwrap() = SessionState::Closed;
        drop(self.writer.lock().unwrap().take());

        let deadline = Instant::now() + SHUTDOWN_GRACE;
        let clean_eof = match self.reader_done.lock().unwrap().take() {
            Some(done) => matches!(
                done.recv_timeout(SHUTDOWN_GRACE),
                Err(RecvTimeoutError::Disconnected)
            ),
            None => true,
        };
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(Shutdown::Both);
        }
        let exit_status = self
            .child
            .lock()
            .unwrap()
            .take()
            .and_then(|mut child| loop {
                match child.try_wait() {
                    Ok(Some(status)) => return Some(status),
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(5))
                    }
                    _ => {
                        let _ = child.kill();
                        return child.wait().ok();
                    }
                }
            });
        let peer_closed_early = *self.shared.peer_closed_early.lock().unwrap();
        self.shared.mark_closed("session closed".into());
        let report = ShutdownReport {
            peer_closed_early,
            exit_status,
            clean_eof,
        };
        *self.shutdown_report.lock().unwrap() = Some(report.clone());
        report
    }
}

impl Drop for RunnerSession {
    fn drop(&mut self) {
        self.close();
    }
}

fn drain_stderr(mut stderr: impl Read, tail: Arc<Mutex<Vec<u8>>>) {
    let mut buf = [0u8; 4096];
    while let Ok(n) = stderr.read(&mut buf) {
        if n == 0 {
            break;
        }
        let mut t = tail.lock().unwrap();
        t.extend_from_slice(&buf[..n]);
        if t.len() > STDERR_TAIL_BYTES {
            let excess = t.len() - STDERR_TAIL_BYTES;
            t.drain(..excess);
        }
    }
}

fn read_loop(
    mut reader: impl BufRead,
    shared: Arc<Shared>,
    hello_tx: mpsc::Sender<Option<String>>,
) {
    let mut hello_tx = Some(hello_tx);
    let mut line = String::new();
    let mut line_no = 0usize;
    loop {
        line.clear();
        let read = reader.read_line(&mut line);
        let end_ns = shared.clock.now_ns();
        match read {
            Ok(0) => {
                if let Some(tx) = hello_tx.take() {
                    let _ = tx.send(None);
                }
                shared.mark_closed("runner closed the stream".into());
                return;
            }
            Err(e) => {
                if let Some(tx) = hello_tx.take() {
                    let _ = tx.send(None);
                }
                shared.mark_closed(format!("read failed: {e}"));
                return;
            }
            Ok(_) => {}
        }
        line_no += 1;
        shared.record(false, end_ns, &line);
        if let Some(tx) = hello_tx.take() {
            let _ = tx.send(Some(line.clone()));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Message>(&line) {
            Ok(Message::Result(result)) => {
                let id = result.id;
                let waiter = shared.pending.lock().unwrap().remove(&id);
                match waiter {
                    Some(tx) => {
                        let _ = tx.send(Delivery::Response(result.into(), end_ns));
                    }
                    None => shared.violations.lock().unwrap().push(format!(
                        "line {line_no}: result for unknown or expired id {id}"
                    )),
                }
            }
            Ok(other) => shared
                .violations
                .lock()
                .unwrap()
                .push(format!("line {line_no}: unexpected message {other:?}")),
            Err(e) => shared.violations.lock().unwrap().push(format!(
                "line {line_no}: malformed message ({e}): {}",
                line.trim_end()
            )),
        }
    }
}
