//! Protocol conformance checks for runner implementations.

use std::fmt::Write as _;
use std::time::Duration;

use super::{
    InferRequest, ItemKind, ResponseStatus, RunnerSession, SessionError, SessionOptions, Transport,
};
use crate::clock::Clock;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub transcript: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Human-readable verdicts; transcripts are included for failed checks.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "[{verdict}] {:<16} {}", c.name, c.detail);
            if !c.passed {
                for line in &c.transcript {
                    let _ = writeln!(out, "         {line}");
                }
            }
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.checks.len());
        out
    }
}

pub const CHECK_NAMES: [&str; 5] = [
    "handshake",
    "sequential_infer",
    "out_of_order",
    "error_response",
    "shutdown",
];

/// Runs every check against a runner reached through `transport`.
pub fn check_conformance(transport: &Transport, timeout: Duration) -> ConformanceReport {
    let options = SessionOptions {
        connect_timeout: timeout.max(Duration::from_secs(1)),
        record_transcript: true,
    };
    check_conformance_with(
        || RunnerSession::open(transport, Clock::new(), &options),
        timeout,
    )
}

/// Like [`check_conformance`], with a caller-supplied session factory. The
/// factory must enable transcript recording for transcripts to appear.
pub fn check_conformance_with(
    open: impl FnOnce() -> Result<RunnerSession, SessionError>,
    timeout: Duration,
) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let session = match open() {
        Ok(session) => session,
        Err(e) => {
            report.checks.push(CheckResult {
                name: "handshake",
                passed: false,
                detail: e.to_string(),
                transcript: Vec::new(),
            });
            for name in &CHECK_NAMES[1..] {
                report.checks.push(CheckResult {
                    name,
                    passed: false,
                    detail: "skipped: no session".into(),
                    transcript: Vec::new(),
                });
            }
            return report;
        }
    };
    let h = session.handshake_info();
    report.checks.push(CheckResult {
        name: "handshake",
        passed: true,
        detail: format!(
            "v{} {} on {} ({}, {})",
            h.protocol_version, h.model_name, h.platform, h.precision, h.device.device_name
        ),
        transcript: transcript_since(&session, 0),
    });

    let mut checker = Checker {
        session: &session,
        timeout,
    };
    report
        .checks
        .push(checker.run("sequential_infer", Checker::sequential));
    report
        .checks
        .push(checker.run("out_of_order", Checker::out_of_order));
    report
        .checks
        .push(checker.run("error_response", Checker::error_response));

    let mark = session.transcript().len();
    let violations_before = session.violations().len();
    let shutdown = session.close();
    let status = shutdown
        .exit_status
        .map(|s| s.to_string())
        .unwrap_or_else(|| "no process".into());
    let (passed, detail) = if shutdown.peer_closed_early {
        (
            false,
            format!("runner closed the transport before shutdown ({status})"),
        )
    } else if shutdown.exit_status.is_some_and(|s| !s.success()) {
        (false, format!("runner did not exit cleanly ({status})"))
    } else if !shutdown.clean_eof {
        (
            false,
            "runner did not close its stream after shutdown".into(),
        )
    } else if session.violations().len() > violations_before {
        (false, session.violations()[violations_before..].join("; "))
    } else {
        (true, format!("clean exit ({status})"))
    };
    report.checks.push(CheckResult {
        name: "shutdown",
        passed,
        detail,
        transcript: transcript_since(&session, mark),
    });
    report
}

fn transcript_since(session: &RunnerSession, mark: usize) -> Vec<String> {
    session
        .transcript()
        .iter()
        .skip(mark)
        .map(ToString::to_string)
        .collect()
}

struct Checker<'a> {
    session: &'a RunnerSession,
    timeout: Duration,
}

impl Checker<'_> {
    fn run(
        &mut self,
        name: &'static str,
        check: fn(&mut Self) -> Result<String, String>,
    ) -> CheckResult {
        let mark = self.session.transcript().len();
        let violations_before = self.session.violations().len();
        let outcome = check(self);
        // give stray lines a moment to arrive so they are attributed here
        std::thread::sleep(Duration::from_millis(10));
        let new_violations: Vec<_> = self.session.violations()[violations_before..].to_vec();
        let (passed, detail) = match outcome {
            Ok(detail) if new_violations.is_empty() => (true, detail),
            Ok(_) => (false, new_violations.join("; ")),
            Err(e) if new_violations.is_empty() => (false, e),
            Err(e) => (false, format!("{e}; {}", new_violations.join("; "))),
        };
        CheckResult {
            name,
            passed,
            detail,
            transcript: transcript_since(self.session, mark),
        }
    }

    fn expected_items(&self, batch_size: u32, got: u64) -> bool {
        match self.session.handshake_info().item_kind {
            ItemKind::Token => got > 0,
            _ => got == u64::from(batch_size),
        }
    }

    fn sequential(&mut self) -> Result<String, String> {
        for (id, batch) in [(1u64, 1u32), (2, 8), (3, 100)] {
            let done = self
                .session
                .infer(&InferRequest::new(id, batch), self.timeout)
                .map_err(|e| format!("request {id}: {e}"))?;
            if !done.response.is_ok() {
                return Err(format!("request {id} returned {:?}", done.response.status));
            }
            if !self.expected_items(batch, done.response.items_processed) {
                return Err(format!(
                    "request {id}: items_processed {} for batch {batch}",
                    done.response.items_processed
                ));
            }
        }
        Ok("3 requests answered in turn".into())
    }

    fn out_of_order(&mut self) -> Result<String, String> {
        let ids: Vec<u64> = (10..18).collect();
        let pending = ids
            .iter()
            .map(|&id| self.session.send(&InferRequest::new(id, 1)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let mut arrivals = Vec::new();
        for p in pending {
            let id = p.id();
            let done = p
                .wait(self.timeout)
                .map_err(|e| format!("request {id}: {e}"))?;
            if done.response.id != id || !done.response.is_ok() {
                return Err(format!("request {id} got {:?}", done.response));
            }
            arrivals.push((done.end_ns, id));
        }
        arrivals.sort_unstable();
        let order: Vec<u64> = arrivals.into_iter().map(|(_, id)| id).collect();
        let reordered = order != ids;
        Ok(format!(
            "8 pipelined requests matched by id; arrival order {order:?}{}",
            if reordered { " (reordered)" } else { "" }
        ))
    }

    fn error_response(&mut self) -> Result<String, String> {
        let done = self
            .session
            .infer(&InferRequest::new(20, 0), self.timeout)
            .map_err(|e| format!("invalid request: {e}"))?;
        let ResponseStatus::Error(message) = done.response.status else {
            return Err("batch_size 0 was accepted; expected an error result".into());
        };
        let next = self
            .session
            .infer(&InferRequest::new(21, 1), self.timeout)
            .map_err(|e| format!("request after error: {e}"))?;
        if !next.response.is_ok() {
            return Err(format!(
                "request after error returned {:?}",
                next.response.status
            ));
        }
        Ok(format!("error result {message:?}, session still serving"))
    }
}
