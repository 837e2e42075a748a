//! Harness side of the runner wire protocol.
//!
//! Runners are external processes (or TCP peers) that exchange
//! newline-delimited JSON, one message per line. The runner speaks first
//! with a `hello` handshake; the harness acknowledges, then issues `infer`
//! requests that are answered by `result` messages matched on `id`.

mod conformance;
mod session;
pub mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::ThroughputUnit;

pub use conformance::{check_conformance, check_conformance_with, CheckResult, ConformanceReport};
pub use session::{
    Completed, PendingResponse, RunnerSession, SessionError, SessionOptions, SessionState,
    ShutdownReport, TranscriptLine, Transport,
};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Precision {
    FP32,
    FP16,
    INT8,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::FP32 => "FP32",
            Precision::FP16 => "FP16",
            Precision::INT8 => "INT8",
        })
    }
}

/// What one unit of work is, as declared by the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Sample,
    Token,
    Request,
}

impl ItemKind {
    pub fn throughput_unit(self) -> ThroughputUnit {
        match self {
            ItemKind::Sample => ThroughputUnit::SamplesPerSecond,
            ItemKind::Token => ThroughputUnit::TokensPerSecond,
            ItemKind::Request => ThroughputUnit::RequestsPerSecond,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Interconnect {
    NVLink,
    PCIe,
    #[serde(rename = "other")]
    Other,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemoryType {
    HBM,
    GDDR,
    DDR,
    #[serde(rename = "other")]
    Other,
}

/// Hardware context needed to interpret a measurement. Every field is
/// required on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceAnnotations {
    pub device_name: String,
    pub interconnect: Interconnect,
    pub memory_type: MemoryType,
    pub power_management: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetadata {
    pub metric_name: String,
    pub value: f64,
}

/// The runner's `hello`. Two sessions with equal handshakes produce
/// report rows with identical labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub model_name: String,
    pub platform: String,
    pub precision: Precision,
    pub item_kind: ItemKind,
    pub device: DeviceAnnotations,
    #[serde(rename = "accuracy", default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<AccuracyMetadata>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferRequest {
    pub id: u64,
    pub batch_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_length: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_ref: Option<String>,
}

impl InferRequest {
    pub fn new(id: u64, batch_size: u32) -> Self {
        Self {
            id,
            batch_size,
            sequence_length: None,
            payload_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireStatus {
    Ok,
    Error,
}

/// `result` message as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub id: u64,
    pub status: WireStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items_processed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_start_ns: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_end_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Handshake),
    HelloAck { protocol_version: u32 },
    Infer(InferRequest),
    Result(ResultMessage),
    Shutdown,
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("protocol messages always serialize");
        line.push('\n');
        line
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseStatus {
    Ok,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferResponse {
    pub id: u64,
    pub status: ResponseStatus,
    pub items_processed: u64,
    /// Runner-side timestamps, informational only.
    pub runner_start_ns: Option<u64>,
    pub runner_end_ns: Option<u64>,
}

impl InferResponse {
    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }
}

impl From<ResultMessage> for InferResponse {
    fn from(m: ResultMessage) -> Self {
        let status = match m.status {
            WireStatus::Ok => ResponseStatus::Ok,
            WireStatus::Error => ResponseStatus::Error(m.message.unwrap_or_default()),
        };
        Self {
            id: m.id,
            status,
            items_processed: m.items_processed.unwrap_or(0),
            runner_start_ns: m.runner_start_ns,
            runner_end_ns: m.runner_end_ns,
        }
    }
}

impl From<&InferResponse> for ResultMessage {
    fn from(r: &InferResponse) -> Self {
        match &r.status {
            ResponseStatus::Ok => ResultMessage {
                id: r.id,
                status: WireStatus::Ok,
                items_processed: Some(r.items_processed),
                message: None,
                runner_start_ns: r.runner_start_ns,
                runner_end_ns: r.runner_end_ns,
            },
            ResponseStatus::Error(message) => ResultMessage {
                id: r.id,
                status: WireStatus::Error,
                items_processed: None,
                message: Some(message.clone()),
                runner_start_ns: r.runner_start_ns,
                runner_end_ns: r.runner_end_ns,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handshake() -> Handshake {
        Handshake {
            protocol_version: 1,
            model_name: "resnet18".into(),
            platform: "PyTorch".into(),
            precision: Precision::FP16,
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

    #[test]
    fn wire_format_is_exact() {
        assert_eq!(
            Message::Hello(handshake()).to_line(),
            "{\"type\":\"hello\",\"protocol_version\":1,\"model_name\":\"resnet18\",\"platform\":\"PyTorch\",\"precision\":\"FP16\",\"item_kind\":\"sample\",\"device\":{\"device_name\":\"RTX 3090\",\"interconnect\":\"PCIe\",\"memory_type\":\"GDDR\",\"power_management\":\"default\"}}\n"
        );
        assert_eq!(
            Message::HelloAck {
                protocol_version: 1
            }
            .to_line(),
            "{\"type\":\"hello_ack\",\"protocol_version\":1}\n"
        );
        assert_eq!(
            Message::Infer(InferRequest::new(1, 100)).to_line(),
            "{\"type\":\"infer\",\"id\":1,\"batch_size\":100}\n"
        );
        let ok = InferResponse {
            id: 1,
            status: ResponseStatus::Ok,
            items_processed: 100,
            runner_start_ns: Some(5),
            runner_end_ns: Some(9),
        };
        assert_eq!(
            Message::Result((&ok).into()).to_line(),
            "{\"type\":\"result\",\"id\":1,\"status\":\"ok\",\"items_processed\":100,\"runner_start_ns\":5,\"runner_end_ns\":9}\n"
        );
        let err = InferResponse {
            id: 1,
            status: ResponseStatus::Error("oom".into()),
            items_processed: 0,
            runner_start_ns: None,
            runner_end_ns: None,
        };
        assert_eq!(
            Message::Result((&err).into()).to_line(),
            "{\"type\":\"result\",\"id\":1,\"status\":\"error\",\"message\":\"oom\"}\n"
        );
        assert_eq!(Message::Shutdown.to_line(), "{\"type\":\"shutdown\"}\n");
    }

    #[test]
    fn parses_optional_fields() {
        let m: Message = serde_json::from_str(
            r#"{"type":"hello","protocol_version":1,"model_name":"opt-125m","platform":"vLLM","precision":"INT8","item_kind":"token","device":{"device_name":"cpu","interconnect":"none","memory_type":"DDR","power_management":""},"accuracy":{"metric_name":"ppl","value":27.6}}"#,
        )
        .unwrap();
        let Message::Hello(h) = m else { panic!() };
        assert_eq!(
            h.item_kind.throughput_unit(),
            ThroughputUnit::TokensPerSecond
        );
        assert_eq!(h.device.interconnect, Interconnect::None);
        assert_eq!(h.accuracy.unwrap().value, 27.6);

        let bad = serde_json::from_str::<Message>(
            r#"{"type":"hello","protocol_version":1,"model_name":"m","platform":"p","precision":"BF16","item_kind":"sample","device":{"device_name":"d","interconnect":"PCIe","memory_type":"HBM","power_management":""}}"#,
        );
        assert!(bad.is_err());
        // device annotations are all mandatory
        assert!(serde_json::from_str::<DeviceAnnotations>(
            r#"{"device_name":"d","interconnect":"PCIe","memory_type":"HBM"}"#
        )
        .is_err());
    }
}
