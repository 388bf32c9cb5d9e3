//! Request and response bodies.
//!
//! ```text
//! POST /retrieve          RetrieveRequest            -> RetrieveResponse
//! POST /retrieve/batch    [RetrieveRequest, ...]     -> [RetrieveResponse, ...]
//! GET  /health                                       -> Health
//! GET  /samples/{id}                                 -> SampleInfo
//! POST /admin/swap        [QaRow, ...]               -> SwapAck
//! ```

use kgenv_core::retrieval::{ActionCall, ErrorKind, FormatMode, Observation};
use serde::{Deserialize, Serialize};

/// Sample id that selects the service-wide graph instead of a per-sample one.
pub const SHARED_SAMPLE: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub sample_id: String,
    pub action_name: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_mode: Option<FormatMode>,
}

impl RetrieveRequest {
    pub fn new(sample_id: impl Into<String>, call: &ActionCall) -> Self {
        Self { sample_id: sample_id.into(), action_name: call.name.clone(), args: call.args.clone(), format_mode: None }
    }

    pub fn call(&self) -> ActionCall {
        ActionCall { name: self.action_name.clone(), args: self.args.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

/// Exactly one of `result_labels` and `error_code` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub status: Status,
    pub rendered_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omitted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
    /// Server-side handling time in microseconds.
    pub timing_us: u64,
}

impl RetrieveResponse {
    pub fn from_observation(obs: &Observation, timing_us: u64) -> Self {
        match obs {
            Observation::Ok { labels, omitted, text } => Self {
                status: Status::Ok,
                rendered_text: text.clone(),
                result_labels: Some(labels.clone()),
                omitted: Some(*omitted),
                error_code: None,
                error_kind: None,
                timing_us,
            },
            Observation::Error { kind, text } => Self {
                status: Status::Error,
                rendered_text: text.clone(),
                result_labels: None,
                omitted: None,
                error_code: Some(kind.code().to_owned()),
                error_kind: Some(*kind),
                timing_us,
            },
        }
    }

    /// A response for a body that could not be decoded.
    pub fn malformed(reason: &str) -> Self {
        Self {
            status: Status::Error,
            rendered_text: format!("Malformed request: {reason}"),
            result_labels: None,
            omitted: None,
            error_code: Some("KG_FORMAT_ERROR".to_owned()),
            error_kind: None,
            timing_us: 0,
        }
    }

    /// The observation this response carries, or `None` for a protocol-level
    /// error that has no catalogue entry.
    pub fn to_observation(&self) -> Option<Observation> {
        match self.status {
            Status::Ok => Some(Observation::Ok {
                labels: self.result_labels.clone()?,
                omitted: self.omitted.unwrap_or(0),
                text: self.rendered_text.clone(),
            }),
            Status::Error => Some(Observation::Error { kind: self.error_kind?, text: self.rendered_text.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub samples: usize,
    pub shared_graph: bool,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub uptime_s: u64,
    pub generation: u64,
}

/// Public view of a sample. Gold answers and gold paths are never included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub sample_id: String,
    pub anchor_entities: Vec<String>,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapAck {
    pub samples: usize,
    pub generation: u64,
}
