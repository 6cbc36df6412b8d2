//! Run reports.

use std::fmt::{self, Write as _};

use serde::Serialize;

use super::spec::{ActionKind, AssertKind};
use crate::control::message::Value;
use crate::time::SimTime;

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub label: String,
    pub actor: String,
    pub action: ActionKind,
    pub passed: bool,
    pub issued_at: Option<SimTime>,
    pub completed_at: Option<SimTime>,
    /// When the server first received a request from this step.
    pub served_first: Option<SimTime>,
    /// When the server last received a request from this step.
    pub served_last: Option<SimTime>,
    /// When the server sent its last reply for this step.
    pub replied_at: Option<SimTime>,
    /// Result value, with pixel payloads replaced by a digest.
    pub result: Option<Value>,
    pub error: Option<String>,
    /// Short name of the error, e.g. `ConnectionRefused` or `Busy`.
    pub error_kind: Option<String>,
    /// Values observed by a poll, consecutive repeats collapsed.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub observed: Vec<Value>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssertReport {
    pub index: usize,
    pub kind: AssertKind,
    pub step: String,
    pub of: Option<String>,
    pub passed: bool,
    pub message: String,
}

/// Error kinds that mean a server could not be reached at all.
pub const CONNECTIVITY_ERRORS: &[&str] = &[
    "ConnectionRefused",
    "Unroutable",
    "UnknownHost",
    "Timeout",
    "ConnectionClosed",
];

/// Why a run did not pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Failure {
    StepFailure {
        index: usize,
        label: String,
        message: String,
    },
    AssertFailure {
        index: usize,
        message: String,
    },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::StepFailure {
                index,
                label,
                message,
            } => {
                write!(f, "step {} ({label}) failed: {message}", index + 1)
            }
            Failure::AssertFailure { index, message } => {
                write!(f, "assert {} failed: {message}", index + 1)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub topology: String,
    pub seed: u64,
    pub passed: bool,
    pub virtual_time: SimTime,
    pub events: usize,
    pub log_fingerprint: String,
    pub steps: Vec<StepReport>,
    pub asserts: Vec<AssertReport>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub log: String,
}

fn opt(t: Option<SimTime>) -> String {
    t.map_or_else(|| "-".into(), |t| t.to_string())
}

impl ScenarioReport {
    /// True when some step failed because a server was unreachable, rather
    /// than because it answered wrongly.
    pub fn connectivity_failure(&self) -> bool {
        self.steps.iter().any(|s| {
            !s.passed
                && s.error_kind
                    .as_deref()
                    .is_some_and(|k| CONNECTIVITY_ERRORS.contains(&k))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_human(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {} on {} (seed {}): {}",
            self.scenario,
            self.topology,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for s in &self.steps {
            let _ = writeln!(
                out,
                "  [{}] {:>2} {:<22} {:<12} {:<7} issued {} served {} replied {} done {}",
                if s.passed { "ok" } else { "!!" },
                s.index + 1,
                s.label,
                s.actor,
                format!("{:?}", s.action).to_lowercase(),
                opt(s.issued_at),
                opt(s.served_first),
                opt(s.replied_at),
                opt(s.completed_at),
            );
            if !s.message.is_empty() {
                let _ = writeln!(out, "       {}", s.message);
            }
        }
        for a in &self.asserts {
            let _ = writeln!(
                out,
                "  [{}] assert {:?} {}{}: {}",
                if a.passed { "ok" } else { "!!" },
                a.kind,
                a.step,
                a.of.as_deref()
                    .map(|o| format!(" / {o}"))
                    .unwrap_or_default(),
                a.message
            );
        }
        let _ = writeln!(
            out,
            "  {} events, virtual time {}, log {}",
            self.events,
            self.virtual_time,
            &self.log_fingerprint[..16]
        );
        out
    }
}

/// Replaces every `pixels` array with `"<n values sha256:...>"`.
pub fn summarize(v: &Value) -> Value {
    match v {
        Value::Array(a) => Value::Array(a.iter().map(summarize).collect()),
        Value::Object(m) => Value::Object(
            m.iter()
                .map(|(k, v)| match (k.as_str(), v) {
                    ("pixels", Value::Array(px)) => {
                        let text = serde_json::to_string(px).unwrap_or_default();
                        let digest = crate::netem::log::payload_digest(text.as_bytes());
                        (
                            k.clone(),
                            Value::String(format!("<{} values {digest}>", px.len())),
                        )
                    }
                    _ => (k.clone(), summarize(v)),
                })
                .collect(),
        ),
        other => other.clone(),
    }
}
