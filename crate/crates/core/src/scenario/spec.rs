//! Scenario documents.
//!
//! ```toml
//! name = "example"
//! topology = "os-vit"          # bundled name, or a path relative to this file
//! seed = 1
//!
//! [[servers]]
//! kind = "instrument"          # or "share"
//! host = "microscope1"
//! store = "nion100"            # frames from scan_channel land here
//! config = { settle_time_s = 1.0 }
//!
//! [[steps]]
//! label = "idle"
//! actor = "eapm"
//! action = "invoke"
//! uri = "PYRO:swift_server@160.91.156.73:9090"
//! method = "scan_status"
//! expect = false
//! ```
//!
//! A step starts when the steps named in `after` have completed (by default
//! the step before it, unless `at` is given), plus `delay` seconds, and no
//! earlier than `at`. Steps whose start conditions overlap run concurrently.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::message::Value;
use crate::control::server::DEFAULT_CONTROL_PORT;
use crate::control::stem::DEFAULT_OBJECTID;
use crate::data::share::DEFAULT_SHARE_PORT;
use crate::netem::TopologyError;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("scenario schema error: {0}")]
    Schema(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("cannot start server: {0}")]
    Server(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerKind {
    Instrument,
    Share,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    pub kind: ServerKind,
    pub host: String,
    #[serde(default)]
    pub port: Option<u16>,
    #[serde(default)]
    pub objectid: Option<String>,
    /// Named store: written by an instrument, exported by a share.
    #[serde(default)]
    pub store: Option<String>,
    /// Instrument configuration table.
    #[serde(default)]
    pub config: Option<toml::Table>,
}

impl ServerSpec {
    pub fn port(&self) -> u16 {
        self.port.unwrap_or(match self.kind {
            ServerKind::Instrument => DEFAULT_CONTROL_PORT,
            ServerKind::Share => DEFAULT_SHARE_PORT,
        })
    }

    pub fn objectid(&self) -> &str {
        self.objectid.as_deref().unwrap_or(DEFAULT_OBJECTID)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    /// One remote call.
    Invoke,
    /// Repeated remote calls until the result matches `until`.
    Poll,
    /// Open a share connection (`endpoint`) under the name `mount`.
    Mount,
    /// List a mounted share.
    List,
    /// Fetch one record from a mounted share.
    Fetch,
    /// Pull `bytes` of opaque bulk data from `endpoint`.
    Bulk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BulkDirection {
    #[default]
    Download,
    Upload,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    #[serde(default)]
    pub label: String,
    pub actor: String,
    /// Source interface on the actor.
    #[serde(default)]
    pub via: Option<String>,
    pub action: ActionKind,
    /// Absolute start time, seconds.
    #[serde(default)]
    pub at: Option<f64>,
    #[serde(default)]
    pub after: Option<Vec<String>>,
    /// Seconds to wait once `after` is satisfied.
    #[serde(default)]
    pub delay: f64,
    #[serde(default)]
    pub uri: Option<String>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub args: Vec<Value>,
    /// Structural subset of the expected result.
    #[serde(default)]
    pub expect: Option<Value>,
    /// Error name the step must fail with (a remote code or kind, or a
    /// network outcome such as `ConnectionRefused`).
    #[serde(default)]
    pub expect_error: Option<String>,
    #[serde(default)]
    pub until: Option<Value>,
    #[serde(default = "default_interval")]
    pub interval: f64,
    #[serde(default = "default_max_polls")]
    pub max_polls: usize,
    /// Values a poll must observe, in this order.
    #[serde(default)]
    pub expect_seen: Option<Vec<Value>>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_mount")]
    pub mount: String,
    /// Record to fetch; the last listed record when absent.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub expect_count: Option<usize>,
    /// Compare fetched bytes with the serving store.
    #[serde(default = "yes")]
    pub verify: bool,
    #[serde(default)]
    pub bytes: u64,
    #[serde(default)]
    pub direction: BulkDirection,
    #[serde(default = "default_timeout")]
    pub timeout: f64,
}

fn default_interval() -> f64 {
    0.25
}
fn default_max_polls() -> usize {
    1000
}
fn default_mount() -> String {
    "share".into()
}
fn yes() -> bool {
    true
}
fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertKind {
    /// `step` was first served while `of` was in progress at the server.
    During,
    /// `step` was last served after `of`'s reply left the server.
    After,
    /// `step` was first served before `of` was.
    Before,
    /// `step`'s server-side duration equals `seconds` exactly (to the nanosecond).
    ServerElapsed,
    /// `step` completed within `seconds` of being issued.
    CompletedWithin,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssertSpec {
    pub kind: AssertKind,
    pub step: String,
    #[serde(default)]
    pub of: Option<String>,
    #[serde(default)]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub topology: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub servers: Vec<ServerSpec>,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub asserts: Vec<AssertSpec>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let mut s: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Schema(e.message().to_string()))?;
        s.normalize()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Fills default labels and dependencies and checks references.
    fn normalize(&mut self) -> Result<(), ScenarioError> {
        let mut labels = BTreeSet::new();
        for (i, step) in self.steps.iter_mut().enumerate() {
            if step.label.is_empty() {
                step.label = format!("step{}", i + 1);
            }
            if !labels.insert(step.label.clone()) {
                return Err(ScenarioError::Invalid(format!(
                    "duplicate step label {:?}",
                    step.label
                )));
            }
        }
        let all: Vec<String> = self.steps.iter().map(|s| s.label.clone()).collect();
        for (i, step) in self.steps.iter_mut().enumerate() {
            let bad = |m: String| ScenarioError::Invalid(format!("step {:?}: {m}", step.label));
            if step.after.is_none() {
                step.after = Some(if step.at.is_none() && i > 0 {
                    vec![all[i - 1].clone()]
                } else {
                    vec![]
                });
            }
            for dep in step.after.as_deref().unwrap_or_default() {
                let j = all.iter().position(|l| l == dep);
                if !j.is_some_and(|j| j < i) {
                    return Err(bad(format!(
                        "`after` must name an earlier step, not {dep:?}"
                    )));
                }
            }
            if !(step.delay.is_finite() && step.delay >= 0.0)
                || step.at.is_some_and(|t| !(t.is_finite() && t >= 0.0))
            {
                return Err(bad("times must be finite and non-negative".into()));
            }
            if !(step.interval.is_finite()
                && step.interval > 0.0
                && step.timeout.is_finite()
                && step.timeout > 0.0)
            {
                return Err(bad("interval and timeout must be positive".into()));
            }
            match step.action {
                ActionKind::Invoke | ActionKind::Poll => {
                    if step.uri.is_none() || step.method.is_none() {
                        return Err(bad("needs `uri` and `method`".into()));
                    }
                    if step.action == ActionKind::Poll && step.until.is_none() {
                        return Err(bad("poll needs `until`".into()));
                    }
                }
                ActionKind::Mount | ActionKind::Bulk => {
                    if step.endpoint.is_none() {
                        return Err(bad("needs `endpoint`".into()));
                    }
                }
                ActionKind::List | ActionKind::Fetch => {}
            }
        }
        for a in &self.asserts {
            for name in std::iter::once(&a.step).chain(a.of.iter()) {
                if !labels.contains(name) {
                    return Err(ScenarioError::Invalid(format!(
                        "assert names unknown step {name:?}"
                    )));
                }
            }
            let needs_of = matches!(
                a.kind,
                AssertKind::During | AssertKind::After | AssertKind::Before
            );
            if needs_of != a.of.is_some() || needs_of == a.seconds.is_some() {
                return Err(ScenarioError::Invalid(format!(
                    "assert {:?} on {:?} needs {}",
                    a.kind,
                    a.step,
                    if needs_of {
                        "`of` only"
                    } else {
                        "`seconds` only"
                    }
                )));
            }
        }
        Ok(())
    }
}

/// `expected` is a structural subset of `actual`: objects may have extra
/// keys, arrays must match element-wise, numbers compare by value.
pub fn value_matches(expected: &Value, actual: &Value) -> bool {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => e
            .iter()
            .all(|(k, ev)| a.get(k).is_some_and(|av| value_matches(ev, av))),
        (Value::Array(e), Value::Array(a)) => {
            e.len() == a.len() && e.iter().zip(a).all(|(ev, av)| value_matches(ev, av))
        }
        (Value::Number(e), Value::Number(a)) => e.as_f64() == a.as_f64(),
        _ => expected == actual,
    }
}
