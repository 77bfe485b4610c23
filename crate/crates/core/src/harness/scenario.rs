//! Scenario files.
//!
//! ```json
//! {
//!   "name": "chain",
//!   "seed": 1,
//!   "mode": "pubsub",
//!   "duration_secs": 6000,
//!   "nodes": [
//!     {"name": "auth", "role": "authoritative", "zone": {"origin": "example.", "records": []}},
//!     {"name": "rec", "role": "recursive", "root_hints": ["auth"]},
//!     {"name": "fwd", "role": "forwarder", "upstream": "rec"},
//!     {"name": "client", "role": "client", "target": "fwd"}
//!   ],
//!   "links": [{"a": "client", "b": "fwd", "delay_ms": 0}],
//!   "workload": {
//!     "records": [{"server": "auth", "name": "www.example.", "ttl": 300, "changes": {"count": 20}}],
//!     "queries": [{"client": "client", "start_secs": 1, "interval_secs": 10}]
//!   }
//! }
//! ```

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authoritative::{load_zone, ZoneDocument, ZoneError};
use crate::dns::{DnsError, Name, RecordType};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node {node}: {what} refers to unknown node {target:?}")]
    UnknownNode { node: String, what: &'static str, target: String },
    #[error("node {node}: {what} must be a {expected} node")]
    WrongRole { node: String, what: &'static str, expected: &'static str },
    #[error("duplicate node name {0:?}")]
    DuplicateName(String),
    #[error("duplicate address {0}")]
    DuplicateAddress(IpAddr),
    #[error("link {0} - {1}: {2}")]
    Link(String, String, &'static str),
    #[error("node {0}: zone: {1}")]
    Zone(String, ZoneError),
    #[error("record {0}: {1}")]
    Record(String, String),
    #[error("record {0}: {1}")]
    Name(String, DnsError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Subscriptions end to end.
    #[default]
    #[serde(rename = "pubsub")]
    PubSub,
    /// Classic UDP with TTL caching at every tier.
    #[serde(rename = "baseline-udp")]
    BaselineUdp,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PubSub => "pubsub",
            Mode::BaselineUdp => "baseline-udp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Changes and queries are scheduled within this span.
    pub duration_secs: f64,
    /// Extra run time after `duration_secs` with no new changes or
    /// queries, so late observations are still measured.
    #[serde(default)]
    pub settle_secs: f64,
    /// Interval at which subscription counts are sampled.
    #[serde(default = "default_sample_secs")]
    pub sample_secs: f64,
    #[serde(default)]
    pub sim: SimSettings,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub workload: WorkloadConfig,
}

fn default_sample_secs() -> f64 {
    60.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub handshake_rtts: u32,
    pub session_setup_rtts: u32,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            handshake_rtts: 1,
            session_setup_rtts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub name: String,
    /// Defaults to 10.0.0.<index + 1>.
    #[serde(default)]
    pub ip: Option<IpAddr>,
    #[serde(flatten)]
    pub role: RoleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum RoleConfig {
    Authoritative {
        zone: ZoneDocument,
        #[serde(default = "yes")]
        moqt: bool,
        #[serde(default = "yes")]
        udp: bool,
        #[serde(default = "yes")]
        accept_subscriptions: bool,
    },
    Recursive {
        root_hints: Vec<String>,
        #[serde(default)]
        poll_fallback: bool,
        #[serde(default)]
        max_subscriptions: Option<usize>,
        #[serde(default)]
        idle_secs: Option<f64>,
    },
    Forwarder {
        upstream: String,
        #[serde(default)]
        idle_secs: Option<f64>,
    },
    /// UDP stub that queries `target` on the workload's query schedule.
    Client { target: String },
    /// MoQT subscriber to every workload record served behind `target`.
    Subscriber {
        target: String,
        #[serde(default)]
        start_secs: f64,
    },
}

fn yes() -> bool {
    true
}

impl RoleConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            RoleConfig::Authoritative { .. } => "authoritative",
            RoleConfig::Recursive { .. } => "recursive",
            RoleConfig::Forwarder { .. } => "forwarder",
            RoleConfig::Client { .. } => "client",
            RoleConfig::Subscriber { .. } => "subscriber",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub delay_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    #[serde(default)]
    pub records: Vec<RecordWorkload>,
    #[serde(default)]
    pub queries: Vec<QuerySchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordWorkload {
    /// Authoritative node whose zone holds the record.
    pub server: String,
    pub name: String,
    #[serde(rename = "type", default = "default_type")]
    pub rtype: String,
    pub ttl: u32,
    #[serde(default)]
    pub changes: ChangeSpec,
}

fn default_type() -> String {
    "A".to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeSpec {
    #[default]
    None,
    /// Explicit change times.
    AtSecs(Vec<f64>),
    /// `n` changes spread evenly, the i-th at `(i + 0.5) * duration / n`.
    Count(usize),
    /// Changes every `interval_secs`, starting at `start_secs`.
    Every { start_secs: f64, interval_secs: f64 },
    /// Exponential changes drawn from the profile of a TTL cluster.
    Cluster(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySchedule {
    pub client: String,
    /// Record names to query; empty means every workload record.
    #[serde(default)]
    pub records: Vec<String>,
    #[serde(default)]
    pub start_secs: f64,
    pub interval_secs: f64,
}

pub(crate) fn secs(s: f64) -> Duration {
    Duration::from_millis((s * 1000.0).round().max(0.0) as u64)
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Scenario {
            mode,
            ..self.clone()
        }
    }

    pub fn node(&self, name: &str) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn ip_of(&self, idx: usize) -> IpAddr {
        self.nodes[idx]
            .ip
            .unwrap_or(IpAddr::V4(Ipv4Addr::from(0x0A00_0001u32 + idx as u32)))
    }

    /// Checks every cross reference and value range.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("{what} must be positive")))
            }
        };
        positive(self.duration_secs, "duration_secs")?;
        positive(self.sample_secs, "sample_secs")?;
        if !(self.settle_secs.is_finite() && self.settle_secs >= 0.0) {
            return Err(ScenarioError::Invalid("settle_secs must be non-negative".into()));
        }
        let mut names = BTreeSet::new();
        let mut ips = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !names.insert(n.name.as_str()) {
                return Err(ScenarioError::DuplicateName(n.name.clone()));
            }
            if !ips.insert(self.ip_of(i)) {
                return Err(ScenarioError::DuplicateAddress(self.ip_of(i)));
            }
        }
        let expect = |node: &str, what: &'static str, target: &str, roles: &[&'static str], expected: &'static str| {
            let t = self.node(target).ok_or_else(|| ScenarioError::UnknownNode {
                node: node.to_string(),
                what,
                target: target.to_string(),
            })?;
            if roles.contains(&t.role.kind()) {
                Ok(())
            } else {
                Err(ScenarioError::WrongRole {
                    node: node.to_string(),
                    what,
                    expected,
                })
            }
        };
        for n in &self.nodes {
            match &n.role {
                RoleConfig::Authoritative { zone, .. } => {
                    load_zone(zone).map_err(|e| ScenarioError::Zone(n.name.clone(), e))?;
                }
                RoleConfig::Recursive { root_hints, .. } => {
                    if root_hints.is_empty() {
                        return Err(ScenarioError::Invalid(format!("node {}: no root hints", n.name)));
                    }
                    for h in root_hints {
                        expect(&n.name, "root hint", h, &["authoritative"], "authoritative")?;
                    }
                }
                RoleConfig::Forwarder { upstream, .. } => {
                    expect(&n.name, "upstream", upstream, &["recursive"], "recursive")?;
                }
                RoleConfig::Client { target } => {
                    expect(&n.name, "target", target, &["forwarder", "recursive", "authoritative"], "server")?;
                }
                RoleConfig::Subscriber { target, .. } => {
                    expect(&n.name, "target", target, &["recursive", "authoritative"], "MoQT server")?;
                }
            }
        }
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if self.node(end).is_none() {
                    return Err(ScenarioError::UnknownNode {
                        node: format!("{}-{}", l.a, l.b),
                        what: "link",
                        target: end.clone(),
                    });
                }
            }
            if l.a == l.b {
                return Err(ScenarioError::Link(l.a.clone(), l.b.clone(), "loops are not allowed"));
            }
            if !(l.delay_ms.is_finite() && l.delay_ms >= 0.0) {
                return Err(ScenarioError::Link(l.a.clone(), l.b.clone(), "delay must be non-negative"));
            }
        }
        for r in &self.workload.records {
            expect(&r.name, "server", &r.server, &["authoritative"], "authoritative")?;
            Name::parse(&r.name).map_err(|e| ScenarioError::Name(r.name.clone(), e))?;
            let t = RecordType::parse(&r.rtype).map_err(|e| ScenarioError::Name(r.name.clone(), e))?;
            if !matches!(t, RecordType::A | RecordType::Aaaa | RecordType::Txt) {
                return Err(ScenarioError::Record(
                    r.name.clone(),
                    "only A, AAAA and TXT records can carry changes".into(),
                ));
            }
            match &r.changes {
                ChangeSpec::AtSecs(v) if v.iter().any(|t| !(t.is_finite() && *t >= 0.0)) => {
                    return Err(ScenarioError::Record(r.name.clone(), "change times must be non-negative".into()));
                }
                ChangeSpec::Every { interval_secs, .. } if !(interval_secs.is_finite() && *interval_secs > 0.0) => {
                    return Err(ScenarioError::Record(r.name.clone(), "interval must be positive".into()));
                }
                ChangeSpec::Cluster(c) => {
                    crate::harness::ChangeProfile::for_cluster(*c)
                        .map_err(|e| ScenarioError::Record(r.name.clone(), e.to_string()))?;
                }
                _ => {}
            }
        }
        for q in &self.workload.queries {
            expect(&q.client, "query schedule", &q.client, &["client"], "client")?;
            positive(q.interval_secs, "interval_secs")?;
            for name in &q.records {
                if !self.workload.records.iter().any(|r| &r.name == name) {
                    return Err(ScenarioError::Record(name.clone(), "queried but not in the workload".into()));
                }
            }
        }
        Ok(())
    }
}
