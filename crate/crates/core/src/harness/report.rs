//! Metrics reports: a JSON summary plus CSV sample files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::scenario::Mode;
use super::workload::percentile;
use super::HarnessError;
use crate::transport::sim::LinkStat;

/// Time from an origin change to its first observation at one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StalenessSample {
    pub record: String,
    pub change: usize,
    pub node: String,
    pub changed_at_ms: u64,
    pub observed_at_ms: u64,
    pub staleness_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LookupSample {
    pub node: String,
    pub record: String,
    pub started_ms: u64,
    pub latency_ms: u64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubscriptionSample {
    pub time_ms: u64,
    pub node: String,
    pub upstream: usize,
    pub downstream: usize,
}

/// Nearest-rank summary of a set of samples, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Percentiles {
    pub samples: usize,
    /// Changes never observed before the end of the run.
    pub unobserved: usize,
    pub p50_ms: Option<u64>,
    pub p90_ms: Option<u64>,
    pub p99_ms: Option<u64>,
    pub max_ms: Option<u64>,
}

impl Percentiles {
    pub fn from_values(values: &[u64], unobserved: usize) -> Self {
        Percentiles {
            samples: values.len(),
            unobserved,
            p50_ms: percentile(values, 50.0),
            p90_ms: percentile(values, 90.0),
            p99_ms: percentile(values, 99.0),
            max_ms: values.iter().copied().max(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TierStaleness {
    pub node: String,
    pub role: &'static str,
    #[serde(flatten)]
    pub staleness: Percentiles,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    /// Upstream queries sent by resolvers: UDP queries, subscribes and
    /// fetches. Client queries are not counted.
    pub upstream_queries: u64,
    /// Objects sent on any link.
    pub update_objects: u64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub end_ms: u64,
    pub changes: usize,
    pub staleness: Percentiles,
    pub tiers: Vec<TierStaleness>,
    pub first_lookups: Vec<LookupSample>,
    pub totals: Totals,
    pub links: Vec<LinkStat>,
    #[serde(skip)]
    pub samples: Vec<StalenessSample>,
    #[serde(skip)]
    pub lookups: Vec<LookupSample>,
    #[serde(skip)]
    pub subscriptions: Vec<SubscriptionSample>,
}

impl MetricsReport {
    pub fn tier(&self, node: &str) -> Option<&TierStaleness> {
        self.tiers.iter().find(|t| t.node == node)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn staleness_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.samples)
    }

    pub fn lookups_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.lookups)
    }

    pub fn links_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.links)
    }

    pub fn subscriptions_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.subscriptions)
    }

    /// Every output file as `(file name, contents)`.
    pub fn files(&self) -> Result<Vec<(&'static str, String)>, HarnessError> {
        Ok(vec![
            ("report.json", self.to_json()),
            ("staleness.csv", self.staleness_csv()?),
            ("lookups.csv", self.lookups_csv()?),
            ("links.csv", self.links_csv()?),
            ("subscriptions.csv", self.subscriptions_csv()?),
        ])
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        for (name, contents) in self.files()? {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub staleness: Percentiles,
    pub upstream_queries: u64,
    pub update_objects: u64,
    pub bytes: u64,
}

impl ModeSummary {
    pub fn of(r: &MetricsReport) -> Self {
        ModeSummary {
            mode: r.mode,
            staleness: r.staleness.clone(),
            upstream_queries: r.totals.upstream_queries,
            update_objects: r.totals.update_objects,
            bytes: r.totals.bytes,
        }
    }
}

/// Both modes run on the same scenario and seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub pubsub: ModeSummary,
    pub baseline: ModeSummary,
    #[serde(skip)]
    pub pubsub_report: MetricsReport,
    #[serde(skip)]
    pub baseline_report: MetricsReport,
}

impl Comparison {
    /// Plain-text table, one row per mode.
    pub fn table(&self) -> String {
        let ms = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<13} {:>8} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9} {:>12}",
            "mode", "samples", "p50_ms", "p90_ms", "p99_ms", "max_ms", "queries", "objects", "bytes"
        );
        for m in [&self.pubsub, &self.baseline] {
            let _ = writeln!(
                out,
                "{:<13} {:>8} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9} {:>12}",
                m.mode.as_str(),
                m.staleness.samples,
                ms(m.staleness.p50_ms),
                ms(m.staleness.p90_ms),
                ms(m.staleness.p99_ms),
                ms(m.staleness.max_ms),
                m.upstream_queries,
                m.update_objects,
                m.bytes
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparisons serialize");
        s.push('\n');
        s
    }
}
