//! Simulation harness: scenarios, workloads, metrics and the traffic
//! cost model.
//!
//! [`run_scenario`] builds the topology of a [`Scenario`] on a
//! [`SimNetwork`](crate::transport::sim::SimNetwork), applies the record
//! changes of its workload at the authoritative servers and reports how
//! long each resolver tier took to observe each change. Runs are a pure
//! function of the scenario, so equal seeds give byte-identical reports.

mod clients;
mod cost;
mod report;
mod run;
mod scenario;
mod workload;

use thiserror::Error;

pub use clients::{Received, StubClient, StubResponse, Subscriber};
pub use cost::{traffic_estimate, traffic_estimate_with_relays, CostError, DdnsParameters};
pub use report::{
    Comparison, LookupSample, MetricsReport, ModeSummary, Percentiles, StalenessSample, SubscriptionSample,
    TierStaleness, Totals,
};
pub use run::{compare_modes, run_scenario};
pub use scenario::{
    ChangeSpec, LinkConfig, Mode, NodeConfig, QuerySchedule, RecordWorkload, RoleConfig, Scenario, ScenarioError,
    SimSettings, WorkloadConfig,
};
pub use workload::{workload_from_clusters, ChangeProfile, Workload, WorkloadError, OBSERVATION_PERIODS, TTL_CLUSTERS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
}
