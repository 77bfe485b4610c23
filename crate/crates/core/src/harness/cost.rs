//! Downstream update traffic model.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("update interval must be positive, got {0}")]
    Interval(f64),
    #[error("{0} must be a finite non-negative number")]
    Input(&'static str),
}

/// Bits per second needed to push one update of `update_size` bytes every
/// `update_interval` seconds to each of `subscriptions` subscribers.
pub fn traffic_estimate(subscriptions: f64, update_interval: f64, update_size: f64) -> Result<f64, CostError> {
    traffic_estimate_with_relays(subscriptions, update_interval, update_size, 1.0)
}

/// [`traffic_estimate`] with every update crossing `relay_hops` relays.
/// How many relay hops to charge for is a modelling choice; 1 charges
/// each subscriber once.
pub fn traffic_estimate_with_relays(
    subscriptions: f64,
    update_interval: f64,
    update_size: f64,
    relay_hops: f64,
) -> Result<f64, CostError> {
    for (v, name) in [
        (subscriptions, "subscriptions"),
        (update_size, "update size"),
        (relay_hops, "relay hops"),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CostError::Input(name));
        }
    }
    if !(update_interval.is_finite() && update_interval > 0.0) {
        return Err(CostError::Interval(update_interval));
    }
    Ok(subscriptions * update_size * 8.0 * relay_hops / update_interval)
}

/// Inputs of the large-scale dynamic DNS estimate: 100 million dynamic
/// names with 1000 subscribers each, updated twice a day with 300-byte
/// answers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DdnsParameters {
    pub names: f64,
    pub subscribers_per_name: f64,
    pub update_interval: f64,
    pub update_size: f64,
}

impl Default for DdnsParameters {
    fn default() -> Self {
        DdnsParameters {
            names: 100e6,
            subscribers_per_name: 1000.0,
            update_interval: 43_200.0,
            update_size: 300.0,
        }
    }
}

impl DdnsParameters {
    pub fn estimate(&self) -> Result<f64, CostError> {
        traffic_estimate(self.names * self.subscribers_per_name, self.update_interval, self.update_size)
    }
}
