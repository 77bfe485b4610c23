//! Record change workloads derived from TTL clusters.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// TTL values (seconds) most records cluster around.
pub const TTL_CLUSTERS: [u32; 6] = [20, 60, 300, 600, 1200, 3600];

/// Change counts are taken over this many TTL periods.
pub const OBSERVATION_PERIODS: u32 = 300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("{0} s is not a TTL cluster (expected one of 20, 60, 300, 600, 1200, 3600)")]
    UnknownCluster(u32),
    #[error("invalid change profile: {0}")]
    Profile(&'static str),
}

/// How often records in one cluster change.
///
/// A share of the records is dynamic; the rest never change. Dynamic
/// records change at exponentially distributed intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeProfile {
    pub periods: u32,
    /// Fraction of records that change at all.
    pub dynamic_share: f64,
    /// Mean changes over `periods` TTL intervals for a dynamic record.
    pub mean_changes: f64,
}

impl ChangeProfile {
    pub fn for_cluster(ttl_cluster: u32) -> Result<Self, WorkloadError> {
        match ttl_cluster {
            20 | 60 | 300 => Ok(ChangeProfile {
                periods: OBSERVATION_PERIODS,
                dynamic_share: 0.5,
                mean_changes: 150.0,
            }),
            600 | 1200 | 3600 => Ok(ChangeProfile {
                periods: OBSERVATION_PERIODS,
                dynamic_share: 0.05,
                mean_changes: 10.0,
            }),
            other => Err(WorkloadError::UnknownCluster(other)),
        }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        if self.periods == 0 {
            return Err(WorkloadError::Profile("periods must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dynamic_share) {
            return Err(WorkloadError::Profile("dynamic_share must be within [0, 1]"));
        }
        if !(self.mean_changes.is_finite() && self.mean_changes >= 0.0) {
            return Err(WorkloadError::Profile("mean_changes must be non-negative"));
        }
        Ok(())
    }
}

/// Change times per record, relative to the start of the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Workload {
    pub ttl: u32,
    pub horizon: Duration,
    pub records: Vec<Vec<Duration>>,
}

impl Workload {
    pub fn change_counts(&self) -> Vec<usize> {
        self.records.iter().map(Vec::len).collect()
    }
}

/// Draws change schedules for `records` records of one TTL cluster over
/// `profile.periods` TTL intervals.
///
/// Dynamic records are assigned by stratified position, so the share is
/// exact up to rounding regardless of `records`.
pub fn workload_from_clusters<R: Rng + ?Sized>(
    ttl_cluster: u32,
    profile: &ChangeProfile,
    records: usize,
    rng: &mut R,
) -> Result<Workload, WorkloadError> {
    if !TTL_CLUSTERS.contains(&ttl_cluster) {
        return Err(WorkloadError::UnknownCluster(ttl_cluster));
    }
    profile.validate()?;
    let horizon = Duration::from_secs(u64::from(ttl_cluster) * u64::from(profile.periods));
    let mut order: Vec<usize> = (0..records).collect();
    order.shuffle(rng);
    let mut out = vec![Vec::new(); records];
    let rate = profile.mean_changes / horizon.as_secs_f64();
    for (pos, &r) in order.iter().enumerate() {
        let quantile = (pos as f64 + 0.5) / records as f64;
        if quantile < 1.0 - profile.dynamic_share || rate <= 0.0 {
            continue;
        }
        let exp = Exp::new(rate).map_err(|_| WorkloadError::Profile("change rate out of range"))?;
        let mut t = 0.0;
        loop {
            t += exp.sample(rng);
            if t >= horizon.as_secs_f64() {
                break;
            }
            out[r].push(Duration::from_millis((t * 1000.0) as u64));
        }
    }
    Ok(Workload {
        ttl: ttl_cluster,
        horizon,
        records: out,
    })
}

/// Nearest-rank percentile of unsorted values.
pub(crate) fn percentile<T: Copy + Ord>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p90(ttl: u32, n: usize, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = workload_from_clusters(ttl, &ChangeProfile::for_cluster(ttl).unwrap(), n, &mut rng).unwrap();
        percentile(&w.change_counts(), 90.0).unwrap()
    }

    #[test]
    fn high_change_clusters_reach_71_at_p90() {
        for ttl in [20, 60, 300] {
            for n in [1, 2, 7, 10, 100, 1000] {
                assert!(p90(ttl, n, n as u64) >= 71, "ttl {ttl} n {n}");
            }
        }
    }

    #[test]
    fn low_change_clusters_are_static_at_p90() {
        for ttl in [600, 1200, 3600] {
            for n in 1..=200 {
                assert_eq!(p90(ttl, n, 7), 0, "ttl {ttl} n {n}");
            }
        }
    }

    #[test]
    fn unknown_cluster_is_rejected() {
        assert_eq!(ChangeProfile::for_cluster(45), Err(WorkloadError::UnknownCluster(45)));
        let profile = ChangeProfile::for_cluster(300).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(workload_from_clusters(45, &profile, 3, &mut rng).is_err());
    }

    #[test]
    fn changes_fall_inside_the_horizon_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = workload_from_clusters(60, &ChangeProfile::for_cluster(60).unwrap(), 20, &mut rng).unwrap();
        for r in &w.records {
            assert!(r.windows(2).all(|p| p[0] <= p[1]));
            assert!(r.iter().all(|t| *t < w.horizon));
        }
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 99.0), Some(99));
        assert_eq!(percentile(&[5u64], 99.0), Some(5));
        assert_eq!(percentile::<u64>(&[], 50.0), None);
    }
}
