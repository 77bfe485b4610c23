//! Bounded per-track record of published groups, used to answer standalone
//! and joining fetches.

use std::collections::VecDeque;

use bytes::Bytes;

/// Groups retained per track.
pub const DEFAULT_RETENTION: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackHistory {
    retain: usize,
    groups: VecDeque<(u64, Bytes)>,
    /// Highest group id dropped from the window.
    evicted_max: Option<u64>,
}

/// A range fetch reached into groups that are no longer retained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetentionMiss;

impl TrackHistory {
    pub fn new(retain: usize) -> Self {
        TrackHistory {
            retain: retain.max(1),
            groups: VecDeque::new(),
            evicted_max: None,
        }
    }

    pub fn latest(&self) -> Option<(u64, &Bytes)> {
        self.groups.back().map(|(g, p)| (*g, p))
    }

    pub fn latest_group(&self) -> Option<u64> {
        self.groups.back().map(|(g, _)| *g)
    }

    pub fn oldest_group(&self) -> Option<u64> {
        self.groups.front().map(|(g, _)| *g)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Appends a group. Returns false, leaving the history unchanged, if
    /// `group` does not exceed the latest one.
    pub fn push(&mut self, group: u64, payload: Bytes) -> bool {
        if self.latest_group().is_some_and(|g| g >= group) {
            return false;
        }
        self.groups.push_back((group, payload));
        while self.groups.len() > self.retain {
            if let Some((g, _)) = self.groups.pop_front() {
                self.evicted_max = Some(g);
            }
        }
        true
    }

    /// Retained groups in `[start, end]`, oldest first. Fails if any group
    /// at or above `start` may have been evicted.
    pub fn range(&self, start: u64, end: u64) -> Result<Vec<(u64, Bytes)>, RetentionMiss> {
        if self.evicted_max.is_some_and(|e| e >= start) {
            return Err(RetentionMiss);
        }
        Ok(self
            .groups
            .iter()
            .filter(|(g, _)| (start..=end).contains(g))
            .cloned()
            .collect())
    }

    /// The `offset` most recent groups, oldest first. Offset 1 is the
    /// latest group alone.
    pub fn joining(&self, offset: u64) -> Vec<(u64, Bytes)> {
        let n = usize::try_from(offset).unwrap_or(usize::MAX).min(self.groups.len());
        self.groups.iter().skip(self.groups.len() - n).cloned().collect()
    }

    /// Largest retained group not above `end`.
    pub fn latest_at_or_below(&self, end: u64) -> Option<u64> {
        self.groups.iter().rev().map(|(g, _)| *g).find(|g| *g <= end)
    }
}

impl Default for TrackHistory {
    fn default() -> Self {
        TrackHistory::new(DEFAULT_RETENTION)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: u64) -> Bytes {
        Bytes::from(n.to_string())
    }

    #[test]
    fn window_and_eviction() {
        let mut h = TrackHistory::new(3);
        for g in [2, 5, 6, 9] {
            assert!(h.push(g, p(g)));
        }
        assert!(!h.push(9, p(9)));
        assert!(!h.push(4, p(4)));
        assert_eq!(h.oldest_group(), Some(5));
        assert_eq!(h.range(6, 9).unwrap().len(), 2);
        // 3 and 4 were never published, so the range is complete.
        assert_eq!(h.range(3, 9).unwrap().len(), 3);
        assert_eq!(h.range(2, 9), Err(RetentionMiss));
        assert_eq!(h.range(10, 12).unwrap(), vec![]);
        assert_eq!(h.joining(1), vec![(9, p(9))]);
        assert_eq!(h.joining(2), vec![(6, p(6)), (9, p(9))]);
        assert_eq!(h.joining(99).len(), 3);
        assert_eq!(h.latest_at_or_below(8), Some(6));
        assert_eq!(h.latest_at_or_below(4), None);
    }
}
