use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clock::Instant;
use crate::model::ExecutionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadlineKind {
    /// Benchmark timeout counted from creation.
    Run,
    /// Delay between entering a failure state and releasing resources.
    ReleaseGrace,
}

/// Armed deadlines ordered by (instant, execution id, kind).
#[derive(Debug, Clone, Default)]
pub struct TimeoutSupervisor {
    armed: BTreeSet<(Instant, ExecutionId, DeadlineKind)>,
    /// Grace deadlines put on hold by development mode.
    suspended: BTreeMap<ExecutionId, Instant>,
}

impl TimeoutSupervisor {
    pub fn arm(&mut self, id: &ExecutionId, kind: DeadlineKind, at: Instant) {
        self.armed.retain(|(_, i, k)| !(i == id && *k == kind));
        self.armed.insert((at, id.clone(), kind));
    }

    pub fn disarm(&mut self, id: &ExecutionId, kind: DeadlineKind) {
        self.armed.retain(|(_, i, k)| !(i == id && *k == kind));
        if kind == DeadlineKind::ReleaseGrace {
            self.suspended.remove(id);
        }
    }

    pub fn disarm_all(&mut self, id: &ExecutionId) {
        self.armed.retain(|(_, i, _)| i != id);
        self.suspended.remove(id);
    }

    /// Moves the grace deadline of `id` on hold.
    pub fn suspend_grace(&mut self, id: &ExecutionId) {
        let at = self
            .armed
            .iter()
            .find(|(_, i, k)| i == id && *k == DeadlineKind::ReleaseGrace)
            .map(|(t, _, _)| *t);
        if let Some(at) = at {
            self.disarm(id, DeadlineKind::ReleaseGrace);
            self.suspended.insert(id.clone(), at);
        }
    }

    pub fn suspend_grace_at(&mut self, id: &ExecutionId, at: Instant) {
        self.disarm(id, DeadlineKind::ReleaseGrace);
        self.suspended.insert(id.clone(), at);
    }

    /// Re-arms a suspended grace deadline, no earlier than `now`.
    pub fn resume_grace(&mut self, id: &ExecutionId, now: Instant) {
        if let Some(at) = self.suspended.remove(id) {
            self.arm(id, DeadlineKind::ReleaseGrace, at.max(now));
        }
    }

    /// Removes and returns every deadline due at `now`, in firing order.
    pub fn take_due(&mut self, now: Instant) -> Vec<(Instant, ExecutionId, DeadlineKind)> {
        let mut due = Vec::new();
        while let Some(first) = self.armed.first() {
            if first.0 > now {
                break;
            }
            due.push(self.armed.pop_first().expect("non-empty"));
        }
        due
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.armed.first().map(|(t, _, _)| *t)
    }

    /// Armed or suspended deadlines of one execution.
    pub fn deadlines_of(&self, id: &ExecutionId) -> Vec<(Instant, DeadlineKind, bool)> {
        let mut v: Vec<_> = self
            .armed
            .iter()
            .filter(|(_, i, _)| i == id)
            .map(|(t, _, k)| (*t, *k, false))
            .collect();
        if let Some(t) = self.suspended.get(id) {
            v.push((*t, DeadlineKind::ReleaseGrace, true));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};

    #[test]
    fn due_order_is_deadline_then_id() {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let mut s = TimeoutSupervisor::default();
        s.arm(&"b".into(), DeadlineKind::Run, t);
        s.arm(&"a".into(), DeadlineKind::Run, t);
        s.arm(&"c".into(), DeadlineKind::Run, t - Duration::seconds(1));
        s.arm(&"d".into(), DeadlineKind::Run, t + Duration::seconds(1));
        let ids: Vec<String> = s.take_due(t).into_iter().map(|x| x.1 .0).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(s.next_deadline(), Some(t + Duration::seconds(1)));
    }

    #[test]
    fn suspend_and_resume() {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let mut s = TimeoutSupervisor::default();
        let id = ExecutionId::from("x");
        s.arm(&id, DeadlineKind::ReleaseGrace, t);
        s.suspend_grace(&id);
        assert!(s.take_due(t + Duration::hours(1)).is_empty());
        assert_eq!(s.deadlines_of(&id).len(), 1);
        s.resume_grace(&id, t + Duration::hours(2));
        assert_eq!(s.next_deadline(), Some(t + Duration::hours(2)));
    }
}
