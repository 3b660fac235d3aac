//! Decides which scheduled benchmarks are due.
//!
//! The host calls [`Scheduler::tick`] at least once per minute with the
//! current instant. A benchmark fires at most once per matching minute; when
//! ticks were missed across several matching minutes it fires once on resume.

mod cron;

pub use cron::{parse_cron, CronError, CronExpression, CronField, FieldSet};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::{truncate_to_minute, Instant};
use crate::model::BenchmarkId;

/// What the scheduler needs to know about one benchmark.
#[derive(Debug, Clone)]
pub struct ScheduleEntry<'a> {
    pub id: &'a BenchmarkId,
    pub schedule: Option<&'a CronExpression>,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    /// Minute of the last trigger, or the first-seen instant for benchmarks
    /// that never fired.
    anchors: BTreeMap<BenchmarkId, Instant>,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `id` as fired at `at` (used when restoring state or in tests).
    pub fn record_fire(&mut self, id: &BenchmarkId, at: Instant) {
        self.anchors.insert(id.clone(), truncate_to_minute(at));
    }

    pub fn last_anchor(&self, id: &BenchmarkId) -> Option<Instant> {
        self.anchors.get(id).copied()
    }

    /// Benchmarks due at `now`, in id order. Inactive or unscheduled
    /// benchmarks are never returned.
    pub fn tick<'a, I>(&mut self, now: Instant, benchmarks: I) -> Vec<BenchmarkId>
    where
        I: IntoIterator<Item = ScheduleEntry<'a>>,
    {
        let mut due = Vec::new();
        for entry in benchmarks {
            let Some(schedule) = entry.schedule else {
                continue;
            };
            if !entry.active {
                continue;
            }
            let anchor = *self.anchors.entry(entry.id.clone()).or_insert(now);
            if schedule.next_fire(anchor) <= now {
                self.anchors.insert(entry.id.clone(), truncate_to_minute(now));
                due.push(entry.id.clone());
            }
        }
        due.sort();
        due
    }

    /// Earliest instant at which any tracked benchmark becomes due.
    pub fn next_due<'a, I>(&self, benchmarks: I) -> Option<Instant>
    where
        I: IntoIterator<Item = ScheduleEntry<'a>>,
    {
        benchmarks
            .into_iter()
            .filter(|e| e.active)
            .filter_map(|e| {
                let schedule = e.schedule?;
                let anchor = self.anchors.get(e.id)?;
                Some(schedule.next_fire(*anchor))
            })
            .min()
    }

    pub fn forget(&mut self, id: &BenchmarkId) {
        self.anchors.remove(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};

    fn at(h: u32, m: u32, s: u32) -> Instant {
        Utc.with_ymd_and_hms(2024, 1, 1, h, m, s).unwrap()
    }

    #[test]
    fn fires_when_next_slot_reached() {
        let id = BenchmarkId::from("b1");
        let cron = parse_cron("*/5 * * * *").unwrap();
        let mut s = Scheduler::new();
        s.record_fire(&id, at(12, 0, 0));
        let entries = || {
            [ScheduleEntry {
                id: &id,
                schedule: Some(&cron),
                active: true,
            }]
        };
        assert!(s.tick(at(12, 4, 59), entries()).is_empty());
        assert_eq!(s.tick(at(12, 5, 0), entries()), vec![id.clone()]);
        // same minute again
        assert!(s.tick(at(12, 5, 30), entries()).is_empty());
    }

    #[test]
    fn unscheduled_never_fires() {
        let id = BenchmarkId::from("manual");
        let mut s = Scheduler::new();
        for minute in 0..120 {
            let now = at(0, 0, 0) + Duration::minutes(minute);
            assert!(s
                .tick(
                    now,
                    [ScheduleEntry {
                        id: &id,
                        schedule: None,
                        active: true
                    }]
                )
                .is_empty());
        }
    }

    #[test]
    fn missed_window_fires_once() {
        let id = BenchmarkId::from("b");
        let cron = parse_cron("* * * * *").unwrap();
        let mut s = Scheduler::new();
        s.record_fire(&id, at(10, 0, 0));
        let e = || {
            [ScheduleEntry {
                id: &id,
                schedule: Some(&cron),
                active: true,
            }]
        };
        // down for 3 hours
        assert_eq!(s.tick(at(13, 0, 10), e()).len(), 1);
        assert!(s.tick(at(13, 0, 50), e()).is_empty());
        assert_eq!(s.tick(at(13, 1, 0), e()).len(), 1);
    }

    #[test]
    fn inactive_is_skipped() {
        let id = BenchmarkId::from("b");
        let cron = parse_cron("* * * * *").unwrap();
        let mut s = Scheduler::new();
        s.record_fire(&id, at(10, 0, 0));
        let fired = s.tick(
            at(11, 0, 0),
            [ScheduleEntry {
                id: &id,
                schedule: Some(&cron),
                active: false,
            }],
        );
        assert!(fired.is_empty());
    }
}
