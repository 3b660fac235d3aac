//! Injectable time source shared by the scheduler, orchestrator and drivers.

use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, DurationRound, Utc};

pub type Instant = DateTime<Utc>;

pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

/// Wall clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Utc::now()
    }
}

/// Manually advanced clock. Cloning shares the underlying instant.
#[derive(Debug, Clone)]
pub struct SimClock {
    current: Arc<Mutex<Instant>>,
}

impl SimClock {
    pub fn new(start: Instant) -> Self {
        Self {
            current: Arc::new(Mutex::new(start)),
        }
    }

    /// Starts at 2024-01-01T00:00:00Z.
    pub fn at_epoch() -> Self {
        Self::new(
            DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
                .expect("literal")
                .with_timezone(&Utc),
        )
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.current.lock().expect("clock poisoned");
        *now += by;
    }

    /// Moves the clock forward to `to`; never moves it backwards.
    pub fn advance_to(&self, to: Instant) {
        let mut now = self.current.lock().expect("clock poisoned");
        if to > *now {
            *now = to;
        }
    }

    pub fn set(&self, to: Instant) {
        *self.current.lock().expect("clock poisoned") = to;
    }
}

impl Clock for SimClock {
    fn now(&self) -> Instant {
        *self.current.lock().expect("clock poisoned")
    }
}

/// Simulated time that runs `scale` times faster than the wall clock and
/// can additionally be pushed forward by hand.
#[derive(Debug)]
pub struct ScaledClock {
    start_wall: std::time::Instant,
    start: Instant,
    scale: f64,
    skipped: Mutex<Duration>,
}

impl ScaledClock {
    pub fn new(start: Instant, scale: f64) -> Self {
        Self {
            start_wall: std::time::Instant::now(),
            start,
            scale,
            skipped: Mutex::new(Duration::zero()),
        }
    }

    pub fn skip(&self, by: Duration) {
        *self.skipped.lock().expect("clock poisoned") += by;
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Instant {
        let elapsed = self.start_wall.elapsed().as_secs_f64() * self.scale;
        let skipped = *self.skipped.lock().expect("clock poisoned");
        self.start + Duration::microseconds((elapsed * 1e6) as i64) + skipped
    }
}

pub fn truncate_to_minute(t: Instant) -> Instant {
    t.duration_trunc(Duration::minutes(1)).expect("minute truncation")
}

/// Rounds up to the next whole second (identity on whole seconds).
pub fn ceil_to_second(t: Instant) -> Instant {
    let floor = t.duration_trunc(Duration::seconds(1)).expect("second truncation");
    if floor == t {
        t
    } else {
        floor + Duration::seconds(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_is_shared_between_clones() {
        let a = SimClock::at_epoch();
        let b = a.clone();
        a.advance(Duration::seconds(3));
        assert_eq!(b.now(), SimClock::at_epoch().now() + Duration::seconds(3));
    }

    #[test]
    fn advance_to_never_goes_back() {
        let c = SimClock::at_epoch();
        let start = c.now();
        c.advance_to(start - Duration::hours(1));
        assert_eq!(c.now(), start);
    }

    #[test]
    fn ceil_rounds_partial_seconds_up() {
        let c = SimClock::at_epoch().now();
        assert_eq!(ceil_to_second(c), c);
        assert_eq!(
            ceil_to_second(c + Duration::milliseconds(1)),
            c + Duration::seconds(1)
        );
    }
}
