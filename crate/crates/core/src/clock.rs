//! Injectable wall clock. All times are naive market-local timestamps.

use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, NaiveDateTime};

pub trait Clock: Send + Sync {
    fn now(&self) -> NaiveDateTime;

    /// Blocks (or, for simulated clocks, advances) until `t`. Returns immediately
    /// when `t` is already in the past.
    fn sleep_until(&self, t: NaiveDateTime);
}

/// Real time, interpreted as UTC.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        let since = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO);
        DateTime::from_timestamp(since.as_secs() as i64, since.subsec_nanos())
            .map(|t| t.naive_utc())
            .unwrap_or_default()
    }

    fn sleep_until(&self, t: NaiveDateTime) {
        let now = self.now();
        if let Ok(wait) = (t - now).to_std() {
            std::thread::sleep(wait);
        }
    }
}

/// Deterministic clock whose time only moves when somebody sleeps or advances it.
#[derive(Debug)]
pub struct SimulatedClock {
    now: Mutex<NaiveDateTime>,
}

impl SimulatedClock {
    pub fn new(start: NaiveDateTime) -> Self {
        SimulatedClock {
            now: Mutex::new(start),
        }
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += chrono::Duration::from_std(by).expect("duration in range");
    }

    pub fn set(&self, t: NaiveDateTime) {
        *self.now.lock().unwrap() = t;
    }
}

impl Clock for SimulatedClock {
    fn now(&self) -> NaiveDateTime {
        *self.now.lock().unwrap()
    }

    fn sleep_until(&self, t: NaiveDateTime) {
        let mut now = self.now.lock().unwrap();
        if t > *now {
            *now = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    #[test]
    fn simulated_clock_never_goes_back() {
        let t0 = NaiveDate::from_ymd_opt(2024, 1, 2)
            .unwrap()
            .and_hms_opt(9, 0, 0)
            .unwrap();
        let clock = SimulatedClock::new(t0);
        clock.sleep_until(t0 - chrono::Duration::seconds(5));
        assert_eq!(clock.now(), t0);
        clock.advance(Duration::from_secs(12));
        assert_eq!(clock.now(), t0 + chrono::Duration::seconds(12));
    }
}
