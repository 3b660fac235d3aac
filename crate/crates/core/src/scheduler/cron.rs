//! Classic five-field cron expressions, evaluated in UTC.
//!
//! Grammar per field: a comma separated list of `*`, `N`, `A-B`, each
//! optionally followed by `/STEP` (`N/STEP` means `N-MAX/STEP`). Day of week
//! is `0-6` with `0` = Sunday. When both day-of-month and day-of-week are
//! restricted (their text does not start with `*`) a day matches if either
//! matches, as in Vixie cron.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clock::{truncate_to_minute, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CronField {
    Minute,
    Hour,
    DayOfMonth,
    Month,
    DayOfWeek,
}

impl CronField {
    const ORDER: [CronField; 5] = [
        Self::Minute,
        Self::Hour,
        Self::DayOfMonth,
        Self::Month,
        Self::DayOfWeek,
    ];

    pub fn bounds(self) -> (u32, u32) {
        match self {
            Self::Minute => (0, 59),
            Self::Hour => (0, 23),
            Self::DayOfMonth => (1, 31),
            Self::Month => (1, 12),
            Self::DayOfWeek => (0, 6),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Minute => "minute",
            Self::Hour => "hour",
            Self::DayOfMonth => "day_of_month",
            Self::Month => "month",
            Self::DayOfWeek => "day_of_week",
        }
    }
}

impl fmt::Display for CronField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CronError {
    #[error("syntax error at position {position}: {message}")]
    SyntaxError { position: usize, message: String },
    #[error("{field} value {value} out of range {min}-{max} (position {position})")]
    FieldOutOfRange {
        field: CronField,
        value: u32,
        min: u32,
        max: u32,
        position: usize,
    },
    #[error("expression `{0}` never matches any instant")]
    UnsatisfiableExpression(String),
}

/// Set of allowed values for one field, as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSet {
    bits: u64,
    /// Field text started with `*`.
    star: bool,
}

impl FieldSet {
    pub fn contains(&self, v: u32) -> bool {
        v < 64 && self.bits & (1u64 << v) != 0
    }

    pub fn values(&self) -> impl Iterator<Item = u32> + '_ {
        (0..64u32).filter(move |v| self.contains(*v))
    }

    pub fn is_star(&self) -> bool {
        self.star
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CronExpression {
    source: String,
    pub minute: FieldSet,
    pub hour: FieldSet,
    pub day_of_month: FieldSet,
    pub month: FieldSet,
    pub day_of_week: FieldSet,
}

pub fn parse_cron(expr: &str) -> Result<CronExpression, CronError> {
    let mut fields = Vec::with_capacity(5);
    let bytes = expr.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push((start, &expr[start..i]));
    }
    if fields.len() != 5 {
        return Err(CronError::SyntaxError {
            position: expr.len().min(fields.get(5).map_or(expr.len(), |f| f.0)),
            message: format!("expected 5 fields, found {}", fields.len()),
        });
    }

    let mut sets = [FieldSet {
        bits: 0,
        star: false,
    }; 5];
    for (k, field) in CronField::ORDER.iter().enumerate() {
        let (pos, text) = fields[k];
        sets[k] = parse_field(*field, text, pos)?;
    }
    let cron = CronExpression {
        source: fields.iter().map(|f| f.1).collect::<Vec<_>>().join(" "),
        minute: sets[0],
        hour: sets[1],
        day_of_month: sets[2],
        month: sets[3],
        day_of_week: sets[4],
    };
    if !cron.is_satisfiable() {
        return Err(CronError::UnsatisfiableExpression(cron.source.clone()));
    }
    Ok(cron)
}

fn parse_field(field: CronField, text: &str, offset: usize) -> Result<FieldSet, CronError> {
    let (min, max) = field.bounds();
    let mut bits = 0u64;
    let mut item_start = 0;
    for item in text.split(',') {
        let pos = offset + item_start;
        item_start += item.len() + 1;
        if item.is_empty() {
            return Err(syntax(pos, format!("empty list item in {field}")));
        }
        let (range_part, step) = match item.split_once('/') {
            Some((r, s)) => {
                let step_pos = pos + r.len() + 1;
                let step = parse_number(s, step_pos)?;
                if step == 0 {
                    return Err(syntax(step_pos, "step must be positive".into()));
                }
                (r, Some(step))
            }
            None => (item, None),
        };
        let (lo, hi) = if range_part == "*" {
            (min, max)
        } else if let Some((a, b)) = range_part.split_once('-') {
            let lo = parse_number(a, pos)?;
            let hi_pos = pos + a.len() + 1;
            let hi = parse_number(b, hi_pos)?;
            check_range(field, lo, pos)?;
            check_range(field, hi, hi_pos)?;
            if lo > hi {
                return Err(syntax(pos, format!("descending range {lo}-{hi}")));
            }
            (lo, hi)
        } else {
            let v = parse_number(range_part, pos)?;
            check_range(field, v, pos)?;
            match step {
                Some(_) => (v, max),
                None => (v, v),
            }
        };
        let step = step.unwrap_or(1);
        let mut v = lo;
        while v <= hi {
            bits |= 1u64 << v;
            v += step;
        }
    }
    Ok(FieldSet {
        bits,
        star: text.starts_with('*'),
    })
}

fn parse_number(s: &str, position: usize) -> Result<u32, CronError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(syntax(position, format!("expected a number, found `{s}`")));
    }
    s.parse::<u32>()
        .map_err(|_| syntax(position, format!("number `{s}` too large")))
}

fn check_range(field: CronField, value: u32, position: usize) -> Result<(), CronError> {
    let (min, max) = field.bounds();
    if value < min || value > max {
        return Err(CronError::FieldOutOfRange {
            field,
            value,
            min,
            max,
            position,
        });
    }
    Ok(())
}

fn syntax(position: usize, message: String) -> CronError {
    CronError::SyntaxError { position, message }
}

fn days_in_month(year: i32, month: u32) -> u32 {
    let (ny, nm) = if month == 12 {
        (year + 1, 1)
    } else {
        (year, month + 1)
    };
    NaiveDate::from_ymd_opt(ny, nm, 1)
        .expect("valid date")
        .pred_opt()
        .expect("valid date")
        .day()
}

impl CronExpression {
    pub fn as_str(&self) -> &str {
        &self.source
    }

    fn is_satisfiable(&self) -> bool {
        // Every other field is non-empty by construction; only a day-of-month
        // list that no selected month can hold is impossible.
        if !self.day_of_week.is_star() && !self.day_of_month.is_star() {
            return true;
        }
        if !self.day_of_month.is_star() {
            // Leap day counts: February has 29 days in some year of any 4-year window.
            const MAX_DAYS: [u32; 13] = [0, 31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
            return self
                .month
                .values()
                .any(|m| self.day_of_month.values().any(|d| d <= MAX_DAYS[m as usize]));
        }
        true
    }

    fn day_matches(&self, date: NaiveDate) -> bool {
        let dom = self.day_of_month.contains(date.day());
        let dow = self
            .day_of_week
            .contains(date.weekday().num_days_from_sunday());
        match (self.day_of_month.is_star(), self.day_of_week.is_star()) {
            (false, false) => dom || dow,
            _ => dom && dow,
        }
    }

    pub fn matches(&self, t: Instant) -> bool {
        let n = t.naive_utc();
        self.month.contains(n.month())
            && self.day_matches(n.date())
            && self.hour.contains(n.hour())
            && self.minute.contains(n.minute())
    }

    /// Smallest whole minute strictly after `after` that matches.
    pub fn next_fire(&self, after: Instant) -> Instant {
        let start = truncate_to_minute(after) + Duration::minutes(1);
        let mut t: NaiveDateTime = start.naive_utc();
        // Month jumps bound the loop: a satisfiable expression matches within
        // 4 years (48 month steps) plus the day/hour/minute refinements.
        for _ in 0..100_000 {
            if !self.month.contains(t.month()) {
                let (y, m) = if t.month() == 12 {
                    (t.year() + 1, 1)
                } else {
                    (t.year(), t.month() + 1)
                };
                t = NaiveDate::from_ymd_opt(y, m, 1)
                    .expect("valid date")
                    .and_time(NaiveTime::MIN);
                continue;
            }
            if !self.day_matches(t.date()) {
                t = t.date().succ_opt().expect("date overflow").and_time(NaiveTime::MIN);
                continue;
            }
            if !self.hour.contains(t.hour()) {
                t = t.date().and_hms_opt(t.hour(), 0, 0).expect("valid time") + Duration::hours(1);
                continue;
            }
            if !self.minute.contains(t.minute()) {
                t += Duration::minutes(1);
                continue;
            }
            return t.and_utc();
        }
        unreachable!("satisfiable cron expression `{}` did not match", self.source)
    }

    /// Exposed for callers that want calendar information alongside the expression.
    pub fn days_in_month(year: i32, month: u32) -> u32 {
        days_in_month(year, month)
    }
}

impl fmt::Display for CronExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl FromStr for CronExpression {
    type Err = CronError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_cron(s)
    }
}

impl Serialize for CronExpression {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for CronExpression {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_cron(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> Instant {
        Utc.with_ymd_and_hms(y, mo, d, h, mi, 0).unwrap()
    }

    #[test]
    fn every_five_minutes() {
        let c = parse_cron("*/5 * * * *").unwrap();
        assert_eq!(c.minute.values().collect::<Vec<_>>(), (0..60).step_by(5).collect::<Vec<_>>());
        assert_eq!(c.hour.values().count(), 24);
    }

    #[test]
    fn hour_out_of_range() {
        match parse_cron("0 61 * * *") {
            Err(CronError::FieldOutOfRange { field, value, position, .. }) => {
                assert_eq!(field, CronField::Hour);
                assert_eq!(value, 61);
                assert_eq!(position, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        assert!(matches!(
            parse_cron("* * * *"),
            Err(CronError::SyntaxError { .. })
        ));
        assert!(matches!(
            parse_cron("1,,2 * * * *"),
            Err(CronError::SyntaxError { position: 2, .. })
        ));
        assert!(matches!(
            parse_cron("* x * * *"),
            Err(CronError::SyntaxError { position: 2, .. })
        ));
        assert!(matches!(
            parse_cron("*/0 * * * *"),
            Err(CronError::SyntaxError { position: 2, .. })
        ));
        assert!(matches!(
            parse_cron("* * * * 7"),
            Err(CronError::FieldOutOfRange { field: CronField::DayOfWeek, .. })
        ));
    }

    #[test]
    fn unsatisfiable_day_month_combination() {
        assert!(matches!(
            parse_cron("0 0 30 2 *"),
            Err(CronError::UnsatisfiableExpression(_))
        ));
        assert!(matches!(
            parse_cron("0 0 31 4,6,9,11 *"),
            Err(CronError::UnsatisfiableExpression(_))
        ));
        // Day-of-week restriction makes it an OR, which is satisfiable.
        assert!(parse_cron("0 0 30 2 1").is_ok());
        assert!(parse_cron("0 0 29 2 *").is_ok());
    }

    #[test]
    fn next_fire_daily_midnight() {
        let c = parse_cron("0 0 * * *").unwrap();
        assert_eq!(c.next_fire(at(2024, 1, 1, 10, 17)), at(2024, 1, 2, 0, 0));
    }

    #[test]
    fn next_fire_every_five() {
        let c = parse_cron("*/5 * * * *").unwrap();
        assert_eq!(c.next_fire(at(2024, 1, 1, 12, 3)), at(2024, 1, 1, 12, 5));
        // strictly after
        assert_eq!(c.next_fire(at(2024, 1, 1, 12, 5)), at(2024, 1, 1, 12, 10));
    }

    #[test]
    fn next_fire_skips_short_february() {
        let c = parse_cron("0 12 31 * *").unwrap();
        assert_eq!(c.next_fire(at(2024, 2, 1, 0, 0)), at(2024, 3, 31, 12, 0));
    }

    #[test]
    fn dom_dow_or_semantics() {
        // 13th of the month or any Friday
        let c = parse_cron("0 0 13 * 5").unwrap();
        // 2024-01-05 is a Friday
        assert_eq!(c.next_fire(at(2024, 1, 1, 0, 0)), at(2024, 1, 5, 0, 0));
        assert_eq!(c.next_fire(at(2024, 1, 12, 0, 0)), at(2024, 1, 13, 0, 0));
        // star-prefixed dom means AND with dow
        let c = parse_cron("0 0 */2 * 5").unwrap();
        assert!(c.matches(at(2024, 1, 5, 0, 0)));
        assert!(!c.matches(at(2024, 1, 12, 0, 0)));
    }

    #[test]
    fn serde_as_string() {
        let c = parse_cron("15 2 * * 1").unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"15 2 * * 1\"");
        let back: CronExpression = serde_json::from_str("\"15 2 * * 1\"").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn days_in_month_handles_leap_years() {
        assert_eq!(CronExpression::days_in_month(2024, 2), 29);
        assert_eq!(CronExpression::days_in_month(2023, 2), 28);
        assert_eq!(CronExpression::days_in_month(2023, 12), 31);
    }
}
