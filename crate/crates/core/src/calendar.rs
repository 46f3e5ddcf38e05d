//! Local-time helpers: half-open intervals, day boundaries, time-of-day ranges.

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, TimeZone, Timelike, Weekday};
use serde::{Deserialize, Serialize};

/// Half-open interval `[from, to)` of unix seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub from: i64,
    pub to: i64,
}

impl Interval {
    pub fn new(from: i64, to: i64) -> Self {
        Self { from, to }
    }

    pub fn contains(&self, t: i64) -> bool {
        self.from <= t && t < self.to
    }

    pub fn is_empty(&self) -> bool {
        self.to <= self.from
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let i = Interval::new(self.from.max(other.from), self.to.min(other.to));
        (!i.is_empty()).then_some(i)
    }
}

/// True when `intervals` are non-empty, sorted and pairwise disjoint.
pub fn is_sorted_disjoint(intervals: &[Interval]) -> bool {
    intervals.iter().all(|i| !i.is_empty()) && intervals.windows(2).all(|w| w[0].to <= w[1].from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Morning,
    Afternoon,
    Evening,
    Night,
    Any,
}

impl TimeOfDay {
    pub const NAMED: [TimeOfDay; 4] = [
        TimeOfDay::Morning,
        TimeOfDay::Afternoon,
        TimeOfDay::Evening,
        TimeOfDay::Night,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TimeOfDay::Morning => "morning",
            TimeOfDay::Afternoon => "afternoon",
            TimeOfDay::Evening => "evening",
            TimeOfDay::Night => "night",
            TimeOfDay::Any => "any",
        }
    }

    pub fn parse(s: &str) -> Option<TimeOfDay> {
        match s.trim().to_lowercase().as_str() {
            "morning" => Some(TimeOfDay::Morning),
            "afternoon" => Some(TimeOfDay::Afternoon),
            "evening" => Some(TimeOfDay::Evening),
            "night" => Some(TimeOfDay::Night),
            "any" => Some(TimeOfDay::Any),
            _ => None,
        }
    }
}

/// Hour ranges `[start, end)` for each named part of the day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeOfDayTable {
    pub morning: (u32, u32),
    pub afternoon: (u32, u32),
    pub evening: (u32, u32),
    pub night: (u32, u32),
}

impl Default for TimeOfDayTable {
    fn default() -> Self {
        Self {
            morning: (6, 12),
            afternoon: (12, 18),
            evening: (18, 24),
            night: (0, 6),
        }
    }
}

impl TimeOfDayTable {
    pub fn hours(&self, tod: TimeOfDay) -> (u32, u32) {
        match tod {
            TimeOfDay::Morning => self.morning,
            TimeOfDay::Afternoon => self.afternoon,
            TimeOfDay::Evening => self.evening,
            TimeOfDay::Night => self.night,
            TimeOfDay::Any => (0, 24),
        }
    }
}

/// Converts between unix seconds and local calendar dates at a fixed UTC offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Calendar {
    pub utc_offset_seconds: i32,
    pub time_of_day: TimeOfDayTable,
}

impl Calendar {
    fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_seconds).unwrap_or_else(|| FixedOffset::east_opt(0).unwrap())
    }

    pub fn local(&self, t: i64) -> DateTime<FixedOffset> {
        self.offset()
            .timestamp_opt(t, 0)
            .single()
            .expect("timestamp within chrono range")
    }

    pub fn date(&self, t: i64) -> NaiveDate {
        self.local(t).date_naive()
    }

    pub fn weekday(&self, t: i64) -> Weekday {
        self.local(t).weekday()
    }

    /// Unix seconds of local midnight starting `date`.
    pub fn day_start(&self, date: NaiveDate) -> i64 {
        date.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp() - self.utc_offset_seconds as i64
    }

    pub fn day_interval(&self, date: NaiveDate) -> Interval {
        let start = self.day_start(date);
        Interval::new(start, start + 86_400)
    }

    /// The part of `date` covered by `tod`.
    pub fn time_of_day_interval(&self, date: NaiveDate, tod: TimeOfDay) -> Interval {
        let (h0, h1) = self.time_of_day.hours(tod);
        let start = self.day_start(date);
        Interval::new(start + h0 as i64 * 3600, start + h1 as i64 * 3600)
    }

    /// Local `HH:MM` of a timestamp.
    pub fn hhmm(&self, t: i64) -> String {
        let l = self.local(t);
        format!("{:02}:{:02}", l.hour(), l.minute())
    }
}

pub fn weekday_name(day: Weekday) -> &'static str {
    match day {
        Weekday::Mon => "Monday",
        Weekday::Tue => "Tuesday",
        Weekday::Wed => "Wednesday",
        Weekday::Thu => "Thursday",
        Weekday::Fri => "Friday",
        Weekday::Sat => "Saturday",
        Weekday::Sun => "Sunday",
    }
}

pub fn parse_weekday(s: &str) -> Option<Weekday> {
    match s.trim().to_lowercase().as_str() {
        "monday" => Some(Weekday::Mon),
        "tuesday" => Some(Weekday::Tue),
        "wednesday" => Some(Weekday::Wed),
        "thursday" => Some(Weekday::Thu),
        "friday" => Some(Weekday::Fri),
        "saturday" => Some(Weekday::Sat),
        "sunday" => Some(Weekday::Sun),
        _ => None,
    }
}

pub const WEEKDAYS: [Weekday; 7] = [
    Weekday::Mon,
    Weekday::Tue,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
    Weekday::Sun,
];
