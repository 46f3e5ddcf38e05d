//! The six query functions, time-scope resolution, and context rendering.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{weekday_name, Calendar, Interval, TimeOfDay};
use crate::encoders::{encode_label, Parameters};
use crate::store::{match_windows, EmbeddingStore, LabelTarget, Scorer, StoreError};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("context phrase not covered by the label encoder: {0}")]
    UnknownContext(String),
    #[error("scope refers to result #{0}, which produced no timestamp")]
    UnresolvedScope(usize),
    #[error("invalid query spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryFunction {
    CalculateDuration,
    DetectActivity,
    CountingFrequency,
    CountingDays,
    DetectFirstTime,
    DetectLastTime,
}

impl QueryFunction {
    pub const ALL: [QueryFunction; 6] = [
        QueryFunction::CalculateDuration,
        QueryFunction::DetectActivity,
        QueryFunction::CountingFrequency,
        QueryFunction::CountingDays,
        QueryFunction::DetectFirstTime,
        QueryFunction::DetectLastTime,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            QueryFunction::CalculateDuration => "CalculateDuration",
            QueryFunction::DetectActivity => "DetectActivity",
            QueryFunction::CountingFrequency => "CountingFrequency",
            QueryFunction::CountingDays => "CountingDays",
            QueryFunction::DetectFirstTime => "DetectFirstTime",
            QueryFunction::DetectLastTime => "DetectLastTime",
        }
    }

    pub fn parse(s: &str) -> Option<QueryFunction> {
        QueryFunction::ALL.into_iter().find(|f| f.name() == s.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeSpan {
    Today,
    Yesterday,
    LastWeek,
    AllTime,
}

mod weekday_serde {
    use chrono::Weekday;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Weekday, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::calendar::weekday_name(*d).to_lowercase())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Weekday, D::Error> {
        let s = String::deserialize(d)?;
        crate::calendar::parse_weekday(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown weekday {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScopeKind {
    AbsoluteRange {
        from: i64,
        to: i64,
    },
    NamedDay {
        #[serde(with = "weekday_serde")]
        weekday: Weekday,
    },
    RelativeSpan {
        span: RelativeSpan,
    },
    /// The rest of the day after the timestamp produced by spec `result_ref`.
    AfterResult {
        result_ref: usize,
    },
    /// The part of the day before the timestamp produced by spec `result_ref`.
    BeforeResult {
        result_ref: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeScope {
    #[serde(flatten)]
    pub kind: ScopeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_of_day: Option<TimeOfDay>,
}

impl TimeScope {
    pub fn new(kind: ScopeKind) -> Self {
        Self { kind, time_of_day: None }
    }

    pub fn span(span: RelativeSpan) -> Self {
        Self::new(ScopeKind::RelativeSpan { span })
    }

    pub fn with_time_of_day(mut self, tod: Option<TimeOfDay>) -> Self {
        self.time_of_day = tod.filter(|t| *t != TimeOfDay::Any);
        self
    }

    /// Phrase used inside rendered contexts, e.g. "last week in the morning".
    pub fn phrase(&self, calendar: &Calendar) -> String {
        let base = match self.kind {
            ScopeKind::AbsoluteRange { from, to } => {
                let fmt = |t: i64| calendar.local(t).format("%Y-%m-%d %H:%M").to_string();
                format!("between {} and {}", fmt(from), fmt(to))
            }
            ScopeKind::NamedDay { weekday } => format!("on {}", weekday_name(weekday)),
            ScopeKind::RelativeSpan { span } => match span {
                RelativeSpan::Today => "today".into(),
                RelativeSpan::Yesterday => "yesterday".into(),
                RelativeSpan::LastWeek => "last week".into(),
                RelativeSpan::AllTime => "overall".into(),
            },
            ScopeKind::AfterResult { .. } => "afterwards".into(),
            ScopeKind::BeforeResult { .. } => "before that".into(),
        };
        match self.time_of_day {
            Some(tod) => format!("{base} {}", tod_phrase(tod)),
            None => base,
        }
    }
}

fn tod_phrase(tod: TimeOfDay) -> &'static str {
    match tod {
        TimeOfDay::Morning => "in the morning",
        TimeOfDay::Afternoon => "in the afternoon",
        TimeOfDay::Evening => "in the evening",
        TimeOfDay::Night => "at night",
        TimeOfDay::Any => "",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub function: QueryFunction,
    pub contexts: Vec<String>,
    pub scope: TimeScope,
    #[serde(default)]
    pub per_day: bool,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.contexts.is_empty() && self.function != QueryFunction::DetectActivity {
            return Err(QueryError::InvalidSpec(format!(
                "{} needs at least one context",
                self.function.name()
            )));
        }
        if let ScopeKind::AbsoluteRange { from, to } = self.scope.kind {
            if to <= from {
                return Err(QueryError::InvalidSpec("absolute range must have from < to".into()));
            }
        }
        Ok(())
    }
}

/// One local day of a resolved scope and the searchable intervals within it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeDay {
    pub date: NaiveDate,
    pub intervals: Vec<Interval>,
}

/// Resolve a scope into per-day intervals, clipped to times before `now`.
///
/// `anchors[i]` is the timestamp produced by spec `i`, if any; `bounds` is the
/// first and last record time, used by the all-time span.
pub fn resolve_days(
    scope: &TimeScope,
    now: i64,
    calendar: &Calendar,
    bounds: Option<(i64, i64)>,
    anchors: &[Option<i64>],
) -> Result<Vec<ScopeDay>, QueryError> {
    let today = calendar.date(now);
    let mut base: Vec<(NaiveDate, Interval)> = Vec::new();
    let whole = |d: NaiveDate| (d, calendar.day_interval(d));
    match scope.kind {
        ScopeKind::AbsoluteRange { from, to } => {
            if to > from {
                let mut d = calendar.date(from);
                let last = calendar.date(to - 1);
                while d <= last {
                    if let Some(i) = calendar.day_interval(d).intersect(&Interval::new(from, to)) {
                        base.push((d, i));
                    }
                    d += Duration::days(1);
                }
            }
        }
        ScopeKind::NamedDay { weekday } => {
            let back = (today.weekday().num_days_from_monday() + 7 - weekday.num_days_from_monday()) % 7;
            base.push(whole(today - Duration::days(back as i64)));
        }
        ScopeKind::RelativeSpan { span } => match span {
            RelativeSpan::Today => base.push(whole(today)),
            RelativeSpan::Yesterday => base.push(whole(today - Duration::days(1))),
            RelativeSpan::LastWeek => {
                let monday = today - Duration::days(today.weekday().num_days_from_monday() as i64 + 7);
                base.extend((0..7).map(|i| whole(monday + Duration::days(i))));
            }
            RelativeSpan::AllTime => {
                if let Some((first, last)) = bounds {
                    let mut d = calendar.date(first);
                    let end = calendar.date(last).min(today);
                    while d <= end {
                        base.push(whole(d));
                        d += Duration::days(1);
                    }
                }
            }
        },
        ScopeKind::AfterResult { result_ref } | ScopeKind::BeforeResult { result_ref } => {
            let t = anchors
                .get(result_ref)
                .copied()
                .flatten()
                .ok_or(QueryError::UnresolvedScope(result_ref))?;
            let d = calendar.date(t);
            let day = calendar.day_interval(d);
            let i = if matches!(scope.kind, ScopeKind::AfterResult { .. }) {
                Interval::new(t + 1, day.to)
            } else {
                Interval::new(day.from, t)
            };
            base.push((d, i));
        }
    }
    let before_now = Interval::new(i64::MIN, now);
    Ok(base
        .into_iter()
        .filter_map(|(date, i)| {
            let mut i = i.intersect(&before_now)?;
            if let Some(tod) = scope.time_of_day {
                i = i.intersect(&calendar.time_of_day_interval(date, tod))?;
            }
            Some(ScopeDay {
                date,
                intervals: vec![i],
            })
        })
        .collect())
}

/// Flattened, sorted and disjoint intervals of a scope.
pub fn resolve_scope(
    scope: &TimeScope,
    now: i64,
    calendar: &Calendar,
    bounds: Option<(i64, i64)>,
    anchors: &[Option<i64>],
) -> Result<Vec<Interval>, QueryError> {
    Ok(resolve_days(scope, now, calendar, bounds, anchors)?
        .into_iter()
        .flat_map(|d| d.intervals)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMinutes {
    pub label: String,
    pub minutes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextValues {
    Duration {
        context: String,
        minutes: u64,
    },
    Activity {
        labels: Vec<LabelMinutes>,
    },
    Frequency {
        context: String,
        count: u64,
    },
    Days {
        context: String,
        days: u64,
        total_days: u64,
    },
    Time {
        context: String,
        timestamp: Option<i64>,
        /// Local `HH:MM` of `timestamp`.
        clock: Option<String>,
    },
}

/// A rendered query result; `text` is always `render(function, scope, values)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorContext {
    pub text: String,
    pub function: QueryFunction,
    pub scope: String,
    pub day: Option<NaiveDate>,
    pub values: ContextValues,
}

impl SensorContext {
    pub fn new(function: QueryFunction, scope: String, day: Option<NaiveDate>, values: ContextValues) -> Self {
        let text = render(function, &scope, &values);
        Self {
            text,
            function,
            scope,
            day,
            values,
        }
    }

    pub fn minutes(&self) -> Option<u64> {
        match &self.values {
            ContextValues::Duration { minutes, .. } => Some(*minutes),
            _ => None,
        }
    }
}

fn plural(n: u64, one: &str, many: &str) -> String {
    format!("{n} {}", if n == 1 { one } else { many })
}

/// "M minutes", or "H hours and M minutes" from one hour up.
pub fn format_minutes(total: u64) -> String {
    let (h, m) = (total / 60, total % 60);
    let mins = plural(m, "minute", "minutes");
    if h == 0 {
        mins
    } else {
        format!("{} and {mins}", plural(h, "hour", "hours"))
    }
}

fn sentence(parts: &[&str]) -> String {
    let body = parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join(" ");
    format!("{body}.")
}

pub fn render(function: QueryFunction, scope: &str, values: &ContextValues) -> String {
    match values {
        ContextValues::Duration { context, minutes } => {
            let amount = if *minutes == 0 {
                "no recorded time".to_string()
            } else {
                format_minutes(*minutes)
            };
            sentence(&["You spent", &amount, context, scope])
        }
        ContextValues::Activity { labels } => {
            if labels.is_empty() {
                sentence(&["No confident activity detected", scope])
            } else {
                let list = labels
                    .iter()
                    .map(|l| format!("{} for {}", l.label, format_minutes(l.minutes)))
                    .collect::<Vec<_>>()
                    .join(", ");
                let head = if scope.is_empty() {
                    "Detected activities:".to_string()
                } else {
                    format!("Detected activities {scope}:")
                };
                sentence(&[&head, &list])
            }
        }
        ContextValues::Frequency { context, count } => {
            sentence(&["You", context, &plural(*count, "time", "times"), scope])
        }
        ContextValues::Days {
            context,
            days,
            total_days,
        } => {
            let last = if *total_days == 1 {
                "the last day".to_string()
            } else {
                format!("the last {total_days} days")
            };
            sentence(&["You were", context, "on", &days.to_string(), "of", &last])
        }
        ContextValues::Time { context, clock, .. } => {
            let which = if function == QueryFunction::DetectFirstTime {
                "first"
            } else {
                "last"
            };
            match clock {
                Some(c) => sentence(&["You", which, context, "around", c, scope]),
                None => sentence(&[context, "was not detected", scope]),
            }
        }
    }
}

/// Contexts produced by one spec, plus the timestamp later specs may refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub spec: QuerySpec,
    pub contexts: Vec<SensorContext>,
    pub anchor: Option<i64>,
}

/// Everything needed to run queries against one store.
pub struct QueryEngine<'a> {
    pub store: &'a EmbeddingStore,
    pub scorer: &'a dyn Scorer,
    /// Vocabulary phrase embeddings, in vocabulary order.
    pub targets: &'a [LabelTarget],
    /// Encodes context phrases outside the vocabulary; without it such
    /// phrases are rejected.
    pub encoder: Option<&'a Parameters>,
    pub calendar: Calendar,
    pub threshold: f64,
    pub top_k: usize,
    pub gap_minutes: i64,
}

impl<'a> QueryEngine<'a> {
    pub fn new(store: &'a EmbeddingStore, scorer: &'a dyn Scorer, targets: &'a [LabelTarget]) -> Self {
        Self {
            store,
            scorer,
            targets,
            encoder: None,
            calendar: Calendar::default(),
            threshold: 0.5,
            top_k: 3,
            gap_minutes: 5,
        }
    }

    fn target(&self, phrase: &str) -> Result<LabelTarget, QueryError> {
        if let Some(t) = self.targets.iter().find(|t| t.phrase == phrase) {
            return Ok(t.clone());
        }
        match self.encoder {
            Some(p) => Ok(LabelTarget {
                phrase: phrase.to_string(),
                embedding: encode_label(p, phrase).map_err(|_| QueryError::UnknownContext(phrase.into()))?,
            }),
            None => Err(QueryError::UnknownContext(phrase.into())),
        }
    }

    fn matches(&self, user: &str, target: &LabelTarget, intervals: &[Interval]) -> Result<Vec<i64>, QueryError> {
        Ok(match_windows(self.store, self.scorer, target, user, intervals, self.threshold)?.timestamps)
    }

    /// Number of matched windows, one minute each.
    pub fn calculate_duration(&self, user: &str, context: &str, intervals: &[Interval]) -> Result<u64, QueryError> {
        Ok(self.matches(user, &self.target(context)?, intervals)?.len() as u64)
    }

    /// Matched minutes per label, top `k` descending, ties in vocabulary order.
    pub fn detect_activity(
        &self,
        user: &str,
        labels: &[String],
        intervals: &[Interval],
        k: usize,
    ) -> Result<Vec<LabelMinutes>, QueryError> {
        let targets: Vec<LabelTarget> = if labels.is_empty() {
            self.targets.to_vec()
        } else {
            labels.iter().map(|l| self.target(l)).collect::<Result<_, _>>()?
        };
        let mut counts = Vec::with_capacity(targets.len());
        for t in &targets {
            let n = self.matches(user, t, intervals)?.len() as u64;
            if n > 0 {
                counts.push(LabelMinutes {
                    label: t.phrase.clone(),
                    minutes: n,
                });
            }
        }
        counts.sort_by(|a, b| b.minutes.cmp(&a.minutes));
        counts.truncate(k);
        Ok(counts)
    }

    /// Episodes per local day, summed over days.
    pub fn counting_frequency(&self, user: &str, context: &str, intervals: &[Interval]) -> Result<u64, QueryError> {
        let ts = self.matches(user, &self.target(context)?, intervals)?;
        let mut by_day: BTreeMap<NaiveDate, Vec<i64>> = BTreeMap::new();
        for t in ts {
            by_day.entry(self.calendar.date(t)).or_default().push(t);
        }
        Ok(by_day.values().map(|v| count_episodes(v, self.gap_minutes)).sum())
    }

    /// Days with at least one match, and the number of days searched.
    pub fn counting_days(&self, user: &str, context: &str, days: &[ScopeDay]) -> Result<(u64, u64), QueryError> {
        let target = self.target(context)?;
        let mut hit = 0;
        for d in days {
            if !self.matches(user, &target, &d.intervals)?.is_empty() {
                hit += 1;
            }
        }
        Ok((hit, days.len() as u64))
    }

    pub fn detect_first_time(&self, user: &str, context: &str, intervals: &[Interval]) -> Result<Option<i64>, QueryError> {
        Ok(self.matches(user, &self.target(context)?, intervals)?.first().copied())
    }

    pub fn detect_last_time(&self, user: &str, context: &str, intervals: &[Interval]) -> Result<Option<i64>, QueryError> {
        Ok(self.matches(user, &self.target(context)?, intervals)?.last().copied())
    }

    /// Run `specs` in order; later specs may anchor on earlier results.
    pub fn execute(&self, specs: &[QuerySpec], user: &str, now: i64) -> Result<Vec<SpecResult>, QueryError> {
        let bounds = self.store.bounds(user);
        let mut anchors: Vec<Option<i64>> = Vec::with_capacity(specs.len());
        let mut out = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let days = resolve_days(&spec.scope, now, &self.calendar, bounds, &anchors)?;
            let phrase = spec.scope.phrase(&self.calendar);
            let contexts = self.run_spec(spec, user, &days, &phrase)?;
            let anchor = contexts.first().and_then(|c| match c.values {
                ContextValues::Time { timestamp, .. } => timestamp,
                _ => None,
            });
            anchors.push(anchor);
            out.push(SpecResult {
                spec: spec.clone(),
                contexts,
                anchor,
            });
        }
        Ok(out)
    }

    fn run_spec(&self, spec: &QuerySpec, user: &str, days: &[ScopeDay], phrase: &str) -> Result<Vec<SensorContext>, QueryError> {
        // groups of (day label, scope phrase, intervals) to run each context over
        let all: Vec<Interval> = days.iter().flat_map(|d| d.intervals.iter().copied()).collect();
        let groups: Vec<(Option<NaiveDate>, String, Vec<Interval>)> =
            if spec.per_day && spec.function != QueryFunction::CountingDays {
                days.iter()
                    .map(|d| {
                        let mut p = format!("on {}", weekday_name(d.date.weekday()));
                        if let Some(tod) = spec.scope.time_of_day {
                            p = format!("{p} {}", tod_phrase(tod));
                        }
                        (Some(d.date), p, d.intervals.clone())
                    })
                    .collect()
            } else {
                let day = (days.len() == 1).then(|| days[0].date);
                vec![(day, phrase.to_string(), all)]
            };

        let f = spec.function;
        let mut out = Vec::new();
        if f == QueryFunction::DetectActivity {
            for (day, p, iv) in &groups {
                let labels = self.detect_activity(user, &spec.contexts, iv, self.top_k)?;
                out.push(SensorContext::new(f, p.clone(), *day, ContextValues::Activity { labels }));
            }
            return Ok(out);
        }
        for context in &spec.contexts {
            let c = context.clone();
            for (day, p, iv) in &groups {
                let values = match f {
                    QueryFunction::CalculateDuration => ContextValues::Duration {
                        minutes: self.calculate_duration(user, context, iv)?,
                        context: c.clone(),
                    },
                    QueryFunction::CountingFrequency => ContextValues::Frequency {
                        count: self.counting_frequency(user, context, iv)?,
                        context: c.clone(),
                    },
                    QueryFunction::CountingDays => {
                        let (n, total) = self.counting_days(user, context, days)?;
                        ContextValues::Days {
                            context: c.clone(),
                            days: n,
                            total_days: total,
                        }
                    }
                    QueryFunction::DetectFirstTime | QueryFunction::DetectLastTime => {
                        let t = if f == QueryFunction::DetectFirstTime {
                            self.detect_first_time(user, context, iv)?
                        } else {
                            self.detect_last_time(user, context, iv)?
                        };
                        ContextValues::Time {
                            context: c.clone(),
                            timestamp: t,
                            clock: t.map(|t| self.calendar.hhmm(t)),
                        }
                    }
                    QueryFunction::DetectActivity => unreachable!("handled above"),
                };
                out.push(SensorContext::new(f, p.clone(), *day, values));
            }
        }
        Ok(out)
    }
}

/// Maximal runs of sorted timestamps whose consecutive gaps are at most
/// `gap_minutes` (a gap of exactly `gap_minutes` joins).
pub fn count_episodes(sorted: &[i64], gap_minutes: i64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[1] - w[0] > gap_minutes * 60).count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Embedding;
    use crate::store::{EmbeddingRecord, GroundTruthScorer};
    use crate::ingest::{SensorWindow, Timeline};
    use std::collections::BTreeSet;

    // Wed 2015-09-30 12:00 UTC
    const NOW: i64 = 1_443_614_400;
    const WED0: i64 = 1_443_571_200;

    fn scope(kind: ScopeKind) -> TimeScope {
        TimeScope::new(kind)
    }

    #[test]
    fn named_day_resolves_to_previous_occurrence() {
        let c = Calendar::default();
        let days = resolve_days(&scope(ScopeKind::NamedDay { weekday: Weekday::Tue }), NOW, &c, None, &[]).unwrap();
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].intervals, vec![Interval::new(WED0 - 86_400, WED0)]);
        // today's weekday resolves to today, clipped at now
        let today = resolve_scope(&scope(ScopeKind::NamedDay { weekday: Weekday::Wed }), NOW, &c, None, &[]).unwrap();
        assert_eq!(today, vec![Interval::new(WED0, NOW)]);
        let thu = resolve_days(&scope(ScopeKind::NamedDay { weekday: Weekday::Thu }), NOW, &c, None, &[]).unwrap();
        assert_eq!(thu[0].date, NaiveDate::from_ymd_opt(2015, 9, 24).unwrap());
    }

    #[test]
    fn last_week_morning_is_seven_six_hour_blocks() {
        let c = Calendar::default();
        let s = TimeScope::span(RelativeSpan::LastWeek).with_time_of_day(Some(TimeOfDay::Morning));
        let iv = resolve_scope(&s, NOW, &c, None, &[]).unwrap();
        assert_eq!(iv.len(), 7);
        let mon = WED0 - 9 * 86_400; // Mon 2015-09-21
        assert_eq!(iv[0], Interval::new(mon + 6 * 3600, mon + 12 * 3600));
        assert!(iv.iter().all(|i| i.to - i.from == 6 * 3600));
        assert!(crate::calendar::is_sorted_disjoint(&iv));
    }

    #[test]
    fn after_and_before_result_clip_to_day() {
        let c = Calendar::default();
        let t_ref = WED0 - 86_400 + 10 * 3600 + 7 * 60; // Tue 10:07
        let after = resolve_scope(&scope(ScopeKind::AfterResult { result_ref: 0 }), NOW, &c, None, &[Some(t_ref)]).unwrap();
        assert_eq!(after, vec![Interval::new(t_ref + 1, WED0)]);
        let before = resolve_scope(&scope(ScopeKind::BeforeResult { result_ref: 0 }), NOW, &c, None, &[Some(t_ref)]).unwrap();
        assert_eq!(before, vec![Interval::new(WED0 - 86_400, t_ref)]);
        assert!(matches!(
            resolve_scope(&scope(ScopeKind::AfterResult { result_ref: 0 }), NOW, &c, None, &[None]),
            Err(QueryError::UnresolvedScope(0))
        ));
        assert!(matches!(
            resolve_scope(&scope(ScopeKind::AfterResult { result_ref: 3 }), NOW, &c, None, &[]),
            Err(QueryError::UnresolvedScope(3))
        ));
    }

    #[test]
    fn all_time_spans_data_days() {
        let c = Calendar::default();
        let days = resolve_days(&TimeScope::span(RelativeSpan::AllTime), NOW, &c, Some((WED0 - 3 * 86_400 + 50, NOW - 60)), &[]).unwrap();
        assert_eq!(days.len(), 4);
        assert_eq!(days[3].intervals, vec![Interval::new(WED0, NOW)]);
        assert!(resolve_days(&TimeScope::span(RelativeSpan::AllTime), NOW, &c, None, &[]).unwrap().is_empty());
    }

    #[test]
    fn episode_boundaries() {
        let m = |v: &[i64]| v.iter().map(|x| x * 60).collect::<Vec<_>>();
        assert_eq!(count_episodes(&m(&[10, 11, 12, 40, 41]), 5), 2);
        assert_eq!(count_episodes(&m(&[10, 14, 19]), 5), 1);
        assert_eq!(count_episodes(&m(&[10, 16]), 5), 2);
        assert_eq!(count_episodes(&[], 5), 0);
    }

    #[test]
    fn rendering() {
        assert_eq!(format_minutes(35), "35 minutes");
        assert_eq!(format_minutes(135), "2 hours and 15 minutes");
        assert_eq!(format_minutes(61), "1 hour and 1 minute");
        assert_eq!(format_minutes(120), "2 hours and 0 minutes");
        let d = |m| ContextValues::Duration { context: "exercise".into(), minutes: m };
        assert_eq!(
            render(QueryFunction::CalculateDuration, "last week in the morning", &d(35)),
            "You spent 35 minutes exercise last week in the morning."
        );
        assert_eq!(
            render(QueryFunction::CalculateDuration, "yesterday", &d(0)),
            "You spent no recorded time exercise yesterday."
        );
        let f = ContextValues::Frequency { context: "grooming".into(), count: 1 };
        assert_eq!(render(QueryFunction::CountingFrequency, "today", &f), "You grooming 1 time today.");
        let days = ContextValues::Days { context: "at home".into(), days: 5, total_days: 7 };
        assert_eq!(render(QueryFunction::CountingDays, "last week", &days), "You were at home on 5 of the last 7 days.");
        let t = ContextValues::Time { context: "cooking".into(), timestamp: Some(0), clock: Some("09:03".into()) };
        assert_eq!(render(QueryFunction::DetectFirstTime, "on Tuesday", &t), "You first cooking around 09:03 on Tuesday.");
        let none = ContextValues::Time { context: "cooking".into(), timestamp: None, clock: None };
        assert_eq!(render(QueryFunction::DetectLastTime, "", &none), "cooking was not detected.");
        let a = ContextValues::Activity { labels: vec![] };
        assert_eq!(render(QueryFunction::DetectActivity, "afterwards", &a), "No confident activity detected afterwards.");
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = QuerySpec {
            function: QueryFunction::CalculateDuration,
            contexts: vec!["exercise".into()],
            scope: TimeScope::span(RelativeSpan::LastWeek).with_time_of_day(Some(TimeOfDay::Morning)),
            per_day: false,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"function":"CalculateDuration","contexts":["exercise"],"scope":{"kind":"relative_span","span":"last_week","time_of_day":"morning"},"per_day":false}"#
        );
        assert_eq!(serde_json::from_str::<QuerySpec>(&json).unwrap(), spec);
        let named: TimeScope = serde_json::from_str(r#"{"kind":"named_day","weekday":"tuesday"}"#).unwrap();
        assert_eq!(named.kind, ScopeKind::NamedDay { weekday: Weekday::Tue });
    }

    /// A single user's day on Tuesday with hand-placed labels.
    fn tuesday() -> (EmbeddingStore, Timeline) {
        let tue = WED0 - 86_400;
        let label_at = |minute: i64| -> Vec<&str> {
            match minute {
                540..=599 => vec!["at home", "cooking"], // 09:00-09:59
                600..=606 => vec!["at home"],            // 10:00-10:06
                700..=729 => vec!["walking"],
                1100..=1102 => vec!["cooking"],
                _ => vec![],
            }
        };
        let windows: Vec<SensorWindow> = (0..1440)
            .map(|m| SensorWindow {
                timestamp: tue + m * 60,
                user_id: "u".into(),
                features: vec![vec![0.0]],
                missing: vec![false],
                missing_cells: vec![],
                labels: label_at(m).into_iter().map(String::from).collect::<BTreeSet<_>>(),
            })
            .collect();
        let store = EmbeddingStore {
            embed_dim: 1,
            records: windows
                .iter()
                .map(|w| EmbeddingRecord { timestamp: w.timestamp, user_id: "u".into(), vector: vec![1.0] })
                .collect(),
        };
        (store, Timeline::from_windows(windows).unwrap())
    }

    fn targets() -> Vec<LabelTarget> {
        ["at home", "cooking", "walking"]
            .iter()
            .map(|p| LabelTarget { phrase: p.to_string(), embedding: Embedding(vec![1.0]) })
            .collect()
    }

    #[test]
    fn action_after_chain() {
        let (store, tl) = tuesday();
        let oracle = GroundTruthScorer::new(&tl);
        let t = targets();
        let engine = QueryEngine::new(&store, &oracle, &t);
        let specs = vec![
            QuerySpec {
                function: QueryFunction::DetectLastTime,
                contexts: vec!["at home".into()],
                scope: scope(ScopeKind::NamedDay { weekday: Weekday::Tue }),
                per_day: false,
            },
            QuerySpec {
                function: QueryFunction::DetectActivity,
                contexts: vec![],
                scope: scope(ScopeKind::AfterResult { result_ref: 0 }),
                per_day: false,
            },
        ];
        let res = engine.execute(&specs, "u", NOW).unwrap();
        assert_eq!(res[0].contexts[0].text, "You last at home around 10:06 on Tuesday.");
        assert_eq!(res[0].anchor, Some(WED0 - 86_400 + 606 * 60));
        assert_eq!(
            res[1].contexts[0].text,
            "Detected activities afterwards: walking for 30 minutes, cooking for 3 minutes."
        );
    }

    #[test]
    fn functions_on_hand_built_day() {
        let (store, tl) = tuesday();
        let oracle = GroundTruthScorer::new(&tl);
        let t = targets();
        let engine = QueryEngine::new(&store, &oracle, &t);
        let day = vec![Interval::new(WED0 - 86_400, WED0)];
        assert_eq!(engine.calculate_duration("u", "cooking", &day).unwrap(), 63);
        assert_eq!(engine.counting_frequency("u", "cooking", &day).unwrap(), 2);
        assert_eq!(engine.detect_first_time("u", "cooking", &day).unwrap(), Some(WED0 - 86_400 + 540 * 60));
        assert_eq!(engine.detect_last_time("u", "cooking", &day).unwrap(), Some(WED0 - 86_400 + 1102 * 60));
        let top = engine.detect_activity("u", &[], &day, 3).unwrap();
        assert_eq!(
            top.iter().map(|l| (l.label.as_str(), l.minutes)).collect::<Vec<_>>(),
            vec![("at home", 67), ("cooking", 63), ("walking", 30)]
        );
        assert!(engine.detect_activity("u", &[], &[], 3).unwrap().is_empty());
        assert!(matches!(
            engine.calculate_duration("u", "flying", &day),
            Err(QueryError::UnknownContext(_))
        ));
    }

    #[test]
    fn per_day_expansion_and_counting_days() {
        let (store, tl) = tuesday();
        let oracle = GroundTruthScorer::new(&tl);
        let t = targets();
        let engine = QueryEngine::new(&store, &oracle, &t);
        // the following Monday: last week is Mon 21 .. Sun 27 only if now is in
        // the week of the 28th
        let next_wed = NOW + 7 * 86_400;
        let dur = QuerySpec {
            function: QueryFunction::CalculateDuration,
            contexts: vec!["cooking".into()],
            scope: TimeScope::span(RelativeSpan::LastWeek),
            per_day: true,
        };
        let r = engine.execute(&[dur.clone()], "u", next_wed).unwrap();
        let minutes: Vec<u64> = r[0].contexts.iter().map(|c| c.minutes().unwrap()).collect();
        assert_eq!(minutes, vec![0, 63, 0, 0, 0, 0, 0]);
        assert_eq!(r[0].contexts[1].scope, "on Tuesday");
        let days = QuerySpec { function: QueryFunction::CountingDays, per_day: false, ..dur };
        let r = engine.execute(&[days], "u", next_wed).unwrap();
        assert_eq!(r[0].contexts.len(), 1);
        assert_eq!(r[0].contexts[0].text, "You were cooking on 1 of the last 7 days.");
    }
}
