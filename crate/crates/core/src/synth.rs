//! Synthetic timelines, grammar questions and QA suites, plus a brute-force
//! query oracle that works directly on window labels.
//!
//! The oracle uses plain integer calendar arithmetic (UTC, days since the
//! epoch) and shares no code with the query engine, so the two can be
//! compared.

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calendar::{weekday_name, TimeOfDay, WEEKDAYS};
use crate::decompose::{Lexicon, QuestionCategory};
use crate::eval::QaRecord;
use crate::ingest::{LabelVocabulary, Modality, ModalitySchema, SensorWindow, Timeline};
use crate::encoders::Embedding;
use crate::query::{ContextValues, LabelMinutes, QueryEngine, QueryFunction, QuerySpec, RelativeSpan, ScopeKind, TimeScope};
use crate::store::{EmbeddingRecord, EmbeddingStore, GroundTruthScorer, LabelTarget};

pub const SYNTH_LABELS: [&str; 11] = [
    "at home",
    "at work",
    "cooking",
    "eating",
    "exercise",
    "grooming",
    "in a meeting",
    "sitting",
    "sleeping",
    "standing",
    "walking",
];

pub fn synth_schema() -> ModalitySchema {
    ModalitySchema::new(vec![
        Modality { name: "imu".into(), dim: 8 },
        Modality { name: "audio".into(), dim: 6 },
    ])
    .expect("valid schema")
}

pub fn synth_vocabulary() -> LabelVocabulary {
    LabelVocabulary::from_phrases(SYNTH_LABELS).expect("valid vocabulary")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub days: usize,
    /// First local (UTC) day of the data.
    pub start: NaiveDate,
    pub seed: u64,
    /// Standard deviation of per-feature Gaussian noise.
    pub noise: f64,
    /// Scale of the per-label feature prototypes.
    pub separation: f64,
    /// Probability that a window's audio modality is missing.
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2,
            days: 14,
            start: NaiveDate::from_ymd_opt(2015, 9, 14).expect("date"),
            seed: 7,
            noise: 0.3,
            separation: 2.0,
            missing_rate: 0.0,
        }
    }
}

fn day_number(d: NaiveDate) -> i64 {
    d.signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()).num_days()
}

/// Minute-by-minute label sets for one day of a plausible routine.
pub fn day_plan(rng: &mut ChaCha8Rng, weekday: Weekday) -> Vec<BTreeSet<String>> {
    let mut plan: Vec<BTreeSet<String>> = Vec::with_capacity(1440);
    let push = |plan: &mut Vec<BTreeSet<String>>, labels: &[&str], minutes: usize| {
        let room = 1440usize.saturating_sub(plan.len());
        let set: BTreeSet<String> = labels.iter().map(|s| s.to_string()).collect();
        plan.extend(std::iter::repeat_n(set, minutes.min(room)));
    };
    let wake = rng.random_range(360..450);
    push(&mut plan, &["at home", "sleeping"], wake);
    push(&mut plan, &["at home", "grooming"], rng.random_range(10..30));
    push(&mut plan, &["at home", "eating"], rng.random_range(10..25));
    if rng.random_bool(0.5) {
        push(&mut plan, &["exercise"], rng.random_range(20..60));
    }
    let workday = weekday.num_days_from_monday() < 5;
    if workday {
        push(&mut plan, &["walking"], rng.random_range(10..25));
        let blocks: [&[&str]; 3] = [&["at work", "sitting"], &["at work", "in a meeting", "sitting"], &["at work", "standing"]];
        while plan.len() < rng.random_range(690..750) {
            push(&mut plan, blocks.choose(rng).unwrap(), rng.random_range(15..60));
        }
        push(&mut plan, &["at work", "eating"], rng.random_range(20..40));
        let leave = rng.random_range(1020..1080);
        while plan.len() < leave {
            push(&mut plan, blocks.choose(rng).unwrap(), rng.random_range(15..60));
        }
        push(&mut plan, &["walking"], rng.random_range(10..25));
    } else {
        let blocks: [&[&str]; 3] = [&["at home", "sitting"], &["at home", "standing"], &["walking"]];
        let until = rng.random_range(1000..1080);
        while plan.len() < until {
            push(&mut plan, blocks.choose(rng).unwrap(), rng.random_range(20..90));
        }
    }
    push(&mut plan, &["at home", "cooking"], rng.random_range(20..50));
    push(&mut plan, &["at home", "eating"], rng.random_range(15..30));
    let bed = rng.random_range(1320..1410);
    while plan.len() < bed {
        let left = bed - plan.len();
        push(&mut plan, &["at home", "sitting"], left.min(rng.random_range(20..80)));
        if plan.len() < bed && rng.random_bool(0.3) {
            let n = rng.random_range(3..10).min(bed - plan.len());
            push(&mut plan, &["at home", "standing"], n);
        }
    }
    push(&mut plan, &["at home", "grooming"], rng.random_range(5..15));
    let rest = 1440 - plan.len().min(1440);
    push(&mut plan, &["at home", "sleeping"], rest);
    plan
}

/// Per-label prototype vectors for each modality.
fn prototypes(schema: &ModalitySchema, seed: u64, scale: f64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let normal = Normal::new(0.0, scale).unwrap();
    SYNTH_LABELS
        .iter()
        .map(|_| {
            schema
                .modalities
                .iter()
                .map(|m| (0..m.dim).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        })
        .collect()
}

/// Features are the sum of the active labels' prototypes plus noise.
pub fn generate_timeline(cfg: &SynthConfig) -> Timeline {
    let schema = synth_schema();
    let protos = prototypes(&schema, cfg.seed, cfg.separation);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).unwrap();
    let mut windows = Vec::with_capacity(cfg.users * cfg.days * 1440);
    let first_day = day_number(cfg.start);
    for u in 0..cfg.users {
        let user = format!("user{}", u + 1);
        for d in 0..cfg.days {
            let date = cfg.start + chrono::Duration::days(d as i64);
            let plan = day_plan(&mut rng, date.weekday());
            let day_start = (first_day + d as i64) * 86_400;
            for (minute, labels) in plan.into_iter().enumerate() {
                let mut features: Vec<Vec<f64>> = schema
                    .modalities
                    .iter()
                    .map(|m| (0..m.dim).map(|_| noise.sample(&mut rng)).collect())
                    .collect();
                for l in &labels {
                    let li = SYNTH_LABELS.iter().position(|p| p == l).unwrap();
                    for (m, f) in features.iter_mut().enumerate() {
                        for (x, p) in f.iter_mut().zip(&protos[li][m]) {
                            *x += p;
                        }
                    }
                }
                let mut missing = vec![false; schema.len()];
                if cfg.missing_rate > 0.0 && rng.random_bool(cfg.missing_rate) {
                    missing[1] = true;
                    features[1].iter_mut().for_each(|x| *x = f64::NAN);
                }
                windows.push(SensorWindow {
                    timestamp: day_start + minute as i64 * 60,
                    user_id: user.clone(),
                    features,
                    missing,
                    missing_cells: vec![],
                    labels,
                });
            }
        }
    }
    Timeline::from_windows(windows).expect("generated windows are unique")
}

/// `windows` single-label windows over `labels` classes. Each class has a
/// Gaussian prototype per modality (scale `separation`), and every window is
/// its prototype plus unit-variance noise scaled by `noise`.
pub fn separable_timeline(labels: usize, windows: usize, separation: f64, noise: f64, seed: u64) -> Timeline {
    let schema = synth_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto_dist = Normal::new(0.0, separation).unwrap();
    let noise_dist = Normal::new(0.0, noise.max(1e-12)).unwrap();
    let protos: Vec<Vec<Vec<f64>>> = (0..labels)
        .map(|_| {
            schema
                .modalities
                .iter()
                .map(|m| (0..m.dim).map(|_| proto_dist.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let names: Vec<String> = (0..labels).map(|i| format!("class {i}")).collect();
    let windows = (0..windows)
        .map(|i| {
            let c = i % labels;
            SensorWindow {
                timestamp: i as i64 * 60,
                user_id: "u".into(),
                features: protos[c]
                    .iter()
                    .map(|p| p.iter().map(|x| x + noise_dist.sample(&mut rng)).collect())
                    .collect(),
                missing: vec![false; schema.len()],
                missing_cells: vec![],
                labels: BTreeSet::from([names[c].clone()]),
            }
        })
        .collect();
    Timeline::from_windows(windows).expect("unique timestamps")
}

/// Random label runs over `days` days with random coverage gaps; features
/// are constant zeros. Meant for checking query logic, not learning.
pub fn random_label_timeline(rng: &mut ChaCha8Rng, users: usize, days: usize, start: NaiveDate) -> Timeline {
    let first = day_number(start) * 86_400;
    let mut windows = Vec::new();
    for u in 0..users {
        let user = format!("u{u}");
        let mut minute = rng.random_range(0..600i64);
        let end = days as i64 * 1440 - rng.random_range(0..600i64);
        while minute < end {
            let run = rng.random_range(1..90i64);
            let n_labels = rng.random_range(0..=3usize);
            let labels: BTreeSet<String> = SYNTH_LABELS
                .choose_multiple(rng, n_labels)
                .map(|s| s.to_string())
                .collect();
            // occasional one-minute flickers inside a run
            let flicker = rng.random_bool(0.3).then(|| rng.random_range(0..run));
            for k in 0..run.min(end - minute) {
                let mut l = labels.clone();
                if Some(k) == flicker {
                    l.clear();
                }
                windows.push(SensorWindow {
                    timestamp: first + (minute + k) * 60,
                    user_id: user.clone(),
                    features: vec![vec![0.0]],
                    missing: vec![false],
                    missing_cells: vec![],
                    labels: l,
                });
            }
            minute += run;
            if rng.random_bool(0.2) {
                minute += rng.random_range(1..240); // no data
            }
        }
    }
    Timeline::from_windows(windows).expect("unique")
}

/// Brute-force evaluation of query specs from ground-truth labels.
pub mod oracle {
    use super::*;

    pub const TOP_K: usize = 3;
    pub const GAP_MINUTES: i64 = 5;

    fn day_of(t: i64) -> i64 {
        t.div_euclid(86_400)
    }

    /// Monday = 0; day 0 (1970-01-01) was a Thursday.
    pub fn weekday_index(day: i64) -> i64 {
        (day + 3).rem_euclid(7)
    }

    fn tod_hours(tod: TimeOfDay) -> (i64, i64) {
        match tod {
            TimeOfDay::Morning => (6, 12),
            TimeOfDay::Afternoon => (12, 18),
            TimeOfDay::Evening => (18, 24),
            TimeOfDay::Night => (0, 6),
            TimeOfDay::Any => (0, 24),
        }
    }

    /// `(day, from, to)` blocks of a scope, or `None` when an anchor is missing.
    pub fn resolve(scope: &TimeScope, now: i64, bounds: Option<(i64, i64)>, anchors: &[Option<i64>]) -> Option<Vec<(i64, i64, i64)>> {
        let today = day_of(now);
        let whole = |d: i64| (d, d * 86_400, d * 86_400 + 86_400);
        let mut blocks: Vec<(i64, i64, i64)> = match scope.kind {
            ScopeKind::RelativeSpan { span: RelativeSpan::Today } => vec![whole(today)],
            ScopeKind::RelativeSpan { span: RelativeSpan::Yesterday } => vec![whole(today - 1)],
            ScopeKind::RelativeSpan { span: RelativeSpan::LastWeek } => {
                let monday = today - weekday_index(today) - 7;
                (monday..monday + 7).map(whole).collect()
            }
            ScopeKind::RelativeSpan { span: RelativeSpan::AllTime } => match bounds {
                Some((a, b)) => (day_of(a)..=day_of(b).min(today)).map(whole).collect(),
                None => vec![],
            },
            ScopeKind::NamedDay { weekday } => {
                let w = weekday.num_days_from_monday() as i64;
                vec![whole(today - (weekday_index(today) - w).rem_euclid(7))]
            }
            ScopeKind::AbsoluteRange { from, to } => {
                if to <= from {
                    vec![]
                } else {
                    (day_of(from)..=day_of(to - 1))
                        .map(|d| (d, (d * 86_400).max(from), (d * 86_400 + 86_400).min(to)))
                        .collect()
                }
            }
            ScopeKind::AfterResult { result_ref } => {
                let t = (*anchors.get(result_ref)?)?;
                vec![(day_of(t), t + 1, day_of(t) * 86_400 + 86_400)]
            }
            ScopeKind::BeforeResult { result_ref } => {
                let t = (*anchors.get(result_ref)?)?;
                vec![(day_of(t), day_of(t) * 86_400, t)]
            }
        };
        for b in blocks.iter_mut() {
            b.2 = b.2.min(now);
            if let Some(tod) = scope.time_of_day {
                let (h0, h1) = tod_hours(tod);
                b.1 = b.1.max(b.0 * 86_400 + h0 * 3600);
                b.2 = b.2.min(b.0 * 86_400 + h1 * 3600);
            }
        }
        blocks.retain(|b| b.2 > b.1);
        Some(blocks)
    }

    fn matched<'a>(windows: &'a [SensorWindow], label: &'a str, blocks: &'a [(i64, i64, i64)]) -> impl Iterator<Item = i64> + 'a {
        windows
            .iter()
            .filter(move |w| w.labels.contains(label) && blocks.iter().any(|b| b.1 <= w.timestamp && w.timestamp < b.2))
            .map(|w| w.timestamp)
    }

    fn episodes(ts: &[i64]) -> u64 {
        let mut n = 0;
        for (i, t) in ts.iter().enumerate() {
            let joins = i > 0 && day_of(ts[i - 1]) == day_of(*t) && t - ts[i - 1] <= GAP_MINUTES * 60;
            if !joins {
                n += 1;
            }
        }
        n
    }

    fn clock(t: i64) -> String {
        let s = t.rem_euclid(86_400);
        format!("{:02}:{:02}", s / 3600, (s % 3600) / 60)
    }

    /// Values each spec should produce, in order; `None` if a scope anchor
    /// is unresolved. `windows` are one user's windows sorted by time.
    pub fn run(specs: &[QuerySpec], windows: &[SensorWindow], vocab: &[&str], now: i64) -> Option<Vec<Vec<ContextValues>>> {
        let bounds = windows.first().map(|f| (f.timestamp, windows.last().unwrap().timestamp));
        let mut anchors: Vec<Option<i64>> = Vec::new();
        let mut out = Vec::new();
        for spec in specs {
            let blocks = resolve(&spec.scope, now, bounds, &anchors)?;
            let groups: Vec<Vec<(i64, i64, i64)>> = if spec.per_day && spec.function != QueryFunction::CountingDays {
                blocks.iter().map(|b| vec![*b]).collect()
            } else {
                vec![blocks.clone()]
            };
            let mut values = Vec::new();
            if spec.function == QueryFunction::DetectActivity {
                let labels: Vec<&str> = if spec.contexts.is_empty() {
                    vocab.to_vec()
                } else {
                    spec.contexts.iter().map(String::as_str).collect()
                };
                for g in &groups {
                    let mut counts: Vec<LabelMinutes> = labels
                        .iter()
                        .map(|l| LabelMinutes {
                            label: l.to_string(),
                            minutes: matched(windows, l, g).count() as u64,
                        })
                        .filter(|c| c.minutes > 0)
                        .collect();
                    counts.sort_by(|a, b| b.minutes.cmp(&a.minutes));
                    counts.truncate(TOP_K);
                    values.push(ContextValues::Activity { labels: counts });
                }
            } else {
                for c in &spec.contexts {
                    for g in &groups {
                        let ts: Vec<i64> = matched(windows, c, g).collect();
                        values.push(match spec.function {
                            QueryFunction::CalculateDuration => ContextValues::Duration {
                                context: c.clone(),
                                minutes: ts.len() as u64,
                            },
                            QueryFunction::CountingFrequency => ContextValues::Frequency {
                                context: c.clone(),
                                count: episodes(&ts),
                            },
                            QueryFunction::CountingDays => {
                                let days: BTreeSet<i64> = ts.iter().map(|t| day_of(*t)).collect();
                                ContextValues::Days {
                                    context: c.clone(),
                                    days: days.len() as u64,
                                    total_days: blocks.len() as u64,
                                }
                            }
                            QueryFunction::DetectFirstTime => ContextValues::Time {
                                context: c.clone(),
                                timestamp: ts.first().copied(),
                                clock: ts.first().map(|t| clock(*t)),
                            },
                            QueryFunction::DetectLastTime => ContextValues::Time {
                                context: c.clone(),
                                timestamp: ts.last().copied(),
                                clock: ts.last().map(|t| clock(*t)),
                            },
                            QueryFunction::DetectActivity => unreachable!(),
                        });
                    }
                }
            }
            anchors.push(values.first().and_then(|v| match v {
                ContextValues::Time { timestamp, .. } => *timestamp,
                _ => None,
            }));
            out.push(values);
        }
        Some(out)
    }

    /// Outcome of comparing the query engine against [`run`].
    #[derive(Debug, Clone, Default)]
    pub struct CrossCheck {
        pub compared: usize,
        pub mismatches: Vec<String>,
    }

    fn random_specs(rng: &mut ChaCha8Rng, lexicon: &Lexicon, start: i64, end: i64) -> Vec<QuerySpec> {
        if rng.random_bool(0.2) {
            let from = rng.random_range(start - 86_400..end);
            let to = from + rng.random_range(60..5 * 86_400);
            let function = QueryFunction::ALL[rng.random_range(0..6)];
            let contexts = if function == QueryFunction::DetectActivity && rng.random_bool(0.5) {
                vec![]
            } else {
                vec![SYNTH_LABELS.choose(rng).unwrap().to_string()]
            };
            return vec![mk(function, contexts, ScopeKind::AbsoluteRange { from, to }, None, rng.random_bool(0.3))];
        }
        let category = *QuestionCategory::ALL.choose(rng).unwrap();
        grammar_question(rng, lexicon, category).specs
    }

    /// Run the engine with ground-truth similarity over `timelines` random
    /// label timelines of `days` days, `queries` random spec lists each,
    /// and compare every value with the brute-force recount.
    pub fn cross_check(timelines: usize, days: usize, queries: usize, seed: u64) -> CrossCheck {
        let lexicon = Lexicon::with_default_synonyms(&synth_vocabulary());
        let targets: Vec<LabelTarget> = SYNTH_LABELS
            .iter()
            .map(|p| LabelTarget {
                phrase: p.to_string(),
                embedding: Embedding(vec![0.0]),
            })
            .collect();
        let start = NaiveDate::from_ymd_opt(2015, 9, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = CrossCheck::default();
        for i in 0..timelines {
            let tl = random_label_timeline(&mut rng, 1, days, start);
            let store = EmbeddingStore {
                embed_dim: 1,
                records: tl
                    .windows
                    .iter()
                    .map(|w| EmbeddingRecord {
                        timestamp: w.timestamp,
                        user_id: w.user_id.clone(),
                        vector: vec![0.0],
                    })
                    .collect(),
            };
            let scorer = GroundTruthScorer::new(&tl);
            let engine = QueryEngine::new(&store, &scorer, &targets);
            let windows = tl.user_windows("u0");
            let (t0, t1) = (windows[0].timestamp, windows.last().unwrap().timestamp);
            for _ in 0..queries {
                let now = rng.random_range(t0..t1 + 2 * 86_400);
                let specs = random_specs(&mut rng, &lexicon, t0, t1);
                out.compared += 1;
                match (run(&specs, windows, &SYNTH_LABELS, now), engine.execute(&specs, "u0", now)) {
                    (None, Err(_)) => {}
                    (Some(want), Ok(got)) => {
                        let got: Vec<Vec<ContextValues>> = got
                            .into_iter()
                            .map(|r| r.contexts.into_iter().map(|c| c.values).collect())
                            .collect();
                        if got != want {
                            out.mismatches
                                .push(format!("timeline {i}, now {now}, specs {specs:?}: engine {got:?}, oracle {want:?}"));
                        }
                    }
                    (want, got) => out
                        .mismatches
                        .push(format!("timeline {i}, now {now}, specs {specs:?}: engine {got:?}, oracle {want:?}")),
                }
            }
        }
        out
    }

    /// Day number of each block of a per-day spec, in order.
    pub fn block_days(spec: &QuerySpec, now: i64, bounds: Option<(i64, i64)>) -> Vec<i64> {
        resolve(&spec.scope, now, bounds, &[]).unwrap_or_default().iter().map(|b| b.0).collect()
    }
}

/// A grammar-generated question and the specs it must decompose into.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarCase {
    pub category: QuestionCategory,
    pub question: String,
    pub specs: Vec<QuerySpec>,
}

const TOD_PHRASES: [(TimeOfDay, &str); 4] = [
    (TimeOfDay::Morning, "in the morning"),
    (TimeOfDay::Afternoon, "in the afternoon"),
    (TimeOfDay::Evening, "in the evening"),
    (TimeOfDay::Night, "at night"),
];

/// A random date phrase and its scope; `None` means no date phrase.
fn random_date(rng: &mut ChaCha8Rng) -> Option<(String, ScopeKind)> {
    let wd = *WEEKDAYS.choose(rng).unwrap();
    let span = |s| ScopeKind::RelativeSpan { span: s };
    match rng.random_range(0..7) {
        0 => None,
        1 => Some(("yesterday".into(), span(RelativeSpan::Yesterday))),
        2 => Some(("today".into(), span(RelativeSpan::Today))),
        3 => Some(("last week".into(), span(RelativeSpan::LastWeek))),
        4 => Some(("overall".into(), span(RelativeSpan::AllTime))),
        5 => Some((format!("on {}", weekday_name(wd)), ScopeKind::NamedDay { weekday: wd })),
        _ => Some((format!("last {}", weekday_name(wd)), ScopeKind::NamedDay { weekday: wd })),
    }
}

fn random_tod(rng: &mut ChaCha8Rng) -> Option<(TimeOfDay, &'static str)> {
    if rng.random_bool(0.4) {
        TOD_PHRASES.choose(rng).copied()
    } else {
        None
    }
}

fn suffix(parts: &[Option<&str>]) -> String {
    parts.iter().flatten().map(|p| format!(" {p}")).collect()
}

fn all_time() -> ScopeKind {
    ScopeKind::RelativeSpan { span: RelativeSpan::AllTime }
}

fn last_week() -> ScopeKind {
    ScopeKind::RelativeSpan { span: RelativeSpan::LastWeek }
}

fn mk(function: QueryFunction, contexts: Vec<String>, kind: ScopeKind, tod: Option<TimeOfDay>, per_day: bool) -> QuerySpec {
    QuerySpec {
        function,
        contexts,
        scope: TimeScope { kind, time_of_day: tod },
        per_day,
    }
}

/// One question of `category` from the documented grammar.
pub fn grammar_question(rng: &mut ChaCha8Rng, lexicon: &Lexicon, category: QuestionCategory) -> GrammarCase {
    let phrases = lexicon.phrases();
    let pick = |rng: &mut ChaCha8Rng| -> (String, String) {
        let p = phrases.choose(rng).unwrap().clone();
        let s = lexicon.surface_forms(&p).choose(rng).unwrap().clone();
        (p, s)
    };
    let date = random_date(rng);
    let tod = random_tod(rng);
    let sfx = suffix(&[date.as_ref().map(|d| d.0.as_str()), tod.map(|t| t.1)]);
    let kind = date.as_ref().map(|d| d.1);
    let t = tod.map(|t| t.0);
    let (question, specs) = match category {
        QuestionCategory::TimeCompare => {
            let (a, sa) = pick(rng);
            let (mut b, mut sb) = pick(rng);
            while b == a {
                (b, sb) = pick(rng);
            }
            (
                format!("Did I spend more time {sa} or {sb}{sfx}?"),
                vec![mk(QueryFunction::CalculateDuration, vec![a, b], kind.unwrap_or(all_time()), t, false)],
            )
        }
        QuestionCategory::DayQuery => {
            let (a, sa) = pick(rng);
            let lw = rng.random_bool(0.3).then_some("last week");
            let s = suffix(&[lw, tod.map(|t| t.1)]);
            let q = match rng.random_range(0..3) {
                0 => format!("On which day did I spend the most time {sa}{s}?"),
                1 => format!("Which day was I {sa} the most{s}?"),
                _ => format!("What day did I {sa} the most{s}?"),
            };
            (q, vec![mk(QueryFunction::CalculateDuration, vec![a], last_week(), t, true)])
        }
        QuestionCategory::TimeQuery => {
            let (a, sa) = pick(rng);
            let q = match rng.random_range(0..3) {
                0 => format!("How long did I {sa}{sfx}?"),
                1 => format!("How much time did I spend {sa}{sfx}?"),
                _ => format!("How long was I {sa}{sfx}?"),
            };
            (q, vec![mk(QueryFunction::CalculateDuration, vec![a], kind.unwrap_or(all_time()), t, false)])
        }
        QuestionCategory::Counting => {
            let (a, sa) = pick(rng);
            match rng.random_range(0..4) {
                0 => (
                    format!("How often did I {sa}{sfx}?"),
                    vec![mk(QueryFunction::CountingFrequency, vec![a], kind.unwrap_or(all_time()), t, false)],
                ),
                1 => (
                    format!("How many times did I {sa}{sfx}?"),
                    vec![mk(QueryFunction::CountingFrequency, vec![a], kind.unwrap_or(all_time()), t, false)],
                ),
                n => {
                    let lw = rng.random_bool(0.5).then_some("last week");
                    let s = suffix(&[lw, tod.map(|t| t.1)]);
                    let q = if n == 2 {
                        format!("How many days was I {sa}{s}?")
                    } else {
                        format!("How many days did I {sa}{s}?")
                    };
                    (q, vec![mk(QueryFunction::CountingDays, vec![a], last_week(), t, false)])
                }
            }
        }
        QuestionCategory::Existence => {
            let (a, sa) = pick(rng);
            let lead = ["Did I", "Was I", "Have I"].choose(rng).unwrap();
            (
                format!("{lead} {sa}{sfx}?"),
                vec![mk(QueryFunction::CalculateDuration, vec![a], kind.unwrap_or(all_time()), t, false)],
            )
        }
        QuestionCategory::ActionQuery => match rng.random_range(0..4) {
            0 | 1 => {
                let lead = if rng.random_bool(0.5) { "What did I do" } else { "What was I doing" };
                (
                    format!("{lead}{sfx}?"),
                    vec![mk(QueryFunction::DetectActivity, vec![], kind.unwrap_or(all_time()), t, false)],
                )
            }
            n => {
                let (a, sa) = pick(rng);
                let after = n == 2;
                let (word, anchor_fn, follow) = if after {
                    ("after", QueryFunction::DetectLastTime, ScopeKind::AfterResult { result_ref: 0 })
                } else {
                    ("before", QueryFunction::DetectFirstTime, ScopeKind::BeforeResult { result_ref: 0 })
                };
                (
                    format!("What did I do {word} I {sa}{sfx}?"),
                    vec![
                        mk(anchor_fn, vec![a], kind.unwrap_or(all_time()), t, false),
                        mk(QueryFunction::DetectActivity, vec![], follow, None, false),
                    ],
                )
            }
        },
    };
    GrammarCase { category, question, specs }
}

/// `per_category` grammar questions for each of the six categories.
pub fn grammar_questions(lexicon: &Lexicon, per_category: usize, seed: u64) -> Vec<GrammarCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QuestionCategory::ALL
        .iter()
        .flat_map(|c| (0..per_category).map(|_| grammar_question(&mut rng, lexicon, *c)).collect::<Vec<_>>())
        .collect()
}

fn minutes_text(total: u64) -> String {
    let unit = |n: u64, one: &str, many: &str| format!("{n} {}", if n == 1 { one } else { many });
    if total < 60 {
        unit(total, "minute", "minutes")
    } else {
        format!("{} and {}", unit(total / 60, "hour", "hours"), unit(total % 60, "minute", "minutes"))
    }
}

const WEEKDAY_NAMES: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

/// Ground-truth short and full answers for a case, or `None` when the
/// question presupposes something that did not happen (a missing anchor).
pub fn truth_answer(case: &GrammarCase, windows: &[SensorWindow], now: i64) -> Option<(String, String)> {
    let values = oracle::run(&case.specs, windows, &SYNTH_LABELS, now)?;
    let duration = |v: &ContextValues| match v {
        ContextValues::Duration { minutes, .. } => *minutes,
        _ => 0,
    };
    match case.category {
        QuestionCategory::TimeCompare => {
            let (a, b) = (&case.specs[0].contexts[0], &case.specs[0].contexts[1]);
            let (ma, mb) = (duration(&values[0][0]), duration(&values[0][1]));
            let (w, l, mw, ml) = if mb > ma { (b, a, mb, ma) } else { (a, b, ma, mb) };
            let full = if ma == mb {
                format!("You spent as much time {a} as {b} ({} each).", minutes_text(ma))
            } else {
                format!("You spent more time {w} ({}) than {l} ({}).", minutes_text(mw), minutes_text(ml))
            };
            Some((w.clone(), full))
        }
        QuestionCategory::DayQuery => {
            let bounds = windows.first().map(|f| (f.timestamp, windows.last().unwrap().timestamp));
            let days = oracle::block_days(&case.specs[0], now, bounds);
            let mins: Vec<u64> = values[0].iter().map(duration).collect();
            if mins.is_empty() {
                return None;
            }
            let mut best = 0;
            for i in 1..mins.len() {
                if mins[i] > mins[best] {
                    best = i;
                }
            }
            let name = WEEKDAY_NAMES[oracle::weekday_index(days[best]) as usize].to_string();
            let full = format!("You spent the most time {} on {name} ({}).", case.specs[0].contexts[0], minutes_text(mins[best]));
            Some((name, full))
        }
        QuestionCategory::TimeQuery => {
            let m = duration(&values[0][0]);
            let short = minutes_text(m);
            Some((short.clone(), format!("You spent {short} {}.", case.specs[0].contexts[0])))
        }
        QuestionCategory::Counting => match &values[0][0] {
            ContextValues::Frequency { context, count } => {
                let short = format!("{count} {}", if *count == 1 { "time" } else { "times" });
                Some((short.clone(), format!("You were {context} {short}.")))
            }
            ContextValues::Days { context, days, total_days } => {
                let short = format!("{days} {}", if *days == 1 { "day" } else { "days" });
                Some((short.clone(), format!("You were {context} on {short} out of the last {total_days}.")))
            }
            _ => None,
        },
        QuestionCategory::Existence => {
            let m = duration(&values[0][0]);
            let c = &case.specs[0].contexts[0];
            if m > 0 {
                Some(("Yes".into(), format!("Yes, you spent {} {c}.", minutes_text(m))))
            } else {
                Some(("No".into(), format!("No, {c} was not detected.")))
            }
        }
        QuestionCategory::ActionQuery => {
            let ContextValues::Activity { labels } = values.last()?.first()? else {
                return None;
            };
            match labels.first() {
                Some(top) => Some((top.label.clone(), format!("You were mostly {} for {}.", top.label, minutes_text(top.minutes)))),
                None => Some(("No activity detected".into(), "No activity detected.".into())),
            }
        }
    }
}

fn distractors(rng: &mut ChaCha8Rng, category: QuestionCategory, truth: &str) -> Vec<String> {
    let mut pool: Vec<String> = match category {
        QuestionCategory::DayQuery => WEEKDAY_NAMES.iter().map(|s| s.to_string()).collect(),
        QuestionCategory::Existence => ["Yes", "No", "Not recorded", "Only once"].map(String::from).to_vec(),
        QuestionCategory::TimeCompare | QuestionCategory::ActionQuery => {
            let mut v: Vec<String> = SYNTH_LABELS.iter().map(|s| s.to_string()).collect();
            v.push("No activity detected".into());
            v
        }
        QuestionCategory::TimeQuery => (0..12).map(|_| minutes_text(rng.random_range(0..600))).collect(),
        QuestionCategory::Counting => {
            let unit = truth.split(' ').nth(1).unwrap_or("times").trim_end_matches('s').to_string();
            (0..15u64).map(|n| format!("{n} {unit}{}", if n == 1 { "" } else { "s" })).collect()
        }
    };
    pool.retain(|p| p != truth);
    pool.dedup();
    pool.shuffle(rng);
    pool.truncate(3);
    pool
}

/// A QA suite over `timeline` with `per_category` records per category.
/// Each record's `now` is midday-to-evening on one of the last seven days.
pub fn qa_suite(timeline: &Timeline, lexicon: &Lexicon, per_category: usize, seed: u64) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<String> = timeline.users().into_iter().map(String::from).collect();
    let mut out = Vec::new();
    for category in QuestionCategory::ALL {
        let mut made = 0;
        let mut attempts = 0;
        while made < per_category && attempts < per_category * 50 {
            attempts += 1;
            let user = users.choose(&mut rng).unwrap().clone();
            let windows = timeline.user_windows(&user);
            let first_day = windows[0].timestamp.div_euclid(86_400);
            let last_day = windows.last().unwrap().timestamp.div_euclid(86_400);
            let day = last_day - rng.random_range(0..(last_day - first_day + 1).min(7));
            let now = day * 86_400 + rng.random_range(12 * 3600..23 * 3600);
            let case = grammar_question(&mut rng, lexicon, category);
            let Some((short, full)) = truth_answer(&case, windows, now) else {
                continue;
            };
            let mut choices = distractors(&mut rng, category, &short);
            let (choices, correct) = if choices.len() == 3 {
                let at = rng.random_range(0..4);
                choices.insert(at, short.clone());
                (Some(choices), Some(at))
            } else {
                (None, None)
            };
            out.push(QaRecord {
                question: case.question,
                full_answer: full,
                short_answer: short,
                choices,
                correct_choice: correct,
                user_id: user,
                now,
                category: Some(category.name().to_string()),
            });
            made += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_cover_the_day() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for wd in WEEKDAYS {
            for _ in 0..20 {
                let p = day_plan(&mut rng, wd);
                assert_eq!(p.len(), 1440);
                assert!(p[0].contains("sleeping") && p[1439].contains("sleeping"));
                for set in &p {
                    assert!(set.iter().all(|l| SYNTH_LABELS.contains(&l.as_str())));
                }
            }
        }
    }

    #[test]
    fn generated_timeline_shape() {
        let cfg = SynthConfig { users: 2, days: 3, ..Default::default() };
        let tl = generate_timeline(&cfg);
        assert_eq!(tl.len(), 2 * 3 * 1440);
        assert_eq!(tl.users(), vec!["user1", "user2"]);
        assert_eq!(tl.windows[0].timestamp, day_number(cfg.start) * 86_400);
        assert_eq!(generate_timeline(&cfg), tl);
    }

    #[test]
    fn oracle_calendar_matches_chrono() {
        for d in -1000..1000i64 {
            let date = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap() + chrono::Duration::days(d);
            assert_eq!(oracle::weekday_index(d), date.weekday().num_days_from_monday() as i64);
        }
    }

    #[test]
    fn grammar_questions_are_deterministic() {
        let lx = Lexicon::with_default_synonyms(&synth_vocabulary());
        let a = grammar_questions(&lx, 5, 3);
        assert_eq!(a.len(), 30);
        assert_eq!(a, grammar_questions(&lx, 5, 3));
    }

    #[test]
    fn qa_suite_has_every_category() {
        let tl = generate_timeline(&SynthConfig { users: 1, days: 8, ..Default::default() });
        let lx = Lexicon::with_default_synonyms(&synth_vocabulary());
        let suite = qa_suite(&tl, &lx, 10, 5);
        assert_eq!(suite.len(), 60);
        for r in &suite {
            r.validate().unwrap();
            assert!(!r.short_answer.is_empty());
        }
    }
}
