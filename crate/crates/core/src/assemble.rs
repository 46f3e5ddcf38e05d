//! Answer assembly: deterministic templates, the answer prompt, and the
//! model path with template fallback.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::weekday_name;
use crate::decompose::QuestionCategory;
use crate::gateway::{ChatMessage, Gateway};
use crate::query::{format_minutes, ContextValues, SensorContext, SpecResult};
use chrono::Datelike;

#[derive(Debug, Error, PartialEq)]
pub enum AssembleError {
    #[error("no query contexts to answer from")]
    NoContexts,
    #[error("{category} answer cannot be built from these results: {detail}")]
    PayloadMismatch { category: &'static str, detail: String },
    #[error("temperature must be within [0, 2], got {0}")]
    InvalidTemperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Templates,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerBundle {
    pub full_answer: String,
    pub short_answer: String,
    pub contexts_used: Vec<SensorContext>,
    pub source: AnswerSource,
    /// Set when the model path failed and this is the template fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_tokens: 1024,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), AssembleError> {
        if (0.0..=2.0).contains(&self.temperature) {
            Ok(())
        } else {
            Err(AssembleError::InvalidTemperature(self.temperature))
        }
    }
}

pub fn build_answer_prompt(contexts: &[SensorContext], question: &str) -> Result<String, AssembleError> {
    if contexts.is_empty() {
        return Err(AssembleError::NoContexts);
    }
    let joined = contexts.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" ");
    Ok(format!(
        "Answer the question based on the context below. Context: {joined} Question: {question} Response:"
    ))
}

fn all_contexts(results: &[SpecResult]) -> Vec<SensorContext> {
    results.iter().flat_map(|r| r.contexts.iter().cloned()).collect()
}

fn mismatch(category: QuestionCategory, detail: impl Into<String>) -> AssembleError {
    AssembleError::PayloadMismatch {
        category: category.name(),
        detail: detail.into(),
    }
}

fn durations(contexts: &[SensorContext]) -> Vec<(&str, u64, &SensorContext)> {
    contexts
        .iter()
        .filter_map(|c| match &c.values {
            ContextValues::Duration { context, minutes } => Some((context.as_str(), *minutes, c)),
            _ => None,
        })
        .collect()
}

fn with_scope(parts: &[&str]) -> String {
    let s = parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join(" ");
    format!("{s}.")
}

fn plural(n: u64, one: &str, many: &str) -> String {
    format!("{n} {}", if n == 1 { one } else { many })
}

/// Short answer (1-2 key words) and full sentence for a category.
pub fn assemble_template(
    category: QuestionCategory,
    results: &[SpecResult],
    _question: &str,
) -> Result<AnswerBundle, AssembleError> {
    let contexts = all_contexts(results);
    if contexts.is_empty() {
        return Err(AssembleError::NoContexts);
    }
    let (short, full) = match category {
        QuestionCategory::TimeCompare => {
            let d = durations(&contexts);
            if d.len() != 2 {
                return Err(mismatch(category, format!("expected 2 durations, got {}", d.len())));
            }
            let (a, b) = (d[0], d[1]);
            let scope = a.2.scope.as_str();
            if b.1 > a.1 {
                let full = with_scope(&[
                    &format!("You spent more time {} ({}) than {} ({})", b.0, format_minutes(b.1), a.0, format_minutes(a.1)),
                    scope,
                ]);
                (b.0.to_string(), full)
            } else if a.1 > b.1 {
                let full = with_scope(&[
                    &format!("You spent more time {} ({}) than {} ({})", a.0, format_minutes(a.1), b.0, format_minutes(b.1)),
                    scope,
                ]);
                (a.0.to_string(), full)
            } else {
                let full = with_scope(&[
                    &format!("You spent as much time {} as {} ({} each)", a.0, b.0, format_minutes(a.1)),
                    scope,
                ]);
                (a.0.to_string(), full)
            }
        }
        QuestionCategory::DayQuery => {
            let mut d: Vec<_> = durations(&contexts)
                .into_iter()
                .filter_map(|(c, m, ctx)| ctx.day.map(|day| (day, c, m)))
                .collect();
            if d.is_empty() {
                return Err(mismatch(category, "no per-day durations"));
            }
            d.sort_by_key(|x| x.0);
            // maximum minutes; the earliest day wins ties
            let best = d.iter().fold(d[0], |best, x| if x.2 > best.2 { *x } else { best });
            let day = weekday_name(best.0.weekday()).to_string();
            let full = format!("You spent the most time {} on {day} ({}).", best.1, format_minutes(best.2));
            (day, full)
        }
        QuestionCategory::TimeQuery => {
            let d = durations(&contexts);
            if d.is_empty() {
                return Err(mismatch(category, "no duration"));
            }
            let total: u64 = d.iter().map(|x| x.1).sum();
            let short = format_minutes(total);
            let full = with_scope(&["You spent", &short, d[0].0, &d[0].2.scope]);
            (short, full)
        }
        QuestionCategory::Counting => match &contexts[0].values {
            ContextValues::Frequency { context, count } => {
                let short = plural(*count, "time", "times");
                (short.clone(), with_scope(&["You were", context, &short, &contexts[0].scope]))
            }
            ContextValues::Days {
                context,
                days,
                total_days,
            } => {
                let short = plural(*days, "day", "days");
                (short.clone(), format!("You were {context} on {short} out of the last {total_days}."))
            }
            _ => return Err(mismatch(category, "expected a frequency or day count")),
        },
        QuestionCategory::Existence => {
            let d = durations(&contexts);
            if d.is_empty() {
                return Err(mismatch(category, "no duration"));
            }
            let total: u64 = d.iter().map(|x| x.1).sum();
            let scope = d[0].2.scope.as_str();
            if total > 0 {
                (
                    "Yes".to_string(),
                    with_scope(&["Yes, you spent", &format_minutes(total), d[0].0, scope]),
                )
            } else {
                ("No".to_string(), with_scope(&["No,", d[0].0, "was not detected", scope]))
            }
        }
        QuestionCategory::ActionQuery => {
            let last = contexts
                .iter()
                .rev()
                .find(|c| matches!(c.values, ContextValues::Activity { .. }))
                .ok_or_else(|| mismatch(category, "no activity detection"))?;
            let ContextValues::Activity { labels } = &last.values else {
                unreachable!()
            };
            match labels.first() {
                None => {
                    let short = "No activity detected".to_string();
                    (short.clone(), with_scope(&[&short, &last.scope]))
                }
                Some(top) => {
                    let mut full = with_scope(&[
                        &format!("You were mostly {}", top.label),
                        &last.scope,
                        &format!("for {}", format_minutes(top.minutes)),
                    ]);
                    if labels.len() > 1 {
                        let rest = labels[1..]
                            .iter()
                            .map(|l| format!("{} ({})", l.label, format_minutes(l.minutes)))
                            .collect::<Vec<_>>()
                            .join(", ");
                        full.push_str(&format!(" Other activities: {rest}."));
                    }
                    (top.label.clone(), full)
                }
            }
        }
    };
    Ok(AnswerBundle {
        full_answer: full,
        short_answer: short,
        contexts_used: contexts,
        source: AnswerSource::Templates,
        error: None,
    })
}

static WEEKDAY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(monday|tuesday|wednesday|thursday|friday|saturday|sunday)\b").unwrap());
static DURATION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b\d+ hours? and \d+ minutes?\b|\b\d+ hours?\b|\b\d+ minutes?\b").unwrap());
static YES_NO_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());
static COUNT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b\d+ (times?|days?)\b").unwrap());

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c.flat_map(char::to_lowercase)).collect(),
        None => String::new(),
    }
}

/// Earliest vocabulary phrase in `text` (word-bounded, case-insensitive);
/// the longer phrase wins at equal positions.
fn first_phrase(text: &str, phrases: &[String]) -> Option<String> {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, usize, &String)> = None;
    for p in phrases {
        let re = Regex::new(&format!(r"\b{}\b", regex::escape(&p.to_lowercase()))).ok()?;
        if let Some(m) = re.find(&lower) {
            let cand = (m.start(), usize::MAX - p.len(), p);
            if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                best = Some(cand);
            }
        }
    }
    best.map(|b| b.2.clone())
}

fn first_tokens(text: &str, n: usize) -> String {
    text.split_whitespace()
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .to_string()
}

/// Category-keyed extraction of the 1-2 key words of a full answer.
pub fn extract_short_answer(full: &str, category: QuestionCategory, phrases: &[String]) -> String {
    let found = match category {
        QuestionCategory::DayQuery => WEEKDAY_RE.find(full).map(|m| capitalize(m.as_str())),
        QuestionCategory::TimeQuery => DURATION_RE.find(full).map(|m| m.as_str().to_lowercase()),
        QuestionCategory::Existence => YES_NO_RE.find(full).map(|m| capitalize(m.as_str())),
        QuestionCategory::Counting => COUNT_RE.find(full).map(|m| m.as_str().to_lowercase()),
        QuestionCategory::TimeCompare | QuestionCategory::ActionQuery => first_phrase(full, phrases),
    };
    found.unwrap_or_else(|| first_tokens(full, 3))
}

/// Ask the model; on any gateway failure fall back to the template answer
/// with the error attached.
pub fn assemble_llm(
    gateway: &Gateway,
    category: QuestionCategory,
    results: &[SpecResult],
    question: &str,
    gen: &GenConfig,
    phrases: &[String],
) -> Result<AnswerBundle, AssembleError> {
    gen.validate()?;
    let contexts = all_contexts(results);
    let prompt = build_answer_prompt(&contexts, question)?;
    match gateway.complete(&[ChatMessage::user(prompt)], gen.temperature, gen.max_tokens) {
        Ok(text) if !text.trim().is_empty() => {
            let full = text.trim().to_string();
            let short = extract_short_answer(&full, category, phrases);
            Ok(AnswerBundle {
                full_answer: full,
                short_answer: short,
                contexts_used: contexts,
                source: AnswerSource::Llm,
                error: None,
            })
        }
        Ok(_) => fallback(category, results, question, "empty completion".into()),
        Err(e) => fallback(category, results, question, e.to_string()),
    }
}

fn fallback(
    category: QuestionCategory,
    results: &[SpecResult],
    question: &str,
    error: String,
) -> Result<AnswerBundle, AssembleError> {
    let mut b = assemble_template(category, results, question)?;
    b.error = Some(error);
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{completion_json, GatewayConfig, GatewayMode, HttpResponse, MockResponder, MockScript, ReplayTransport, TransportFailure};
    use crate::query::{LabelMinutes, QueryFunction, QuerySpec, RelativeSpan, TimeScope};
    use chrono::NaiveDate;
    use std::sync::Arc;

    fn dur(context: &str, minutes: u64, scope: &str, day: Option<NaiveDate>) -> SensorContext {
        SensorContext::new(
            QueryFunction::CalculateDuration,
            scope.into(),
            day,
            ContextValues::Duration { context: context.into(), minutes },
        )
    }

    fn result(contexts: Vec<SensorContext>) -> Vec<SpecResult> {
        vec![SpecResult {
            spec: QuerySpec {
                function: contexts[0].function,
                contexts: vec![],
                scope: TimeScope::span(RelativeSpan::AllTime),
                per_day: false,
            },
            contexts,
            anchor: None,
        }]
    }

    fn phrases() -> Vec<String> {
        ["at home", "cooking", "eating", "sitting", "standing", "walking"].map(String::from).to_vec()
    }

    fn week(minutes: [u64; 7]) -> Vec<SensorContext> {
        let mon = NaiveDate::from_ymd_opt(2015, 9, 21).unwrap();
        (0..7)
            .map(|i| dur("eating", minutes[i], "", Some(mon + chrono::Duration::days(i as i64))))
            .collect()
    }

    #[test]
    fn answer_prompt_template() {
        let c = [dur("sitting", 5, "today", None)];
        assert_eq!(
            build_answer_prompt(&c, "How long did I sit today?").unwrap(),
            "Answer the question based on the context below. Context: You spent 5 minutes sitting today. \
             Question: How long did I sit today? Response:"
        );
        let two = [dur("a", 1, "", None), dur("b", 2, "", None)];
        assert!(build_answer_prompt(&two, "q").unwrap().contains("Context: You spent 1 minute a. You spent 2 minutes b. Question"));
        assert_eq!(build_answer_prompt(&[], "q"), Err(AssembleError::NoContexts));
    }

    #[test]
    fn category_answers() {
        let r = result(vec![dur("sitting", 300, "", None), dur("standing", 120, "", None)]);
        assert_eq!(assemble_template(QuestionCategory::TimeCompare, &r, "").unwrap().short_answer, "sitting");
        let r = result(vec![dur("sitting", 100, "", None), dur("standing", 120, "", None)]);
        assert_eq!(assemble_template(QuestionCategory::TimeCompare, &r, "").unwrap().short_answer, "standing");
        let r = result(vec![dur("sitting", 7, "", None), dur("standing", 7, "", None)]);
        assert_eq!(assemble_template(QuestionCategory::TimeCompare, &r, "").unwrap().short_answer, "sitting");

        let r = result(week([10, 20, 5, 0, 30, 45, 3]));
        assert_eq!(assemble_template(QuestionCategory::DayQuery, &r, "").unwrap().short_answer, "Saturday");
        let r = result(week([10, 45, 5, 0, 30, 45, 3]));
        assert_eq!(assemble_template(QuestionCategory::DayQuery, &r, "").unwrap().short_answer, "Tuesday");

        let r = result(vec![dur("cooking", 135, "yesterday", None)]);
        let b = assemble_template(QuestionCategory::TimeQuery, &r, "").unwrap();
        assert_eq!(b.short_answer, "2 hours and 15 minutes");
        assert_eq!(b.full_answer, "You spent 2 hours and 15 minutes cooking yesterday.");

        let r = result(vec![dur("cooking", 0, "", None)]);
        assert_eq!(assemble_template(QuestionCategory::Existence, &r, "").unwrap().short_answer, "No");
        let r = result(vec![dur("cooking", 1, "", None)]);
        assert_eq!(assemble_template(QuestionCategory::Existence, &r, "").unwrap().short_answer, "Yes");

        let f = SensorContext::new(QueryFunction::CountingFrequency, "today".into(), None, ContextValues::Frequency { context: "walking".into(), count: 3 });
        assert_eq!(assemble_template(QuestionCategory::Counting, &result(vec![f]), "").unwrap().short_answer, "3 times");
        let d = SensorContext::new(QueryFunction::CountingDays, "last week".into(), None, ContextValues::Days { context: "at home".into(), days: 1, total_days: 7 });
        let b = assemble_template(QuestionCategory::Counting, &result(vec![d]), "").unwrap();
        assert_eq!(b.short_answer, "1 day");
        assert_eq!(b.full_answer, "You were at home on 1 day out of the last 7.");

        let a = SensorContext::new(
            QueryFunction::DetectActivity,
            "afterwards".into(),
            None,
            ContextValues::Activity {
                labels: vec![
                    LabelMinutes { label: "walking".into(), minutes: 30 },
                    LabelMinutes { label: "cooking".into(), minutes: 3 },
                ],
            },
        );
        let b = assemble_template(QuestionCategory::ActionQuery, &result(vec![a]), "").unwrap();
        assert_eq!(b.short_answer, "walking");
        assert_eq!(b.full_answer, "You were mostly walking afterwards for 30 minutes. Other activities: cooking (3 minutes).");
        let empty = SensorContext::new(QueryFunction::DetectActivity, "".into(), None, ContextValues::Activity { labels: vec![] });
        let b = assemble_template(QuestionCategory::ActionQuery, &result(vec![empty]), "").unwrap();
        assert_eq!(b.short_answer, "No activity detected");
    }

    #[test]
    fn payload_mismatch_is_an_error() {
        let r = result(vec![dur("sitting", 1, "", None)]);
        assert!(matches!(
            assemble_template(QuestionCategory::TimeCompare, &r, ""),
            Err(AssembleError::PayloadMismatch { .. })
        ));
        assert!(matches!(
            assemble_template(QuestionCategory::Counting, &r, ""),
            Err(AssembleError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn extraction_examples() {
        let p = phrases();
        assert_eq!(
            extract_short_answer("You spent 2 hours and 15 minutes cooking.", QuestionCategory::TimeQuery, &p),
            "2 hours and 15 minutes"
        );
        assert_eq!(extract_short_answer("Yes, you had a meeting.", QuestionCategory::Existence, &p), "Yes");
        assert_eq!(extract_short_answer("It was saturday.", QuestionCategory::DayQuery, &p), "Saturday");
        assert_eq!(extract_short_answer("Mostly 4 times a day", QuestionCategory::Counting, &p), "4 times");
        assert_eq!(
            extract_short_answer("Standing beat sitting today", QuestionCategory::TimeCompare, &p),
            "standing"
        );
        assert_eq!(
            extract_short_answer("I really cannot tell, sorry.", QuestionCategory::DayQuery, &p),
            "I really cannot"
        );
    }

    #[test]
    fn self_consistency_on_template_answers() {
        let p = phrases();
        let cases: Vec<(QuestionCategory, Vec<SpecResult>)> = vec![
            (QuestionCategory::TimeCompare, result(vec![dur("sitting", 61, "last week", None), dur("standing", 600, "last week", None)])),
            (QuestionCategory::DayQuery, result(week([0, 0, 0, 0, 0, 0, 0]))),
            (QuestionCategory::TimeQuery, result(vec![dur("walking", 0, "today", None)])),
            (QuestionCategory::Existence, result(vec![dur("eating", 59, "on Monday", None)])),
        ];
        for (c, r) in cases {
            let b = assemble_template(c, &r, "").unwrap();
            assert_eq!(extract_short_answer(&b.full_answer, c, &p), b.short_answer, "{}", b.full_answer);
        }
    }

    #[test]
    fn llm_path_and_fallback() {
        let r = result(vec![dur("cooking", 42, "today", None)]);
        let script = MockScript::new([(r"Context: You spent 42 minutes", "You cooked for 42 minutes today.")]).unwrap();
        let g = Gateway::mock(MockResponder::Scripted(script));
        let b = assemble_llm(&g, QuestionCategory::TimeQuery, &r, "How long did I cook today?", &GenConfig::default(), &phrases()).unwrap();
        assert_eq!(b.source, AnswerSource::Llm);
        assert_eq!(b.short_answer, "42 minutes");

        // SAFETY: unique variable for this test
        unsafe { std::env::set_var("TLQA_TEST_KEY_ASSEMBLE", "k") };
        let t = Arc::new(ReplayTransport::new(vec![Err(TransportFailure::Timeout)]));
        let live = Gateway::live(
            GatewayConfig {
                mode: GatewayMode::Live,
                base_url: "http://example.invalid".into(),
                api_key_env: "TLQA_TEST_KEY_ASSEMBLE".into(),
                ..Default::default()
            },
            t,
        )
        .unwrap();
        let b = assemble_llm(&live, QuestionCategory::TimeQuery, &r, "q", &GenConfig::default(), &phrases()).unwrap();
        assert_eq!(b.source, AnswerSource::Templates);
        assert!(b.error.is_some());
        assert_eq!(b.short_answer, "42 minutes");

        let ok = Arc::new(ReplayTransport::new(vec![Ok(HttpResponse { status: 200, body: completion_json("fine") })]));
        let live = Gateway::live(
            GatewayConfig {
                mode: GatewayMode::Live,
                base_url: "http://example.invalid".into(),
                api_key_env: "TLQA_TEST_KEY_ASSEMBLE".into(),
                ..Default::default()
            },
            ok.clone(),
        )
        .unwrap();
        let gen = GenConfig { temperature: 1.3, max_tokens: 77 };
        assemble_llm(&live, QuestionCategory::TimeQuery, &r, "q", &gen, &phrases()).unwrap();
        let sent: serde_json::Value = serde_json::from_str(ok.last_body.lock().unwrap().as_deref().unwrap()).unwrap();
        assert_eq!(sent["temperature"], 1.3);
        assert_eq!(sent["max_tokens"], 77);
        assert_eq!(
            assemble_llm(&live, QuestionCategory::TimeQuery, &r, "q", &GenConfig { temperature: 2.5, max_tokens: 1 }, &phrases()),
            Err(AssembleError::InvalidTemperature(2.5))
        );
    }
}
