//! Question decomposition: a rule grammar, the marker-based parser for model
//! output, and the few-shot prompt builder.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{parse_weekday, TimeOfDay};
use crate::encoders::tokenize;
use crate::ingest::LabelVocabulary;
use crate::query::{QueryFunction, QuerySpec, RelativeSpan, ScopeKind, TimeScope};

#[derive(Debug, Error, PartialEq)]
pub enum DecomposeError {
    #[error("no known context phrase in question: {0:?}")]
    NoContext(String),
    #[error("expected two context phrases to compare, found {0}")]
    CompareArity(usize),
    #[error("unbalanced marker {marker:?} at byte {at}")]
    UnbalancedMarker { marker: String, at: usize },
    #[error("unknown query function {0:?}")]
    UnknownFunction(String),
    #[error("marked {0} appears before any function")]
    Unanchored(String),
    #[error("{0} needs at least one context")]
    MissingContext(String),
    #[error("no marked function in text")]
    EmptyExtraction,
    #[error("context phrase {0:?} is not covered by the vocabulary")]
    UnknownContext(String),
    #[error("cannot parse date scope {0:?}")]
    BadScope(String),
    #[error("cannot parse time of day {0:?}")]
    BadTimeOfDay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionCategory {
    TimeCompare,
    DayQuery,
    TimeQuery,
    Counting,
    Existence,
    ActionQuery,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 6] = [
        QuestionCategory::TimeCompare,
        QuestionCategory::DayQuery,
        QuestionCategory::TimeQuery,
        QuestionCategory::Counting,
        QuestionCategory::Existence,
        QuestionCategory::ActionQuery,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            QuestionCategory::TimeCompare => "TimeCompare",
            QuestionCategory::DayQuery => "DayQuery",
            QuestionCategory::TimeQuery => "TimeQuery",
            QuestionCategory::Counting => "Counting",
            QuestionCategory::Existence => "Existence",
            QuestionCategory::ActionQuery => "ActionQuery",
        }
    }

    fn file_stem(&self) -> &'static str {
        match self {
            QuestionCategory::TimeCompare => "time_compare",
            QuestionCategory::DayQuery => "day_query",
            QuestionCategory::TimeQuery => "time_query",
            QuestionCategory::Counting => "counting",
            QuestionCategory::Existence => "existence",
            QuestionCategory::ActionQuery => "action_query",
        }
    }
}

/// Pluggable question-type classifier.
pub trait CategoryClassifier: Send + Sync {
    fn classify(&self, question: &str) -> QuestionCategory;
}

/// Keyword rules, first match wins.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordClassifier;

impl CategoryClassifier for KeywordClassifier {
    fn classify(&self, question: &str) -> QuestionCategory {
        classify_category(question)
    }
}

pub fn classify_category(question: &str) -> QuestionCategory {
    let q = tokenize(question).join(" ");
    let has = |p: &str| format!(" {q} ").contains(&format!(" {p} "));
    let starts = |p: &str| q == p || q.starts_with(&format!("{p} "));
    let more_or = q
        .split(' ')
        .position(|t| t == "more")
        .is_some_and(|i| q.split(' ').skip(i + 1).any(|t| t == "or"));
    if more_or {
        QuestionCategory::TimeCompare
    } else if has("which day") || has("what day") {
        QuestionCategory::DayQuery
    } else if has("how long") || has("how much time") {
        QuestionCategory::TimeQuery
    } else if has("how often") || has("how many times") || has("how many days") {
        QuestionCategory::Counting
    } else if starts("did i") || starts("was i") || starts("have i") {
        QuestionCategory::Existence
    } else if has("what did i do") || has("what was i doing") {
        QuestionCategory::ActionQuery
    } else {
        QuestionCategory::TimeQuery
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionSource {
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub category: QuestionCategory,
    pub specs: Vec<QuerySpec>,
    pub reasoning: Option<String>,
    pub source: DecompositionSource,
}

pub const DEFAULT_SYNONYMS: &str = include_str!("../../../synonyms.tsv");

/// Parse `surface<TAB>phrase` lines; blank lines and `#` comments are skipped.
pub fn parse_synonyms(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| {
            let (a, b) = l.split_once('\t')?;
            Some((a.trim().to_lowercase(), b.trim().to_string()))
        })
        .collect()
}

/// Vocabulary phrases and synonyms, matched on word tokens.
#[derive(Debug, Clone)]
pub struct Lexicon {
    phrases: Vec<String>,
    /// `(tokens, canonical phrase)`, longest first.
    entries: Vec<(Vec<String>, String)>,
    tokens: BTreeSet<String>,
}

impl Lexicon {
    /// Synonyms pointing outside the vocabulary are dropped.
    pub fn new(vocab: &LabelVocabulary, synonyms: &[(String, String)]) -> Self {
        let phrases = vocab.phrases().to_vec();
        let mut entries: Vec<(Vec<String>, String)> = phrases.iter().map(|p| (tokenize(p), p.clone())).collect();
        for (surface, target) in synonyms {
            if vocab.contains(target) {
                entries.push((tokenize(surface), target.clone()));
            }
        }
        entries.retain(|(t, _)| !t.is_empty());
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        let tokens = phrases.iter().flat_map(|p| tokenize(p)).collect();
        Self { phrases, entries, tokens }
    }

    pub fn with_default_synonyms(vocab: &LabelVocabulary) -> Self {
        Self::new(vocab, &parse_synonyms(DEFAULT_SYNONYMS))
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Surface forms that map to `phrase`, the phrase itself first.
    pub fn surface_forms(&self, phrase: &str) -> Vec<String> {
        let mut out = vec![phrase.to_string()];
        for (t, p) in &self.entries {
            let s = t.join(" ");
            if p == phrase && !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Canonical phrase for a marked context: a vocabulary phrase, a synonym,
    /// or a phrase whose tokens all occur in the vocabulary.
    pub fn resolve(&self, phrase: &str) -> Result<String, DecomposeError> {
        let toks = tokenize(phrase);
        if let Some((_, p)) = self.entries.iter().find(|(t, _)| *t == toks) {
            return Ok(p.clone());
        }
        if !toks.is_empty() && toks.iter().all(|t| self.tokens.contains(t)) {
            return Ok(toks.join(" "));
        }
        Err(DecomposeError::UnknownContext(phrase.to_string()))
    }

    /// Left-to-right longest matches over the unmasked tokens.
    fn find(&self, tokens: &[String], used: &[bool]) -> Vec<String> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.entries.iter().find(|(t, _)| {
                i + t.len() <= tokens.len() && (0..t.len()).all(|k| !used[i + k] && tokens[i + k] == t[k])
            });
            match hit {
                Some((t, p)) => {
                    out.push(p.clone());
                    i += t.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Parsed date and time-of-day phrases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct ScopeParts {
    kind: Option<ScopeKind>,
    time_of_day: Option<TimeOfDay>,
    per_day: bool,
}

fn tod_word(s: &str) -> Option<TimeOfDay> {
    match s {
        "morning" => Some(TimeOfDay::Morning),
        "afternoon" => Some(TimeOfDay::Afternoon),
        "evening" => Some(TimeOfDay::Evening),
        "night" => Some(TimeOfDay::Night),
        _ => None,
    }
}

/// Scan `tokens` for scope phrases, marking consumed tokens in `used`.
/// The first date phrase and the first time-of-day phrase win.
fn extract_scope(tokens: &[String], used: &mut [bool]) -> ScopeParts {
    let mut parts = ScopeParts::default();
    let t = |i: usize| tokens.get(i).map(String::as_str).unwrap_or("");
    let mut i = 0;
    while i < tokens.len() {
        let take = |n: usize, used: &mut [bool]| {
            used[i..i + n].iter_mut().for_each(|u| *u = true);
            n
        };
        let step = match (t(i), t(i + 1), t(i + 2)) {
            ("each" | "every", "day", _) if !parts.per_day => {
                parts.per_day = true;
                take(2, used)
            }
            ("last", "week", _) if parts.kind.is_none() => {
                parts.kind = Some(ScopeKind::RelativeSpan { span: RelativeSpan::LastWeek });
                take(2, used)
            }
            ("yesterday", _, _) if parts.kind.is_none() => {
                parts.kind = Some(ScopeKind::RelativeSpan { span: RelativeSpan::Yesterday });
                take(1, used)
            }
            ("today", _, _) if parts.kind.is_none() => {
                parts.kind = Some(ScopeKind::RelativeSpan { span: RelativeSpan::Today });
                take(1, used)
            }
            ("overall" | "ever", _, _) if parts.kind.is_none() => {
                parts.kind = Some(ScopeKind::RelativeSpan { span: RelativeSpan::AllTime });
                take(1, used)
            }
            ("all", "time", _) if parts.kind.is_none() => {
                parts.kind = Some(ScopeKind::RelativeSpan { span: RelativeSpan::AllTime });
                take(2, used)
            }
            ("on" | "last", w, _) if parts.kind.is_none() && parse_weekday(w).is_some() => {
                parts.kind = Some(ScopeKind::NamedDay { weekday: parse_weekday(w).unwrap() });
                take(2, used)
            }
            (w, _, _) if parts.kind.is_none() && parse_weekday(w).is_some() => {
                parts.kind = Some(ScopeKind::NamedDay { weekday: parse_weekday(w).unwrap() });
                take(1, used)
            }
            ("in", "the", w) if parts.time_of_day.is_none() && tod_word(w).is_some() => {
                parts.time_of_day = tod_word(w);
                take(3, used)
            }
            ("at", "night", _) if parts.time_of_day.is_none() => {
                parts.time_of_day = Some(TimeOfDay::Night);
                take(2, used)
            }
            _ => 1,
        };
        i += step;
    }
    parts
}

/// Default scope when a question or marked tuple names none.
fn default_kind(function: QueryFunction) -> ScopeKind {
    match function {
        QueryFunction::CountingDays => ScopeKind::RelativeSpan { span: RelativeSpan::LastWeek },
        _ => ScopeKind::RelativeSpan { span: RelativeSpan::AllTime },
    }
}

fn spec(function: QueryFunction, contexts: Vec<String>, kind: ScopeKind, tod: Option<TimeOfDay>, per_day: bool) -> QuerySpec {
    QuerySpec {
        function,
        contexts,
        scope: TimeScope::new(kind).with_time_of_day(tod),
        per_day,
    }
}

/// Decompose with the rule grammar (see docs/grammar.md).
pub fn decompose_rules(question: &str, lexicon: &Lexicon) -> Result<DecompositionResult, DecomposeError> {
    decompose_rules_with(question, lexicon, &KeywordClassifier)
}

pub fn decompose_rules_with(
    question: &str,
    lexicon: &Lexicon,
    classifier: &dyn CategoryClassifier,
) -> Result<DecompositionResult, DecomposeError> {
    let category = classifier.classify(question);
    let tokens = tokenize(question);
    let mut used = vec![false; tokens.len()];
    let scope = extract_scope(&tokens, &mut used);
    let tod = scope.time_of_day;

    // chain keyword for action questions: "... after I <context>"
    let mut chain: Option<bool> = None;
    if category == QuestionCategory::ActionQuery {
        if let Some(i) = (0..tokens.len().saturating_sub(1))
            .find(|&i| !used[i] && (tokens[i] == "after" || tokens[i] == "before") && tokens[i + 1] == "i")
        {
            chain = Some(tokens[i] == "after");
            used[i] = true;
            used[i + 1] = true;
        }
    }
    let contexts = lexicon.find(&tokens, &used);
    let need_context = || {
        contexts
            .first()
            .cloned()
            .ok_or_else(|| DecomposeError::NoContext(question.to_string()))
    };

    let (specs, reasoning) = match category {
        QuestionCategory::TimeCompare => {
            if contexts.len() != 2 {
                if contexts.is_empty() {
                    return Err(DecomposeError::NoContext(question.to_string()));
                }
                return Err(DecomposeError::CompareArity(contexts.len()));
            }
            let kind = scope.kind.unwrap_or(default_kind(QueryFunction::CalculateDuration));
            (
                vec![spec(QueryFunction::CalculateDuration, contexts.clone(), kind, tod, false)],
                "Compare the total duration of two contexts.",
            )
        }
        QuestionCategory::DayQuery => {
            let c = need_context()?;
            let kind = scope.kind.unwrap_or(ScopeKind::RelativeSpan { span: RelativeSpan::LastWeek });
            (
                vec![spec(QueryFunction::CalculateDuration, vec![c], kind, tod, true)],
                "Compute the duration for each day and pick the largest.",
            )
        }
        QuestionCategory::TimeQuery | QuestionCategory::Existence => {
            let c = need_context()?;
            let kind = scope.kind.unwrap_or(default_kind(QueryFunction::CalculateDuration));
            let why = if category == QuestionCategory::Existence {
                "Existence follows from a non-zero duration."
            } else {
                "Compute the total duration of the context."
            };
            (vec![spec(QueryFunction::CalculateDuration, vec![c], kind, tod, false)], why)
        }
        QuestionCategory::Counting => {
            let c = need_context()?;
            let q = tokens.join(" ");
            let f = if q.contains("how many days") {
                QueryFunction::CountingDays
            } else {
                QueryFunction::CountingFrequency
            };
            let kind = scope.kind.unwrap_or(default_kind(f));
            (vec![spec(f, vec![c], kind, tod, false)], "Count occurrences of the context.")
        }
        QuestionCategory::ActionQuery => match chain {
            Some(after) => {
                let c = need_context()?;
                let kind = scope.kind.unwrap_or(default_kind(QueryFunction::DetectLastTime));
                let (anchor_fn, follow) = if after {
                    (QueryFunction::DetectLastTime, ScopeKind::AfterResult { result_ref: 0 })
                } else {
                    (QueryFunction::DetectFirstTime, ScopeKind::BeforeResult { result_ref: 0 })
                };
                (
                    vec![
                        spec(anchor_fn, vec![c], kind, tod, false),
                        spec(QueryFunction::DetectActivity, vec![], follow, None, false),
                    ],
                    "Locate the anchoring context, then detect activities relative to it.",
                )
            }
            None => {
                let kind = scope.kind.unwrap_or(default_kind(QueryFunction::DetectActivity));
                (
                    vec![spec(QueryFunction::DetectActivity, vec![], kind, tod, false)],
                    "Detect the activities in the requested time range.",
                )
            }
        },
    };
    Ok(DecompositionResult {
        category,
        specs,
        reasoning: Some(format!("{}: {reasoning}", category.name())),
        source: DecompositionSource::Rules,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Marked {
    Function(String),
    Context(String),
    Date(String),
    Tod(String),
}

const MARKERS: [(&str, &str); 4] = [("<<", ">>"), ("((", "))"), ("[[", "]]"), ("{{", "}}")];

fn scan_markers(text: &str) -> Result<Vec<Marked>, DecomposeError> {
    let mut out = Vec::new();
    let mut i = 0;
    let bytes = text.as_bytes();
    while i + 1 < bytes.len() {
        let pair = &text[i..i + 2];
        if let Some(k) = MARKERS.iter().position(|(o, _)| *o == pair) {
            let close = MARKERS[k].1;
            let body_start = i + 2;
            let end = text[body_start..]
                .find(close)
                .map(|e| body_start + e)
                .ok_or(DecomposeError::UnbalancedMarker { marker: pair.into(), at: i })?;
            let body = &text[body_start..end];
            if let Some(nested) = MARKERS.iter().find_map(|(o, c)| body.find(o).or_else(|| body.find(c))) {
                return Err(DecomposeError::UnbalancedMarker {
                    marker: pair.into(),
                    at: body_start + nested,
                });
            }
            let body = body.trim().to_string();
            out.push(match k {
                0 => Marked::Function(body),
                1 => Marked::Context(body),
                2 => Marked::Date(body),
                _ => Marked::Tod(body),
            });
            i = end + 2;
        } else if MARKERS.iter().any(|(_, c)| *c == pair) {
            return Err(DecomposeError::UnbalancedMarker { marker: pair.into(), at: i });
        } else {
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    Ok(out)
}

/// Parse a marked date scope such as `last week`, `on tuesday`,
/// `each day last week` or `after #1` (steps count from 1).
fn parse_date_marker(body: &str) -> Result<(ScopeKind, bool), DecomposeError> {
    let tokens = tokenize(body);
    let bad = || DecomposeError::BadScope(body.to_string());
    if tokens.len() == 2 && (tokens[0] == "after" || tokens[0] == "before") {
        let step: usize = tokens[1].parse().map_err(|_| bad())?;
        if step == 0 {
            return Err(bad());
        }
        let result_ref = step - 1;
        return Ok(if tokens[0] == "after" {
            (ScopeKind::AfterResult { result_ref }, false)
        } else {
            (ScopeKind::BeforeResult { result_ref }, false)
        });
    }
    let mut used = vec![false; tokens.len()];
    let parts = extract_scope(&tokens, &mut used);
    if used.iter().any(|u| !u) || parts.time_of_day.is_some() {
        return Err(bad());
    }
    let kind = match parts.kind {
        Some(k) => k,
        None if parts.per_day => ScopeKind::RelativeSpan { span: RelativeSpan::LastWeek },
        None => return Err(bad()),
    };
    Ok((kind, parts.per_day))
}

/// Parse marked model output into specs; tuples start at each function marker.
pub fn parse_llm_decomposition(
    text: &str,
    question: &str,
    lexicon: &Lexicon,
) -> Result<DecompositionResult, DecomposeError> {
    struct Partial {
        function: QueryFunction,
        contexts: Vec<String>,
        kind: Option<ScopeKind>,
        per_day: bool,
        tod: Option<TimeOfDay>,
    }
    let mut parts: Vec<Partial> = Vec::new();
    for m in scan_markers(text)? {
        if let Marked::Function(name) = &m {
            let function = QueryFunction::parse(name).ok_or_else(|| DecomposeError::UnknownFunction(name.clone()))?;
            parts.push(Partial {
                function,
                contexts: vec![],
                kind: None,
                per_day: false,
                tod: None,
            });
            continue;
        }
        let Some(cur) = parts.last_mut() else {
            let what = match m {
                Marked::Context(_) => "context",
                Marked::Date(_) => "date",
                _ => "time of day",
            };
            return Err(DecomposeError::Unanchored(what.into()));
        };
        match m {
            Marked::Context(c) => cur.contexts.push(lexicon.resolve(&c)?),
            Marked::Date(d) => {
                let (kind, per_day) = parse_date_marker(&d)?;
                cur.kind = Some(kind);
                cur.per_day = per_day;
            }
            Marked::Tod(t) => {
                let tod = TimeOfDay::parse(&t).ok_or(DecomposeError::BadTimeOfDay(t.clone()))?;
                cur.tod = Some(tod);
            }
            Marked::Function(_) => unreachable!(),
        }
    }
    if parts.is_empty() {
        return Err(DecomposeError::EmptyExtraction);
    }
    let mut specs = Vec::with_capacity(parts.len());
    for p in parts {
        if p.contexts.is_empty() && p.function != QueryFunction::DetectActivity {
            return Err(DecomposeError::MissingContext(p.function.name().into()));
        }
        let kind = p.kind.unwrap_or(default_kind(p.function));
        specs.push(spec(p.function, p.contexts, kind, p.tod, p.per_day));
    }
    let reasoning = text
        .split(['<', '(', '['])
        .next()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from);
    Ok(DecompositionResult {
        category: classify_category(question),
        specs,
        reasoning,
        source: DecompositionSource::Llm,
    })
}

/// One worked example: question, reasoning and marked decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolutionTemplate {
    pub category: QuestionCategory,
    pub question: String,
    pub reasoning: String,
    pub decomposition: String,
    /// The file contents, embedded verbatim in prompts.
    pub text: String,
}

impl SolutionTemplate {
    pub fn parse(category: QuestionCategory, text: &str) -> Option<SolutionTemplate> {
        let field = |name: &str| {
            text.lines()
                .find_map(|l| l.strip_prefix(name))
                .map(|v| v.trim().to_string())
        };
        Some(SolutionTemplate {
            category,
            question: field("Question:")?,
            reasoning: field("Reasoning:")?,
            decomposition: field("Decomposition:")?,
            text: text.trim_end().to_string(),
        })
    }
}

macro_rules! template_file {
    ($name:literal) => {
        include_str!(concat!("../../../templates/", $name, ".txt"))
    };
}

const TEMPLATE_FILES: [(&str, &str); 12] = [
    ("time_compare_1", template_file!("time_compare_1")),
    ("time_compare_2", template_file!("time_compare_2")),
    ("day_query_1", template_file!("day_query_1")),
    ("day_query_2", template_file!("day_query_2")),
    ("time_query_1", template_file!("time_query_1")),
    ("time_query_2", template_file!("time_query_2")),
    ("counting_1", template_file!("counting_1")),
    ("counting_2", template_file!("counting_2")),
    ("existence_1", template_file!("existence_1")),
    ("existence_2", template_file!("existence_2")),
    ("action_query_1", template_file!("action_query_1")),
    ("action_query_2", template_file!("action_query_2")),
];

/// The built-in library: two templates per category.
pub fn template_library() -> Vec<SolutionTemplate> {
    QuestionCategory::ALL
        .iter()
        .flat_map(|c| {
            TEMPLATE_FILES
                .iter()
                .filter(move |(name, _)| name.rsplit_once('_').map(|(stem, _)| stem) == Some(c.file_stem()))
                .map(move |(_, text)| SolutionTemplate::parse(*c, text).expect("well-formed template"))
        })
        .collect()
}

pub const FUNCTION_DESCRIPTIONS: [(QueryFunction, &str); 6] = [
    (
        QueryFunction::CalculateDuration,
        "total minutes a context was detected; used for time comparisons, time queries and existence questions",
    ),
    (QueryFunction::DetectActivity, "the activities detected in a time range, with minutes for each"),
    (QueryFunction::CountingFrequency, "how many separate episodes of a context occurred"),
    (QueryFunction::CountingDays, "on how many days a context was detected"),
    (QueryFunction::DetectFirstTime, "the first time a context was detected"),
    (QueryFunction::DetectLastTime, "the last time a context was detected"),
];

pub const COT_SENTENCE: &str = "Please generate step-by-step explanations.";

/// Few-shot decomposition prompt with the two templates of `category`.
pub fn build_prompt(question: &str, library: &[SolutionTemplate], category: QuestionCategory) -> String {
    let mut p = String::new();
    p.push_str("Decompose the question about the user's sensor history into query function calls.\n");
    p.push_str(
        "Mark each function name as <<name>>, each context phrase as ((phrase)), \
         each date scope as [[date]] and each time of day as {{time}}. \
         Refer to the result of an earlier call as [[after #n]] or [[before #n]], counting calls from 1.\n",
    );
    p.push_str("Available functions:\n");
    for (f, d) in FUNCTION_DESCRIPTIONS {
        p.push_str(&format!("- {}: {d}\n", f.name()));
    }
    p.push_str("Examples:\n");
    for t in library.iter().filter(|t| t.category == category).take(2) {
        p.push_str(&t.text);
        p.push_str("\n\n");
    }
    p.push_str(COT_SENTENCE);
    p.push('\n');
    p.push_str(&format!("Question: {question}\n"));
    p
}
