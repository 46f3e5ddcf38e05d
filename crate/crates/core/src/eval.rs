//! Rouge, short-answer and multiple-choice metrics, and batch evaluation.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assemble::AnswerBundle;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("QA file is empty")]
    Empty,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub full_answer: String,
    pub short_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice: Option<usize>,
    pub user_id: String,
    pub now: i64,
    /// Free-form tag, e.g. the question category; ignored by metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl QaRecord {
    pub fn validate(&self) -> Result<(), String> {
        match (&self.choices, self.correct_choice) {
            (None, None) => Ok(()),
            (Some(c), Some(i)) if c.len() == 4 && i < 4 => Ok(()),
            (Some(c), Some(_)) if c.len() != 4 => Err(format!("expected 4 choices, got {}", c.len())),
            (Some(_), Some(i)) => Err(format!("correct_choice {i} out of range")),
            _ => Err("choices and correct_choice must be given together".into()),
        }
    }
}

/// One record per non-empty line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<QaRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| EvalError::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|msg| EvalError::Format { line: i + 1, msg })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(out)
}

pub fn write_jsonl<W: std::io::Write>(mut w: W, records: &[QaRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Lowercase alphanumeric tokens.
pub fn metric_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn f1(overlap: f64, cand: usize, refr: usize) -> f64 {
    if cand == 0 || refr == 0 || overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / refr as f64;
    2.0 * p * r / (p + r)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap F1.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    let cg = ngrams(&c, n);
    let rg = ngrams(&r, n);
    let overlap: usize = cg.iter().map(|(g, k)| (*k).min(rg.get(g).copied().unwrap_or(0))).sum();
    f1(overlap as f64, cg.values().sum(), rg.values().sum())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level longest-common-subsequence F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    f1(lcs(&c, &r) as f64, c.len(), r.len())
}

/// Lowercase, punctuation removed, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// `(exact, contains)` after normalization.
pub fn short_metrics(generated: &str, truth: &str) -> (bool, bool) {
    let g = normalize_answer(generated);
    let t = normalize_answer(truth);
    (g == t, g.contains(&t))
}

const LETTERS: [&str; 4] = ["a", "b", "c", "d"];

pub fn mc_correct(answer: &str, choices: &[String], correct: usize) -> bool {
    let a = normalize_answer(answer);
    let letter = LETTERS[correct];
    let text = normalize_answer(&choices[correct]);
    if a == letter || a == format!("{letter} {text}") {
        return true;
    }
    let has = |t: &str| !t.is_empty() && format!(" {a} ").contains(&format!(" {t} "));
    has(&text)
        && choices
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != correct)
            .all(|(_, c)| !has(&normalize_answer(c)))
}

/// Anything that answers a question for a user at a time.
pub trait Answerer {
    fn answer(&self, question: &str, user: &str, now: i64) -> Result<AnswerBundle, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub question: String,
    pub category: Option<String>,
    pub expected_short: String,
    pub generated_full: String,
    pub generated_short: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub short_exact: bool,
    pub short_contains: bool,
    pub mc_correct: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub failures: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub short_exact: f64,
    pub short_contains: f64,
    pub mc_accuracy: Option<f64>,
    /// Short answers are extracted by pattern rules, not by a language model.
    pub short_answer_extraction: String,
    pub rows: Vec<EvalRow>,
}

pub fn score_record(rec: &QaRecord, outcome: Result<AnswerBundle, String>) -> EvalRow {
    match outcome {
        Ok(b) => {
            let (exact, contains) = short_metrics(&b.short_answer, &rec.short_answer);
            let mc = match (&rec.choices, rec.correct_choice) {
                (Some(c), Some(i)) => Some(mc_correct(&b.short_answer, c, i)),
                _ => None,
            };
            EvalRow {
                question: rec.question.clone(),
                category: rec.category.clone(),
                expected_short: rec.short_answer.clone(),
                rouge1: rouge_n(&b.full_answer, &rec.full_answer, 1),
                rouge2: rouge_n(&b.full_answer, &rec.full_answer, 2),
                rouge_l: rouge_l(&b.full_answer, &rec.full_answer),
                generated_full: b.full_answer,
                generated_short: b.short_answer,
                short_exact: exact,
                short_contains: contains,
                mc_correct: mc,
                error: b.error,
            }
        }
        Err(e) => EvalRow {
            question: rec.question.clone(),
            category: rec.category.clone(),
            expected_short: rec.short_answer.clone(),
            generated_full: String::new(),
            generated_short: String::new(),
            rouge1: 0.0,
            rouge2: 0.0,
            rouge_l: 0.0,
            short_exact: false,
            short_contains: false,
            mc_correct: rec.choices.as_ref().map(|_| false),
            error: Some(e),
        },
    }
}

/// Aggregate rows into means; the result does not depend on row order.
pub fn aggregate(rows: Vec<EvalRow>) -> EvalReport {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mc: Vec<bool> = rows.iter().filter_map(|r| r.mc_correct).collect();
    EvalReport {
        records: rows.len(),
        failures: rows.iter().filter(|r| r.generated_full.is_empty() && r.error.is_some()).count(),
        rouge1: mean(&|r| r.rouge1),
        rouge2: mean(&|r| r.rouge2),
        rouge_l: mean(&|r| r.rouge_l),
        short_exact: mean(&|r| r.short_exact as u8 as f64),
        short_contains: mean(&|r| r.short_contains as u8 as f64),
        mc_accuracy: (!mc.is_empty()).then(|| mc.iter().filter(|b| **b).count() as f64 / mc.len() as f64),
        short_answer_extraction: "pattern rules".into(),
        rows,
    }
}

/// Run every record through `answerer`; per-record failures are kept as rows.
pub fn evaluate(records: &[QaRecord], answerer: &dyn Answerer) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows = records
        .iter()
        .map(|r| score_record(r, answerer.answer(&r.question, &r.user_id, r.now)))
        .collect();
    Ok(aggregate(rows))
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<16}{:>10}\n", "metric", "value"));
        let mut line = |k: &str, v: f64| s.push_str(&format!("{k:<16}{v:>10.4}\n"));
        line("rouge1", self.rouge1);
        line("rouge2", self.rouge2);
        line("rougeL", self.rouge_l);
        line("short_exact", self.short_exact);
        line("short_contains", self.short_contains);
        if let Some(mc) = self.mc_accuracy {
            line("mc_accuracy", mc);
        }
        s.push_str(&format!("{:<16}{:>10}\n", "records", self.records));
        s.push_str(&format!("{:<16}{:>10}\n", "failures", self.failures));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assemble::AnswerSource;
    use proptest::prelude::*;

    #[test]
    fn rouge_goldens() {
        assert!((rouge_n("the cat sat", "the dog sat", 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge_l("a b c d", "a c b d") - 0.75).abs() < 1e-12);
        assert_eq!(rouge_n("x y z", "x y z", 1), 1.0);
        assert_eq!(rouge_n("x y z", "x y z", 2), 1.0);
        assert_eq!(rouge_l("x y z", "x y z"), 1.0);
        assert_eq!(rouge_n("", "a", 1), 0.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        // "the" appears twice in the candidate but once in the reference
        assert!((rouge_n("the the cat", "the cat", 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn short_answer_goldens() {
        assert_eq!(short_metrics("saturday", "Saturday"), (true, true));
        assert_eq!(short_metrics("You spent 40 minutes", "40 minutes"), (false, true));
        assert_eq!(short_metrics("3 hours 50 min", "4 hours"), (false, false));
    }

    #[test]
    fn multiple_choice() {
        let c: Vec<String> = ["Monday", "Tuesday", "Friday", "Wednesday"].map(String::from).to_vec();
        assert!(mc_correct("D", &c, 3));
        assert!(mc_correct("D. Wednesday", &c, 3));
        assert!(mc_correct("It was Wednesday", &c, 3));
        assert!(!mc_correct("Wednesday or Monday", &c, 3));
        assert!(!mc_correct("C", &c, 3));
    }

    #[test]
    fn jsonl_parsing() {
        assert!(matches!(read_jsonl("".as_bytes()), Err(EvalError::Empty)));
        let line = r#"{"question":"q","full_answer":"f","short_answer":"s","user_id":"u","now":5}"#;
        assert_eq!(read_jsonl(format!("{line}\n\n{line}\n").as_bytes()).unwrap().len(), 2);
        let bad = r#"{"question":"q","full_answer":"f","short_answer":"s","user_id":"u","now":5,"choices":["a"],"correct_choice":0}"#;
        assert!(matches!(read_jsonl(bad.as_bytes()), Err(EvalError::Format { line: 1, .. })));
    }

    struct Echo;

    impl Answerer for Echo {
        fn answer(&self, question: &str, _: &str, _: i64) -> Result<AnswerBundle, String> {
            if question == "fail" {
                return Err("boom".into());
            }
            Ok(AnswerBundle {
                full_answer: format!("The answer is {question}"),
                short_answer: question.to_string(),
                contexts_used: vec![],
                source: AnswerSource::Templates,
                error: None,
            })
        }
    }

    fn rec(q: &str) -> QaRecord {
        QaRecord {
            question: q.into(),
            full_answer: format!("The answer is {q}"),
            short_answer: q.into(),
            choices: None,
            correct_choice: None,
            user_id: "u".into(),
            now: 0,
            category: None,
        }
    }

    #[test]
    fn evaluate_all_correct_and_failures() {
        let recs = vec![rec("alpha"), rec("beta")];
        let r = evaluate(&recs, &Echo).unwrap();
        assert_eq!((r.rouge1, r.rouge2, r.rouge_l, r.short_exact, r.short_contains), (1.0, 1.0, 1.0, 1.0, 1.0));
        let r = evaluate(&[rec("alpha"), rec("fail")], &Echo).unwrap();
        assert_eq!(r.failures, 1);
        assert_eq!(r.short_exact, 0.5);
        assert!(evaluate(&[], &Echo).is_err());
        assert!(r.table().contains("short_exact"));
    }

    #[test]
    fn aggregation_is_order_independent() {
        let recs: Vec<QaRecord> = (0..30).map(|i| rec(&format!("q{i} {}", "x ".repeat(i % 4)))).collect();
        let rows: Vec<EvalRow> = recs.iter().enumerate().map(|(i, r)| {
            let mut out = Echo.answer(&r.question, "u", 0);
            if i % 3 == 0 {
                out = out.map(|mut b| { b.short_answer.push_str(" extra"); b.full_answer = "other words".into(); b });
            }
            score_record(r, out)
        }).collect();
        let a = aggregate(rows.clone());
        let mut rev = rows;
        rev.reverse();
        let b = aggregate(rev);
        assert!((a.rouge1 - b.rouge1).abs() < 1e-12);
        assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
        assert_eq!(a.short_exact, b.short_exact);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_reflexive(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            for v in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !metric_tokens(&a).is_empty() {
                prop_assert!((rouge_n(&a, &a, 1) - 1.0).abs() < 1e-12);
                prop_assert!((rouge_l(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn appending_truth_makes_contains_true(g in "[A-Za-z0-9 ,.]{0,30}", t in "[a-z0-9]{1,10}( [a-z0-9]{1,10})?") {
            let joined = format!("{g} {t}");
            prop_assert!(short_metrics(&joined, &t).1);
        }
    }
}
