//! Question → decomposition → query execution → answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assemble::{assemble_llm, assemble_template, AnswerBundle, AssembleError, GenConfig};
use crate::calendar::Calendar;
use crate::decompose::{
    build_prompt, classify_category, decompose_rules, parse_llm_decomposition, template_library, DecomposeError,
    DecompositionResult, Lexicon, SolutionTemplate,
};
use crate::encoders::Parameters;
use crate::eval::Answerer;
use crate::gateway::{ChatMessage, Gateway};
use crate::query::{QueryEngine, QueryError, SpecResult};
use crate::store::{EmbeddingStore, LabelTarget, Scorer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("could not decompose question: {0}")]
    Decompose(#[from] DecomposeError),
    #[error("query failed: {0}")]
    Query(#[from] QueryError),
    #[error("could not assemble answer: {0}")]
    Assemble(#[from] AssembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Rules,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStrategy {
    #[default]
    Templates,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Primary decomposer; the other one is tried if it fails.
    pub decompose: Strategy,
    /// `Llm` asks the model for the answer, falling back to templates.
    pub answer: AnswerStrategy,
    pub gen: GenConfig,
    pub threshold: f64,
    pub top_k: usize,
    pub gap_minutes: i64,
    pub calendar: Calendar,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            decompose: Strategy::Rules,
            answer: AnswerStrategy::Templates,
            gen: GenConfig::default(),
            threshold: 0.5,
            top_k: 3,
            gap_minutes: 5,
            calendar: Calendar::default(),
        }
    }
}

/// Everything the pipeline did for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub decomposition: DecompositionResult,
    pub results: Vec<SpecResult>,
    pub answer: AnswerBundle,
    /// Fallbacks taken along the way.
    pub notes: Vec<String>,
}

pub struct Pipeline {
    pub store: EmbeddingStore,
    pub scorer: Box<dyn Scorer>,
    pub targets: Vec<LabelTarget>,
    pub encoder: Option<Parameters>,
    pub lexicon: Lexicon,
    pub gateway: Option<Gateway>,
    pub library: Vec<SolutionTemplate>,
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(store: EmbeddingStore, scorer: Box<dyn Scorer>, targets: Vec<LabelTarget>, lexicon: Lexicon) -> Self {
        Self {
            store,
            scorer,
            targets,
            encoder: None,
            lexicon,
            gateway: None,
            library: template_library(),
            config: PipelineConfig::default(),
        }
    }

    pub fn engine(&self) -> QueryEngine<'_> {
        self.engine_with(&self.config)
    }

    fn engine_with(&self, config: &PipelineConfig) -> QueryEngine<'_> {
        let mut e = QueryEngine::new(&self.store, self.scorer.as_ref(), &self.targets);
        e.encoder = self.encoder.as_ref();
        e.calendar = config.calendar;
        e.threshold = config.threshold;
        e.top_k = config.top_k;
        e.gap_minutes = config.gap_minutes;
        e
    }

    fn decompose_llm(&self, question: &str, config: &PipelineConfig) -> Result<DecompositionResult, String> {
        let gw = self.gateway.as_ref().ok_or("no model gateway configured")?;
        let prompt = build_prompt(question, &self.library, classify_category(question));
        let text = gw
            .complete(&[ChatMessage::user(prompt)], config.gen.temperature, config.gen.max_tokens)
            .map_err(|e| e.to_string())?;
        parse_llm_decomposition(&text, question, &self.lexicon).map_err(|e| e.to_string())
    }

    pub fn decompose(&self, question: &str, notes: &mut Vec<String>) -> Result<DecompositionResult, PipelineError> {
        self.decompose_with(question, &self.config, notes)
    }

    fn decompose_with(
        &self,
        question: &str,
        config: &PipelineConfig,
        notes: &mut Vec<String>,
    ) -> Result<DecompositionResult, PipelineError> {
        match config.decompose {
            Strategy::Rules => match decompose_rules(question, &self.lexicon) {
                Ok(d) => Ok(d),
                Err(rule_err) => match self.gateway.is_some().then(|| self.decompose_llm(question, config)) {
                    Some(Ok(d)) => {
                        notes.push(format!("rules failed ({rule_err}); used model decomposition"));
                        Ok(d)
                    }
                    _ => Err(rule_err.into()),
                },
            },
            Strategy::Llm => match self.decompose_llm(question, config) {
                Ok(d) => Ok(d),
                Err(e) => {
                    notes.push(format!("model decomposition failed ({e}); used rules"));
                    Ok(decompose_rules(question, &self.lexicon)?)
                }
            },
        }
    }

    pub fn answer_trace(&self, question: &str, user: &str, now: i64) -> Result<AnswerTrace, PipelineError> {
        self.answer_trace_with(&self.config, question, user, now)
    }

    /// Like [`Pipeline::answer_trace`] with strategies and query settings from `config`.
    pub fn answer_trace_with(
        &self,
        config: &PipelineConfig,
        question: &str,
        user: &str,
        now: i64,
    ) -> Result<AnswerTrace, PipelineError> {
        let mut notes = Vec::new();
        let decomposition = self.decompose_with(question, config, &mut notes)?;
        let results = self.engine_with(config).execute(&decomposition.specs, user, now)?;
        let answer = match (config.answer, &self.gateway) {
            (AnswerStrategy::Llm, Some(gw)) => {
                let phrases = self.lexicon.phrases();
                let b = assemble_llm(gw, decomposition.category, &results, question, &config.gen, phrases)?;
                if let Some(e) = &b.error {
                    notes.push(format!("model answer failed ({e}); used templates"));
                }
                b
            }
            _ => assemble_template(decomposition.category, &results, question)?,
        };
        Ok(AnswerTrace {
            decomposition,
            results,
            answer,
            notes,
        })
    }
}

impl Answerer for Pipeline {
    fn answer(&self, question: &str, user: &str, now: i64) -> Result<AnswerBundle, String> {
        self.answer_trace(question, user, now).map(|t| t.answer).map_err(|e| e.to_string())
    }
}

/// A pipeline answering with a config other than its own.
pub struct WithConfig<'a>(pub &'a Pipeline, pub PipelineConfig);

impl Answerer for WithConfig<'_> {
    fn answer(&self, question: &str, user: &str, now: i64) -> Result<AnswerBundle, String> {
        self.0
            .answer_trace_with(&self.1, question, user, now)
            .map(|t| t.answer)
            .map_err(|e| e.to_string())
    }
}
