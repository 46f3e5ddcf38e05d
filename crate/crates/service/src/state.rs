//! Loaded model artifacts, the active pipeline and chat sessions.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use tlqa_core::assemble::AnswerBundle;
use tlqa_core::decompose::{parse_synonyms, Lexicon};
use tlqa_core::encoders::Parameters;
use tlqa_core::gateway::{Gateway, GatewayConfig, GatewayMode, MockResponder, MockScript, UreqTransport};
use tlqa_core::ingest::{impute_with_schema, parse_csv};
use tlqa_core::pipeline::Pipeline;
use tlqa_core::store::{build_store, vocabulary_targets, EmbeddingStore, IndexedScorer, SimilarityModel};

use crate::config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("{0}")]
    Load(String),
    #[error("no encoder parameters or similarity model loaded")]
    NoModel,
    #[error("invalid data: {0}")]
    BadData(String),
    #[error("{0}")]
    Conflict(String),
}

/// Encoder parameters and the similarity model; fixed after startup.
pub struct Model {
    pub params: Parameters,
    pub similarity: SimilarityModel,
}

#[derive(Debug, Clone, Serialize)]
pub struct Exchange {
    pub question: String,
    pub answer: AnswerBundle,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatSession {
    pub session_id: String,
    pub user_id: String,
    pub now_override: Option<i64>,
    pub history: Vec<Exchange>,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub model: Option<Arc<Model>>,
    /// Replaced wholesale by ingest; requests keep the snapshot they started with.
    pipeline: RwLock<Option<Arc<Pipeline>>>,
    pub sessions: Mutex<HashMap<String, ChatSession>>,
}

fn load_err(what: &str, e: impl std::fmt::Display) -> StateError {
    StateError::Load(format!("{what}: {e}"))
}

/// The gateway described by `config`, if any.
pub fn make_gateway(config: &ServiceConfig) -> Result<Option<Gateway>, StateError> {
    let Some(gc) = &config.gateway else {
        return Ok(None);
    };
    match gc.mode {
        GatewayMode::Live => Gateway::live(gc.clone(), Arc::new(UreqTransport))
            .map(Some)
            .map_err(|e| load_err("gateway", e)),
        GatewayMode::Mock => {
            let responder = match &config.data.mock_script {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| load_err("mock script", e))?;
                    let entries: Vec<(String, String)> = text
                        .lines()
                        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                        .filter_map(|l| l.split_once('\t'))
                        .map(|(p, r)| (p.to_string(), r.replace("\\n", "\n")))
                        .collect();
                    MockResponder::Scripted(MockScript::new(entries).map_err(|e| load_err("mock script", e))?)
                }
                None => MockResponder::Canned(Vec::new()),
            };
            let mut g = Gateway::mock(responder);
            g.config = GatewayConfig { mode: GatewayMode::Mock, ..gc.clone() };
            Ok(Some(g))
        }
    }
}

fn lexicon_for(config: &ServiceConfig, params: &Parameters) -> Result<Lexicon, StateError> {
    match &config.data.synonyms {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| load_err("synonyms", e))?;
            Ok(Lexicon::new(&params.vocab, &parse_synonyms(&text)))
        }
        None => Ok(Lexicon::with_default_synonyms(&params.vocab)),
    }
}

/// A pipeline over `store` using the trained model.
pub fn model_pipeline(config: &ServiceConfig, model: &Model, store: EmbeddingStore) -> Result<Pipeline, StateError> {
    if store.embed_dim != model.params.config.embed_dim {
        return Err(StateError::BadData(format!(
            "store has {}-d embeddings, encoder produces {}-d",
            store.embed_dim, model.params.config.embed_dim
        )));
    }
    let targets = vocabulary_targets(&model.params).map_err(|e| load_err("label targets", e))?;
    let scorer = IndexedScorer::new(model.similarity.clone(), &store);
    let mut p = Pipeline::new(store, Box::new(scorer), targets, lexicon_for(config, &model.params)?);
    p.encoder = Some(model.params.clone());
    p.gateway = make_gateway(config)?;
    p.config = config.pipeline.clone();
    Ok(p)
}

impl AppState {
    /// Load whatever the config names. A missing store file leaves the
    /// service up without a pipeline; chat then answers 409.
    pub fn load(config: ServiceConfig) -> Result<Self, StateError> {
        let model = match (&config.data.params, &config.data.similarity) {
            (Some(p), Some(s)) => Some(Arc::new(Model {
                params: Parameters::load(p).map_err(|e| load_err("parameters", e))?,
                similarity: SimilarityModel::load(s).map_err(|e| load_err("similarity model", e))?,
            })),
            _ => None,
        };
        let pipeline = match (&model, &config.data.store) {
            (Some(m), Some(path)) if path.exists() => {
                let store = EmbeddingStore::load(path).map_err(|e| load_err("store", e))?;
                Some(Arc::new(model_pipeline(&config, m, store)?))
            }
            _ => None,
        };
        Ok(Self::new(config, model, pipeline))
    }

    pub fn new(config: ServiceConfig, model: Option<Arc<Model>>, pipeline: Option<Arc<Pipeline>>) -> Self {
        Self {
            config,
            model,
            pipeline: RwLock::new(pipeline),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// A ready-made pipeline, e.g. one using ground-truth similarity.
    pub fn with_pipeline(config: ServiceConfig, pipeline: Pipeline) -> Self {
        Self::new(config, None, Some(Arc::new(pipeline)))
    }

    pub fn pipeline(&self) -> Option<Arc<Pipeline>> {
        self.pipeline.read().expect("pipeline lock").clone()
    }

    /// Parse CSV, encode it with the loaded encoder and swap in a store with
    /// the new records added. Records already present are a conflict.
    pub fn ingest_csv(&self, csv: &str) -> Result<IngestSummary, StateError> {
        let model = self.model.as_ref().ok_or(StateError::NoModel)?;
        let timeline = parse_csv(csv.as_bytes(), &model.params.schema).map_err(|e| StateError::BadData(e.to_string()))?;
        let timeline = impute_with_schema(&timeline, &model.params.schema).map_err(|e| StateError::BadData(e.to_string()))?;
        let added = build_store(&model.params, &timeline).map_err(|e| StateError::BadData(e.to_string()))?;

        let mut slot = self.pipeline.write().expect("pipeline lock");
        let mut records = slot.as_ref().map(|p| p.store.records.clone()).unwrap_or_default();
        records.extend(added.records);
        records.sort_by(|a, b| (&a.user_id, a.timestamp).cmp(&(&b.user_id, b.timestamp)));
        if let Some(pair) = records
            .windows(2)
            .find(|w| w[0].user_id == w[1].user_id && w[0].timestamp == w[1].timestamp)
        {
            return Err(StateError::Conflict(format!(
                "user {} already has a window at {}",
                pair[0].user_id, pair[0].timestamp
            )));
        }
        let store = EmbeddingStore {
            embed_dim: model.params.config.embed_dim,
            records,
        };
        let total = store.len();
        let users = store.users().into_iter().map(String::from).collect();
        *slot = Some(Arc::new(model_pipeline(&self.config, model, store)?));
        Ok(IngestSummary {
            windows: timeline.len(),
            total_records: total,
            users,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub windows: usize,
    pub total_records: usize,
    pub users: Vec<String>,
}
