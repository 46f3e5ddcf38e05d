//! Chat-completion client (OpenAI-compatible wire format) and test doubles.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("transport error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Live,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Mock,
            base_url: String::new(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "TLQA_API_KEY".into(),
            timeout_ms: 30_000,
            retries: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Other(String),
}

/// Sends one JSON POST.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportFailure>;
}

/// Blocking HTTP transport.
#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportFailure> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportFailure::Timeout,
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportFailure::Timeout,
            other => TransportFailure::Other(other.to_string()),
        };
        let resp = req.send(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.into_body().read_to_string().map_err(map_err)?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

/// The JSON request body; field order is fixed, so identical inputs give identical bytes.
pub fn request_body(model: &str, messages: &[ChatMessage], temperature: f64, max_tokens: u32) -> String {
    serde_json::to_string(&RequestBody {
        model,
        messages,
        temperature,
        max_tokens,
    })
    .expect("request body serializes")
}

/// First choice's message content of a chat-completion response.
pub fn parse_completion(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(String::from)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
}

/// Ordered `(pattern, response)` pairs; the first pattern found in the
/// concatenated message contents wins.
#[derive(Debug, Clone)]
pub struct MockScript {
    entries: Vec<(Regex, String)>,
}

pub const UNSCRIPTED: &str = "UNSCRIPTED";

impl MockScript {
    pub fn new<P: AsRef<str>, R: Into<String>>(entries: impl IntoIterator<Item = (P, R)>) -> Result<Self, GatewayError> {
        let entries = entries
            .into_iter()
            .map(|(p, r)| {
                Regex::new(p.as_ref())
                    .map(|re| (re, r.into()))
                    .map_err(|e| GatewayError::Config(format!("bad mock pattern: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if entries.is_empty() {
            return Err(GatewayError::Config("mock script is empty".into()));
        }
        Ok(Self { entries })
    }

    pub fn respond(&self, messages: &[ChatMessage]) -> String {
        let text = joined(messages);
        self.entries
            .iter()
            .find(|(re, _)| re.is_match(&text))
            .map_or_else(|| UNSCRIPTED.to_string(), |(_, r)| r.clone())
    }
}

fn joined(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
}

pub fn mock_complete(script: &MockScript, messages: &[ChatMessage]) -> String {
    script.respond(messages)
}

/// How a mock gateway picks its reply.
#[derive(Debug, Clone)]
pub enum MockResponder {
    Scripted(MockScript),
    /// A SHA-256 of the prompt selects one of the canned responses.
    Canned(Vec<String>),
}

impl MockResponder {
    fn respond(&self, messages: &[ChatMessage]) -> String {
        match self {
            MockResponder::Scripted(s) => s.respond(messages),
            MockResponder::Canned(list) if list.is_empty() => UNSCRIPTED.to_string(),
            MockResponder::Canned(list) => {
                let digest = Sha256::digest(joined(messages).as_bytes());
                let mut first = [0u8; 8];
                first.copy_from_slice(&digest[..8]);
                list[(u64::from_le_bytes(first) % list.len() as u64) as usize].clone()
            }
        }
    }
}

enum Backend {
    Live {
        transport: Arc<dyn Transport>,
        api_key: String,
    },
    Mock(MockResponder),
}

pub struct Gateway {
    pub config: GatewayConfig,
    backend: Backend,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Gateway {
    /// A live gateway; fails before any network use if the key variable is unset.
    pub fn live(config: GatewayConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        if config.base_url.trim().is_empty() {
            return Err(GatewayError::Config("base_url is empty".into()));
        }
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GatewayError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        Ok(Self {
            config: GatewayConfig {
                mode: GatewayMode::Live,
                ..config
            },
            backend: Backend::Live { transport, api_key },
        })
    }

    pub fn mock(responder: MockResponder) -> Self {
        Self {
            config: GatewayConfig::default(),
            backend: Backend::Mock(responder),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub fn complete(&self, messages: &[ChatMessage], temperature: f64, max_tokens: u32) -> Result<String, GatewayError> {
        if messages.is_empty() || messages.iter().any(|m| m.content.is_empty()) {
            return Err(GatewayError::Config("messages must be non-empty with non-empty content".into()));
        }
        let (transport, api_key) = match &self.backend {
            // the sentinel is a miss, so callers fall back as for any failure
            Backend::Mock(r) => {
                let reply = r.respond(messages);
                if reply == UNSCRIPTED {
                    return Err(GatewayError::Protocol("mock has no reply for this prompt".into()));
                }
                return Ok(reply);
            }
            Backend::Live { transport, api_key } => (transport, api_key),
        };
        let body = request_body(&self.config.model, messages, temperature, max_tokens);
        let headers = vec![("Authorization".to_string(), format!("Bearer {api_key}"))];
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let url = self.endpoint();
        let mut last = GatewayError::Transport {
            status: None,
            message: "no attempt made".into(),
        };
        for _ in 0..=self.config.retries {
            match transport.post_json(&url, &headers, &body, timeout) {
                Ok(r) if (200..300).contains(&r.status) => return parse_completion(&r.body),
                Ok(r) => {
                    last = GatewayError::Transport {
                        status: Some(r.status),
                        message: r.body.chars().take(200).collect(),
                    };
                    if r.status < 500 {
                        break;
                    }
                }
                Err(TransportFailure::Timeout) => {
                    last = GatewayError::Transport {
                        status: None,
                        message: "timed out".into(),
                    }
                }
                Err(TransportFailure::Other(m)) => {
                    last = GatewayError::Transport { status: None, message: m };
                    break;
                }
            }
        }
        Err(last)
    }
}

/// Test transport replaying canned outcomes and counting calls.
pub struct ReplayTransport {
    outcomes: std::sync::Mutex<Vec<Result<HttpResponse, TransportFailure>>>,
    calls: AtomicUsize,
    pub last_body: std::sync::Mutex<Option<String>>,
}

impl ReplayTransport {
    /// Outcomes are returned in order; the last one repeats.
    pub fn new(outcomes: Vec<Result<HttpResponse, TransportFailure>>) -> Self {
        Self {
            outcomes: std::sync::Mutex::new(outcomes),
            calls: AtomicUsize::new(0),
            last_body: std::sync::Mutex::new(None),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ReplayTransport {
    fn post_json(&self, _: &str, _: &[(String, String)], body: &str, _: Duration) -> Result<HttpResponse, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self.last_body.lock().unwrap() = Some(body.to_string());
        let mut o = self.outcomes.lock().unwrap();
        if o.len() > 1 {
            o.remove(0)
        } else {
            o.first().cloned().unwrap_or(Err(TransportFailure::Other("no outcome".into())))
        }
    }
}

/// A chat-completion response body with `content` as the only choice.
pub fn completion_json(content: &str) -> String {
    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
}
