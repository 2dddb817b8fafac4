//! Text-generation wire contract shared by the policy, the remote summarizer,
//! and the distillation teacher, plus the JSON-over-HTTP transport.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned status {status}: {excerpt}")]
    Status { status: u16, excerpt: String },
    #[error("response schema mismatch ({message}); payload: {excerpt}")]
    Schema { message: String, excerpt: String },
    #[error("backend failure: {0}")]
    Other(String),
}

/// Decoding knobs carried on every generation request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    /// `-1` disables top-k filtering.
    pub top_k: i64,
}

impl Sampling {
    /// Policy decoding: plain temperature-1 sampling.
    pub const POLICY: Sampling = Sampling {
        temperature: 1.0,
        top_p: 1.0,
        top_k: -1,
    };

    /// Summarizer decoding used during rollouts.
    pub const SUMMARIZER: Sampling = Sampling {
        temperature: 0.7,
        top_p: 0.9,
        top_k: 40,
    };
}

impl Default for Sampling {
    fn default() -> Self {
        Self::POLICY
    }
}

/// Where in a rollout a request comes from. Never sent over the wire; only
/// in-process backends look at it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TurnContext {
    pub question: String,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: i64,
    pub stop: Vec<String>,
    #[serde(skip)]
    pub context: Option<TurnContext>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize, sampling: Sampling) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            top_k: sampling.top_k,
            stop: Vec::new(),
            context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    /// `"stop"`, `"length"`, or whatever the backend reports.
    pub finish_reason: String,
}

impl GenerationResponse {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: "stop".into(),
        }
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
}

impl<T: GenerationBackend + ?Sized> GenerationBackend for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request)
    }
}

const EXCERPT_CHARS: usize = 200;

pub(crate) fn excerpt(text: &str) -> String {
    let mut out: String = text.chars().take(EXCERPT_CHARS).collect();
    if text.chars().count() > EXCERPT_CHARS {
        out.push('…');
    }
    out
}

/// Blocking JSON-over-HTTP client.
#[derive(Debug, Clone)]
pub struct HttpJsonClient {
    agent: ureq::Agent,
}

impl HttpJsonClient {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }

    pub fn post<Req, Resp>(&self, url: &str, body: &Req) -> Result<Resp, BackendError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let payload = serde_json::to_string(body).map_err(|e| BackendError::Other(e.to_string()))?;
        let mut response = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(payload.as_str())
            .map_err(map_ureq_error)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(map_ureq_error)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status {
                status,
                excerpt: excerpt(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Schema {
            message: e.to_string(),
            excerpt: excerpt(&text),
        })
    }
}

impl Default for HttpJsonClient {
    fn default() -> Self {
        Self::new(Duration::from_secs(60))
    }
}

fn map_ureq_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(status) => BackendError::Status {
            status,
            excerpt: String::new(),
        },
        other => BackendError::Transport(other.to_string()),
    }
}

/// Generation endpoint speaking the JSON wire contract.
#[derive(Debug, Clone)]
pub struct HttpGenerationBackend {
    endpoint: String,
    client: HttpJsonClient,
}

impl HttpGenerationBackend {
    pub fn new(endpoint: impl Into<String>, client: HttpJsonClient) -> Self {
        Self {
            endpoint: endpoint.into(),
            client,
        }
    }
}

impl GenerationBackend for HttpGenerationBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        self.client.post(&self.endpoint, request)
    }
}

/// One line of a scripted-policy fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptLine {
    /// `"*"` applies to every question without its own script.
    pub question: String,
    pub segments: Vec<String>,
}

/// In-process policy replaying fixed emissions, indexed by question and turn.
/// An exhausted script yields an empty emission.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    scripts: HashMap<String, Vec<String>>,
    fallback: Vec<String>,
}

impl ScriptedBackend {
    /// Same script for every question.
    pub fn uniform<S: Into<String>>(segments: impl IntoIterator<Item = S>) -> Self {
        Self {
            scripts: HashMap::new(),
            fallback: segments.into_iter().map(Into::into).collect(),
        }
    }

    pub fn with_script<S: Into<String>>(
        mut self,
        question: impl Into<String>,
        segments: impl IntoIterator<Item = S>,
    ) -> Self {
        self.scripts
            .insert(question.into(), segments.into_iter().map(Into::into).collect());
        self
    }

    pub fn from_lines(lines: impl IntoIterator<Item = ScriptLine>) -> Self {
        let mut backend = Self::default();
        for line in lines {
            if line.question == "*" {
                backend.fallback = line.segments;
            } else {
                backend.scripts.insert(line.question, line.segments);
            }
        }
        backend
    }

    /// Load a JSONL fixture of `{question, segments}` lines.
    pub fn load(path: &Path) -> Result<Self, crate::io::JsonlError> {
        let lines: Vec<ScriptLine> = crate::io::read_jsonl(path)?;
        Ok(Self::from_lines(lines))
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let ctx = request
            .context
            .as_ref()
            .ok_or_else(|| BackendError::Other("scripted backend needs a turn context".into()))?;
        let script = self.scripts.get(&ctx.question).unwrap_or(&self.fallback);
        let text = script.get(ctx.turn).cloned().unwrap_or_default();
        Ok(GenerationResponse::stop(text))
    }
}
