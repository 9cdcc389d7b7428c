//! Chat backend contract shared by generators and judges, plus the concrete
//! realizations: an HTTP chat-completion client with retry/backoff, a
//! scripted replay backend for tests and offline runs, and a call-logging
//! decorator.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

use crate::model::{CandidateId, Role};

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transport-level trouble (connection, 5xx, timeout). Retried with
    /// backoff before surfacing; surfacing one aborts the step as retriable.
    #[error("backend `{backend}` transport failure: {message}")]
    Transport { backend: String, message: String },
    /// The service answered but not in the expected shape. Not retried.
    #[error("backend `{backend}` protocol error: {message}")]
    Protocol { backend: String, message: String },
    /// No canned response for this prompt digest.
    #[error("scripted backend has no response for digest {digest}")]
    MissingFixture { digest: String },
}

/// Sampling parameters forwarded to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 2048,
        }
    }
}

/// What a call is for. Simulated backends derive their randomness from the
/// hash of this path, so identical runs make identical draws regardless of
/// scheduling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CallPurpose {
    Generate {
        generator: String,
        role: Role,
        sample: u32,
    },
    Judge {
        candidate: CandidateId,
        aspect: String,
        vote: u32,
        attempt: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallPath {
    pub theorem_id: String,
    pub step: usize,
    pub purpose: CallPurpose,
}

impl fmt::Display for CallPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/s{}", self.theorem_id, self.step)?;
        match &self.purpose {
            CallPurpose::Generate {
                generator,
                role,
                sample,
            } => write!(f, "/gen/{generator}/{role}/{sample}"),
            CallPurpose::Judge {
                candidate,
                aspect,
                vote,
                attempt,
            } => write!(f, "/judge/{candidate}/{aspect}/v{vote}/a{attempt}"),
        }
    }
}

/// One request: system and user texts plus decoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub decoding: DecodingParams,
    pub path: CallPath,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
    fn name(&self) -> &str;
}

/// Digest keying scripted fixtures: hash of the two prompt texts.
pub fn prompt_digest(system: &str, user: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system.as_bytes());
    hasher.update([0u8]);
    hasher.update(user.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(32);
    for byte in &digest[..16] {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Retry schedule for transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    fn delay_for(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

/// Chat-completion HTTP client. Sends a messages array with system/user
/// roles and reads the first choice's content.
pub struct HttpChatBackend {
    name: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    send_seed: bool,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(
        name: impl Into<String>,
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        send_seed: bool,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            send_seed,
            retry,
            client: reqwest::blocking::Client::new(),
        }
    }

    fn payload(&self, request: &ChatRequest) -> serde_json::Value {
        let mut payload = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        });
        if self.send_seed {
            // A stable per-call seed lets providers that honor it replay
            // samples; derived from the call path, never from wall clock.
            let digest = Sha256::digest(request.path.to_string().as_bytes());
            let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) >> 1;
            payload["seed"] = serde_json::json!(seed);
        }
        payload
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut builder = self.client.post(&self.endpoint).json(&self.payload(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Transport {
            backend: self.name.clone(),
            message: e.to_string(),
        })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport {
                backend: self.name.clone(),
                message: format!("status {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Protocol {
                backend: self.name.clone(),
                message: format!("status {status}"),
            });
        }
        let body: serde_json::Value =
            response.json().map_err(|e| BackendError::Protocol {
                backend: self.name.clone(),
                message: format!("invalid JSON response: {e}"),
            })?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Protocol {
                backend: self.name.clone(),
                message: "response lacks choices[0].message.content".into(),
            })
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut last = None;
        for attempt in 0..self.retry.max_attempts.max(1) {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(err @ BackendError::Transport { .. }) => {
                    last = Some(err);
                    if attempt + 1 < self.retry.max_attempts {
                        std::thread::sleep(self.retry.delay_for(attempt));
                    }
                }
                Err(err) => return Err(err),
            }
        }
        Err(last.expect("at least one attempt was made"))
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Serves canned responses keyed by prompt digest. Each digest holds a list
/// consumed in order; the last entry repeats once exhausted.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ScriptedResponses {
    pub responses: BTreeMap<String, Vec<String>>,
}

pub struct ScriptedChatBackend {
    name: String,
    fixtures: ScriptedResponses,
    cursors: Mutex<BTreeMap<String, usize>>,
}

impl ScriptedChatBackend {
    pub fn new(name: impl Into<String>, fixtures: ScriptedResponses) -> Self {
        Self {
            name: name.into(),
            fixtures,
            cursors: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn from_file(name: impl Into<String>, path: &std::path::Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let fixtures: ScriptedResponses = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(name, fixtures))
    }

    /// Registers one more response for the given prompt pair.
    pub fn push_response(&mut self, system: &str, user: &str, response: impl Into<String>) {
        self.fixtures
            .responses
            .entry(prompt_digest(system, user))
            .or_default()
            .push(response.into());
    }
}

impl ChatBackend for ScriptedChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let digest = prompt_digest(&request.system, &request.user);
        let Some(entries) = self.fixtures.responses.get(&digest) else {
            return Err(BackendError::MissingFixture { digest });
        };
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let cursor = cursors.entry(digest).or_insert(0);
        let index = (*cursor).min(entries.len() - 1);
        *cursor += 1;
        Ok(entries[index].clone())
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// One recorded exchange, for sidecar transcripts and call-accounting tests.
#[derive(Debug, Clone, Serialize)]
pub struct CallRecord {
    pub path: CallPath,
    pub system: String,
    pub user: String,
    pub response: Option<String>,
}

/// Decorator that records every call made through it.
pub struct CallLogBackend<B: ChatBackend> {
    inner: B,
    log: Mutex<Vec<CallRecord>>,
}

impl<B: ChatBackend> CallLogBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log lock").clone()
    }
}

impl<B: ChatBackend> ChatBackend for CallLogBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(request);
        self.log.lock().expect("call log lock").push(CallRecord {
            path: request.path.clone(),
            system: request.system.clone(),
            user: request.user.clone(),
            response: result.as_ref().ok().cloned(),
        });
        result
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Append-only JSONL sidecar for raw request/response transcripts. Raw texts
/// never enter trace files; this is the one place they are persisted.
pub struct TranscriptLog {
    writer: Mutex<std::io::BufWriter<std::fs::File>>,
}

impl TranscriptLog {
    pub fn create(path: &std::path::Path) -> std::io::Result<std::sync::Arc<Self>> {
        let file = std::fs::File::create(path)?;
        Ok(std::sync::Arc::new(Self {
            writer: Mutex::new(std::io::BufWriter::new(file)),
        }))
    }

    fn append(&self, record: &CallRecord) {
        use std::io::Write;
        if let Ok(json) = serde_json::to_string(record) {
            let mut writer = self.writer.lock().expect("transcript lock");
            let _ = writeln!(writer, "{json}");
            let _ = writer.flush();
        }
    }
}

/// Decorator that copies every exchange into a transcript log.
pub struct TranscriptBackend {
    inner: std::sync::Arc<dyn ChatBackend>,
    log: std::sync::Arc<TranscriptLog>,
}

impl TranscriptBackend {
    pub fn wrap(
        inner: std::sync::Arc<dyn ChatBackend>,
        log: std::sync::Arc<TranscriptLog>,
    ) -> std::sync::Arc<dyn ChatBackend> {
        std::sync::Arc::new(Self { inner, log })
    }
}

impl ChatBackend for TranscriptBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(request);
        self.log.append(&CallRecord {
            path: request.path.clone(),
            system: request.system.clone(),
            user: request.user.clone(),
            response: result.as_ref().ok().cloned(),
        });
        result
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
