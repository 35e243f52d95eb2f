//! Answer-producing backends behind one `complete` call.
//!
//! A [`Client`] wraps a transport (chat-completion HTTP or a scripted oracle)
//! with a content-addressed response cache, a shared rate limiter and bounded
//! exponential-backoff retries. Cache hits never touch the transport.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::TemplateName;

pub const API_KEY_ENV: &str = "TA_AUDIT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpChat,
    Scripted,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_rate_limit() -> f64 {
    5.0
}
fn default_max_retries() -> u32 {
    5
}
fn default_timeout() -> f64 {
    60.0
}
fn default_backoff_ms() -> u64 {
    500
}

/// Identity and transport settings of one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    pub kind: BackendKind,
    /// Base URL of a chat-completion API (http-chat only).
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Requests per second.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Script file (scripted only).
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl BackendSpec {
    pub fn scripted(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            model_name: id.clone(),
            id,
            kind: BackendKind::Scripted,
            endpoint: None,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            rate_limit: 1000.0,
            max_retries: 0,
            timeout: default_timeout(),
            backoff_ms: 0,
            api_key: None,
            script: None,
        }
    }

    pub fn http(id: impl Into<String>, endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            rate_limit: default_rate_limit(),
            max_retries: default_max_retries(),
            timeout: default_timeout(),
            backoff_ms: default_backoff_ms(),
            api_key: None,
            script: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return Err(format!("backend id `{}` is not a valid directory name", self.id));
        }
        if !(self.temperature >= 0.0) {
            return Err(format!("{}: temperature must be >= 0", self.id));
        }
        if !(self.rate_limit > 0.0) {
            return Err(format!("{}: rate_limit must be > 0", self.id));
        }
        if !(self.timeout > 0.0) {
            return Err(format!("{}: timeout must be > 0", self.id));
        }
        if self.kind == BackendKind::HttpChat {
            if self.endpoint.as_deref().unwrap_or("").is_empty() {
                return Err(format!("{}: http-chat backend needs an endpoint", self.id));
            }
            if self.model_name.is_empty() {
                return Err(format!("{}: http-chat backend needs a model_name", self.id));
            }
        }
        Ok(())
    }

    /// Explicit key, else `TA_AUDIT_API_KEY_<ID>`, else `TA_AUDIT_API_KEY`.
    pub fn resolve_api_key(&self) -> Option<String> {
        if let Some(k) = self.api_key.as_ref().filter(|k| !k.is_empty()) {
            return Some(k.clone());
        }
        let suffix: String = self
            .id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_uppercase()
                } else {
                    '_'
                }
            })
            .collect();
        std::env::var(format!("{API_KEY_ENV}_{suffix}"))
            .or_else(|_| std::env::var(API_KEY_ENV))
            .ok()
            .filter(|k| !k.is_empty())
    }
}

/// Text returned by a backend. Only `text` and `finish_reason` are persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub finish_reason: String,
    #[serde(skip)]
    pub latency_ms: u64,
    #[serde(skip)]
    pub attempt: u32,
    #[serde(skip)]
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<BackendError> },
    #[error("scripted backend failure for item \"{item_id}\" trial {index}")]
    ScriptedFailure { item_id: String, index: usize },
    #[error("no script entry for item \"{item_id}\" trial {index}")]
    Unscripted { item_id: String, index: usize },
    #[error("cache error at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { retryable, .. } => *retryable,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Timeout(_) => true,
            _ => false,
        }
    }

    /// Errors that indicate a broken setup rather than a failed item; runs abort on them.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Unscripted { .. } | BackendError::Cache { .. })
    }
}

/// What the item under evaluation looks like to the model, for scripted backends.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialContext {
    pub item_id: String,
    /// Permutation or sample index.
    pub index: usize,
    pub template: Option<TemplateName>,
    /// Gold letter (MCQ, after permutation) or gold text (open-ended).
    pub gold: Option<String>,
    pub is_mcq: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub sample_index: usize,
    pub context: TrialContext,
}

/// Content digest identifying one cacheable request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(spec: &BackendSpec, prompt: &str, sample_index: usize) -> Self {
        let mut h = Sha256::new();
        for part in [
            spec.id.as_bytes(),
            spec.model_name.as_bytes(),
            prompt.as_bytes(),
            format!("{:?}", spec.temperature).as_bytes(),
            sample_index.to_string().as_bytes(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    prompt_digest: String,
    text: String,
    finish_reason: String,
    timestamp: String,
}

/// On-disk store laid out as `<root>/<backend-id>/<2-char shard>/<digest>.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, backend_id: &str, key: &CacheKey) -> PathBuf {
        self.root
            .join(backend_id)
            .join(&key.as_str()[..2])
            .join(format!("{}.json", key.as_str()))
    }

    pub fn get(&self, backend_id: &str, key: &CacheKey) -> Result<Option<RawResponse>, BackendError> {
        let path = self.path_for(backend_id, key);
        let body = match fs::read_to_string(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(BackendError::Cache { path, source }),
        };
        let entry: CacheEntry = serde_json::from_str(&body).map_err(|e| BackendError::Cache {
            path: path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        Ok(Some(RawResponse {
            text: entry.text,
            finish_reason: entry.finish_reason,
            latency_ms: 0,
            attempt: 0,
            cached: true,
        }))
    }

    /// Atomic write: temp file in the shard directory, then rename.
    pub fn put(&self, backend_id: &str, key: &CacheKey, prompt: &str, resp: &RawResponse) -> Result<(), BackendError> {
        let path = self.path_for(backend_id, key);
        let dir = path.parent().expect("cache path has a shard directory");
        let wrap = |source| BackendError::Cache {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(dir).map_err(wrap)?;
        let entry = CacheEntry {
            prompt_digest: sha256_hex(prompt.as_bytes()),
            text: resp.text.clone(),
            finish_reason: resp.finish_reason.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
        serde_json::to_writer(&mut tmp, &entry).map_err(|e| wrap(e.into()))?;
        tmp.flush().map_err(wrap)?;
        tmp.persist(&path).map_err(|e| wrap(e.error))?;
        Ok(())
    }
}

/// Spaces requests at least `1 / rate` seconds apart (token bucket of depth one).
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / per_second),
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let wait_until = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if wait_until > now {
            std::thread::sleep(wait_until - now);
        }
    }
}

/// Sends one request to a model, without caching or retries.
pub trait Transport: Send + Sync {
    fn send(&self, spec: &BackendSpec, req: &CompletionRequest) -> Result<RawResponse, BackendError>;
}

/// Chat-completion HTTP transport (`POST <endpoint>/chat/completions`).
pub struct HttpChat {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    verbose: bool,
}

impl HttpChat {
    pub fn new(spec: &BackendSpec, verbose: bool) -> Self {
        let base = spec.endpoint.clone().unwrap_or_default();
        let base = base.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(spec.timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url,
            api_key: spec.resolve_api_key(),
            verbose,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

fn map_ureq_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
        ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound | ureq::Error::Protocol(_) => {
            BackendError::Transport {
                message: e.to_string(),
                retryable: true,
            }
        }
        other => BackendError::Transport {
            message: other.to_string(),
            retryable: false,
        },
    }
}

impl Transport for HttpChat {
    fn send(&self, spec: &BackendSpec, req: &CompletionRequest) -> Result<RawResponse, BackendError> {
        let body = serde_json::json!({
            "model": spec.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": spec.temperature,
            "max_tokens": spec.max_tokens,
        });
        if self.verbose {
            let auth = if self.api_key.is_some() {
                "Bearer [REDACTED]"
            } else {
                "<none>"
            };
            eprintln!("[{}] POST {} authorization={} body={}", spec.id, self.url, auth, body);
        }
        let mut request = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = request.send_json(&body).map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq_error)?;
        if self.verbose {
            eprintln!("[{}] status={} body={}", spec.id, status, text);
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::BadResponse("no choices".into()))?;
        let content = choice.message.content.unwrap_or_default();
        let finish_reason = choice.finish_reason.unwrap_or_else(|| "stop".into());
        if content.is_empty() && finish_reason == "stop" {
            return Err(BackendError::BadResponse(
                "empty content with finish_reason=stop".into(),
            ));
        }
        Ok(RawResponse {
            text: content,
            finish_reason,
            latency_ms: 0,
            attempt: 0,
            cached: false,
        })
    }
}

pub const REFUSAL_TEXT: &str = "I cannot answer without the video.";
pub const GARBAGE_TEXT: &str = "~~ zzxq 0x1f ~~ ### lorem";

/// Deterministic response behaviors of the scripted oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Behavior {
    AnswerGold,
    AnswerFixedLetter(char),
    AnswerText(String),
    Refuse,
    Garbage,
    /// Provider-side permanent failure.
    Fail,
    /// Refuses under the default template, behaves as the inner behavior under the enhanced one.
    RefuseUnlessEnhanced(Box<Behavior>),
}

impl std::str::FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(l) = s.strip_prefix("answer-fixed-letter:") {
            let mut chars = l.trim().chars();
            return match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => Ok(Behavior::AnswerFixedLetter(c.to_ascii_uppercase())),
                _ => Err(format!("bad letter in behavior `{s}`")),
            };
        }
        if let Some(t) = s.strip_prefix("answer-text:") {
            return Ok(Behavior::AnswerText(t.to_string()));
        }
        if let Some(inner) = s.strip_prefix("refuse-default:") {
            return Ok(Behavior::RefuseUnlessEnhanced(Box::new(inner.parse()?)));
        }
        match s {
            "answer-gold" => Ok(Behavior::AnswerGold),
            "refuse" => Ok(Behavior::Refuse),
            "garbage" => Ok(Behavior::Garbage),
            "fail" => Ok(Behavior::Fail),
            other => Err(format!("unknown behavior `{other}`")),
        }
    }
}

impl Behavior {
    fn respond(&self, ctx: &TrialContext) -> Result<String, BackendError> {
        match self {
            Behavior::AnswerGold => Ok(format!("Answer: {}", ctx.gold.as_deref().unwrap_or(""))),
            Behavior::AnswerFixedLetter(l) => Ok(format!("Answer: {l}")),
            Behavior::AnswerText(t) => Ok(format!("Answer: {t}")),
            Behavior::Refuse => Ok(REFUSAL_TEXT.to_string()),
            Behavior::Garbage => Ok(GARBAGE_TEXT.to_string()),
            Behavior::Fail => Err(BackendError::ScriptedFailure {
                item_id: ctx.item_id.clone(),
                index: ctx.index,
            }),
            Behavior::RefuseUnlessEnhanced(inner) => {
                if ctx.template == Some(TemplateName::Enhanced) {
                    inner.respond(ctx)
                } else {
                    Ok(REFUSAL_TEXT.to_string())
                }
            }
        }
    }
}

/// Behavior table keyed by `(item id, trial index)`, with per-item and global fallbacks,
/// plus an optional exact-prompt table.
#[derive(Debug, Clone, Default)]
pub struct Script {
    by_trial: HashMap<(String, usize), Behavior>,
    by_item: HashMap<String, Behavior>,
    by_prompt: HashMap<String, String>,
    default: Option<Behavior>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    #[serde(default)]
    item_id: Option<String>,
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    behavior: Option<String>,
    #[serde(default)]
    prompt_sha256: Option<String>,
    #[serde(default)]
    text: Option<String>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    /// Behavior for one trial of one item.
    pub fn on_trial(mut self, item_id: impl Into<String>, index: usize, b: Behavior) -> Self {
        self.by_trial.insert((item_id.into(), index), b);
        self
    }

    /// Behavior for every trial of one item not covered by `on_trial`.
    pub fn on_item(mut self, item_id: impl Into<String>, b: Behavior) -> Self {
        self.by_item.insert(item_id.into(), b);
        self
    }

    /// Verbatim reply to an exact prompt, checked before item entries.
    pub fn on_prompt(mut self, prompt: &str, text: impl Into<String>) -> Self {
        self.by_prompt.insert(sha256_hex(prompt.as_bytes()), text.into());
        self
    }

    pub fn otherwise(mut self, b: Behavior) -> Self {
        self.default = Some(b);
        self
    }

    pub fn insert_trial(&mut self, item_id: impl Into<String>, index: usize, b: Behavior) {
        self.by_trial.insert((item_id.into(), index), b);
    }

    pub fn insert_item(&mut self, item_id: impl Into<String>, b: Behavior) {
        self.by_item.insert(item_id.into(), b);
    }

    /// JSONL lines of `{"item_id", "index"?, "behavior"}`, `{"behavior"}` for the
    /// global default, or `{"prompt_sha256", "text"}`.
    pub fn parse(reader: impl BufRead) -> Result<Self, String> {
        let mut script = Script::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(&line).map_err(|e| format!("script line {}: {e}", i + 1))?;
            if let Some(digest) = entry.prompt_sha256 {
                let text = entry
                    .text
                    .ok_or_else(|| format!("script line {}: missing text", i + 1))?;
                script.by_prompt.insert(digest, text);
                continue;
            }
            let behavior: Behavior = entry
                .behavior
                .ok_or_else(|| format!("script line {}: missing behavior", i + 1))?
                .parse()
                .map_err(|e| format!("script line {}: {e}", i + 1))?;
            match (entry.item_id, entry.index) {
                (Some(id), Some(idx)) => script.insert_trial(id, idx, behavior),
                (Some(id), None) => script.insert_item(id, behavior),
                (None, None) => script.default = Some(behavior),
                (None, Some(_)) => return Err(format!("script line {}: index without item_id", i + 1)),
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(BufReader::new(f))
    }

    fn lookup(&self, ctx: &TrialContext) -> Option<&Behavior> {
        self.by_trial
            .get(&(ctx.item_id.clone(), ctx.index))
            .or_else(|| self.by_item.get(&ctx.item_id))
            .or(self.default.as_ref())
    }
}

/// The deterministic stand-in for a model.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    script: Script,
}

impl ScriptedOracle {
    pub fn new(script: Script) -> Self {
        Self { script }
    }
}

impl Transport for ScriptedOracle {
    fn send(&self, _spec: &BackendSpec, req: &CompletionRequest) -> Result<RawResponse, BackendError> {
        let text = if let Some(t) = self.script.by_prompt.get(&sha256_hex(req.prompt.as_bytes())) {
            t.clone()
        } else {
            let behavior = self
                .script
                .lookup(&req.context)
                .ok_or_else(|| BackendError::Unscripted {
                    item_id: req.context.item_id.clone(),
                    index: req.context.index,
                })?;
            behavior.respond(&req.context)?
        };
        Ok(RawResponse {
            text,
            finish_reason: "stop".into(),
            latency_ms: 0,
            attempt: 0,
            cached: false,
        })
    }
}

/// Builds a scripted backend spec paired with its oracle.
pub fn scripted_oracle(id: impl Into<String>, script: Script) -> (BackendSpec, ScriptedOracle) {
    (BackendSpec::scripted(id), ScriptedOracle::new(script))
}

/// A backend ready for use: transport plus cache, limiter and retry policy.
pub struct Client {
    spec: BackendSpec,
    transport: Box<dyn Transport>,
    cache: Option<ResponseCache>,
    limiter: RateLimiter,
    network_calls: AtomicU64,
}

impl Client {
    pub fn new(spec: BackendSpec, transport: Box<dyn Transport>, cache: Option<ResponseCache>) -> Self {
        let limiter = RateLimiter::new(spec.rate_limit);
        Self {
            spec,
            transport,
            cache,
            limiter,
            network_calls: AtomicU64::new(0),
        }
    }

    /// Builds the transport named by `spec.kind`.
    pub fn from_spec(spec: BackendSpec, cache: Option<ResponseCache>, verbose: bool) -> Result<Self, String> {
        spec.validate()?;
        let transport: Box<dyn Transport> = match spec.kind {
            BackendKind::HttpChat => Box::new(HttpChat::new(&spec, verbose)),
            BackendKind::Scripted => {
                let path = spec
                    .script
                    .as_ref()
                    .ok_or_else(|| format!("{}: scripted backend needs a script file", spec.id))?;
                Box::new(ScriptedOracle::new(Script::load(path)?))
            }
        };
        Ok(Self::new(spec, transport, cache))
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    /// Transport sends so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn cache_key(&self, req: &CompletionRequest) -> CacheKey {
        CacheKey::new(&self.spec, &req.prompt, req.sample_index)
    }

    /// Cached if possible; otherwise sends with retries and caches the result.
    pub fn complete(&self, req: &CompletionRequest) -> Result<RawResponse, BackendError> {
        let key = self.cache_key(req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&self.spec.id, &key)? {
                return Ok(hit);
            }
        }
        let started = Instant::now();
        let max_attempts = self.spec.max_retries + 1;
        let mut attempt = 0;
        let mut resp = loop {
            attempt += 1;
            self.limiter.acquire();
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            match self.transport.send(&self.spec, req) {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && attempt < max_attempts => {
                    let backoff = self
                        .spec
                        .backoff_ms
                        .saturating_mul(1u64 << (attempt - 1).min(16))
                        .min(60_000);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                Err(e) if e.is_retryable() => {
                    return Err(BackendError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        };
        resp.attempt = attempt;
        resp.latency_ms = started.elapsed().as_millis() as u64;
        resp.cached = false;
        if let Some(cache) = &self.cache {
            cache.put(&self.spec.id, &key, &req.prompt, &resp)?;
        }
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(item: &str, index: usize, gold: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: format!("prompt for {item}/{index}"),
            sample_index: index,
            context: TrialContext {
                item_id: item.into(),
                index,
                template: Some(TemplateName::Default),
                gold: Some(gold.into()),
                is_mcq: true,
            },
        }
    }

    #[test]
    fn prompt_table_reply_then_cached() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("x", 0, "A");
        let (spec, oracle) = scripted_oracle("s", Script::new().on_prompt(&r.prompt, "Answer: B"));
        let client = Client::new(spec, Box::new(oracle), Some(ResponseCache::new(dir.path())));
        let first = client.complete(&r).unwrap();
        assert_eq!(first.text, "Answer: B");
        assert!(!first.cached);
        let second = client.complete(&r).unwrap();
        assert_eq!(second.text, "Answer: B");
        assert!(second.cached);
        assert_eq!(client.network_calls(), 1);
    }

    #[test]
    fn cache_layout_matches_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("x", 0, "C");
        let (spec, oracle) = scripted_oracle("gpt-x", Script::new().otherwise(Behavior::AnswerGold));
        let client = Client::new(spec.clone(), Box::new(oracle), Some(ResponseCache::new(dir.path())));
        client.complete(&r).unwrap();
        let key = CacheKey::new(&spec, &r.prompt, 0);
        let path = dir
            .path()
            .join("gpt-x")
            .join(&key.as_str()[..2])
            .join(format!("{}.json", key.as_str()));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v["text"], "Answer: C");
        assert_eq!(v["finish_reason"], "stop");
        assert_eq!(v["prompt_digest"], sha256_hex(r.prompt.as_bytes()));
        assert!(v["timestamp"].is_string());
    }

    #[test]
    fn behaviors() {
        let (spec, oracle) = scripted_oracle(
            "s",
            Script::new()
                .on_item("gold", Behavior::AnswerGold)
                .on_item("fixed", Behavior::AnswerFixedLetter('A'))
                .on_item("refuse", Behavior::Refuse)
                .on_item("garbage", Behavior::Garbage)
                .on_item("fail", Behavior::Fail),
        );
        let send = |item: &str, idx: usize| oracle.send(&spec, &req(item, idx, "C"));
        assert_eq!(send("gold", 0).unwrap().text, "Answer: C");
        assert_eq!(send("fixed", 1).unwrap().text, "Answer: A");
        assert!(send("refuse", 0)
            .unwrap()
            .text
            .contains("I cannot answer without the video"));
        assert_eq!(send("garbage", 0).unwrap().text, GARBAGE_TEXT);
        let err = send("fail", 0).unwrap_err();
        assert!(!err.is_retryable() && !err.is_fatal());
        let err = send("missing", 3).unwrap_err();
        assert!(matches!(err, BackendError::Unscripted { ref item_id, index: 3 } if item_id == "missing"));
        assert!(err.is_fatal());
    }

    #[test]
    fn sample_index_separates_cache_entries() {
        let dir = tempfile::tempdir().unwrap();
        let script = Script::new()
            .on_trial("x", 0, Behavior::AnswerFixedLetter('A'))
            .on_trial("x", 1, Behavior::AnswerFixedLetter('B'));
        let (spec, oracle) = scripted_oracle("s", script);
        let client = Client::new(spec, Box::new(oracle), Some(ResponseCache::new(dir.path())));
        let mut r0 = req("x", 0, "A");
        let mut r1 = req("x", 1, "A");
        r1.prompt = r0.prompt.clone();
        r0.sample_index = 0;
        for _ in 0..3 {
            assert_eq!(client.complete(&r0).unwrap().text, "Answer: A");
            assert_eq!(client.complete(&r1).unwrap().text, "Answer: B");
        }
        assert_eq!(client.network_calls(), 2);
    }

    #[test]
    fn refuse_unless_enhanced() {
        let b: Behavior = "refuse-default:answer-gold".parse().unwrap();
        let (spec, oracle) = scripted_oracle("s", Script::new().otherwise(b));
        let mut r = req("x", 0, "B");
        assert_eq!(oracle.send(&spec, &r).unwrap().text, REFUSAL_TEXT);
        r.context.template = Some(TemplateName::Enhanced);
        assert_eq!(oracle.send(&spec, &r).unwrap().text, "Answer: B");
    }

    #[test]
    fn script_file_parsing() {
        let body = r#"{"item_id":"a","index":1,"behavior":"answer-fixed-letter:c"}
{"item_id":"a","behavior":"refuse"}
{"behavior":"garbage"}
"#;
        let s = Script::parse(body.as_bytes()).unwrap();
        let ctx = |id: &str, i| TrialContext {
            item_id: id.into(),
            index: i,
            ..Default::default()
        };
        assert_eq!(s.lookup(&ctx("a", 1)), Some(&Behavior::AnswerFixedLetter('C')));
        assert_eq!(s.lookup(&ctx("a", 0)), Some(&Behavior::Refuse));
        assert_eq!(s.lookup(&ctx("b", 0)), Some(&Behavior::Garbage));
        assert!(Script::parse(r#"{"index":1,"behavior":"refuse"}"#.as_bytes()).is_err());
        assert!(Script::parse(r#"{"item_id":"a","behavior":"dance"}"#.as_bytes()).is_err());
    }

    #[test]
    fn cache_key_depends_on_every_field() {
        let spec = BackendSpec::scripted("a");
        let base = CacheKey::new(&spec, "p", 0);
        assert_eq!(base, CacheKey::new(&spec, "p", 0));
        assert_ne!(base, CacheKey::new(&spec, "p", 1));
        assert_ne!(base, CacheKey::new(&spec, "q", 0));
        let mut other = spec.clone();
        other.temperature = 0.5;
        assert_ne!(base, CacheKey::new(&other, "p", 0));
        other = spec.clone();
        other.model_name = "m2".into();
        assert_ne!(base, CacheKey::new(&other, "p", 0));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(200.0);
        let start = Instant::now();
        for _ in 0..21 {
            limiter.acquire();
        }
        // 20 intervals of 5 ms
        let elapsed = start.elapsed().as_secs_f64();
        assert!(elapsed >= 0.1 * 0.9, "elapsed {elapsed}");
    }

    #[test]
    fn spec_validation() {
        let mut s = BackendSpec::http("gpt", "http://localhost:1", "m");
        assert!(s.validate().is_ok());
        s.rate_limit = 0.0;
        assert!(s.validate().is_err());
        let mut s = BackendSpec::http("gpt", "", "m");
        assert!(s.validate().is_err());
        s.endpoint = Some("http://x".into());
        s.id = "../evil".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn api_key_resolution_prefers_explicit_then_per_backend() {
        let mut s = BackendSpec::http("my-model.v2", "http://x", "m");
        s.api_key = Some("explicit".into());
        assert_eq!(s.resolve_api_key().as_deref(), Some("explicit"));
        s.api_key = None;
        std::env::set_var("TA_AUDIT_API_KEY_MY_MODEL_V2", "per-backend");
        assert_eq!(s.resolve_api_key().as_deref(), Some("per-backend"));
        std::env::remove_var("TA_AUDIT_API_KEY_MY_MODEL_V2");
    }
}
