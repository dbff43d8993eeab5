//! Language-model backends.
//!
//! Everything that talks to a model goes through [`LmBackend`]. Tests and
//! desk-scale runs use the deterministic backends here ([`ScriptedBackend`],
//! [`EchoBackend`], [`FnBackend`]); live runs use [`OpenAiBackend`], usually
//! wrapped in a [`RecordingBackend`] so the session can later be replayed
//! byte-for-byte with [`ReplayBackend`].

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "SIMARENA_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("prompt for {template_id:?} has unsubstituted placeholder {placeholder}")]
    PromptUnderflow { template_id: String, placeholder: String },
    #[error("prompt for {0:?} is empty")]
    EmptyPrompt(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted for template {0:?}")]
    ScriptExhausted(String),
    #[error("record store error: {0}")]
    Store(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{[A-Za-z_][A-Za-z0-9_]*\}").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub template_id: String,
    pub rendered_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LmRequest {
    pub fn new(template_id: impl Into<String>, rendered_prompt: impl Into<String>) -> Result<Self, LmError> {
        let req = Self {
            template_id: template_id.into(),
            rendered_prompt: rendered_prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.rendered_prompt.trim().is_empty() {
            return Err(LmError::EmptyPrompt(self.template_id.clone()));
        }
        if let Some(m) = placeholder_re().find(&self.rendered_prompt) {
            return Err(LmError::PromptUnderflow {
                template_id: self.template_id.clone(),
                placeholder: m.as_str().to_string(),
            });
        }
        if self.temperature.is_nan() || self.temperature < 0.0 || self.max_tokens == 0 {
            return Err(LmError::InvalidRequest(format!(
                "temperature {} / max_tokens {}",
                self.temperature, self.max_tokens
            )));
        }
        Ok(())
    }

    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.rendered_prompt)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// A prompt file with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    pub fn placeholders(&self) -> Vec<&str> {
        placeholder_re()
            .find_iter(&self.text)
            .map(|m| &m.as_str()[1..m.as_str().len() - 1])
            .collect()
    }

    /// Substitutes placeholders in one pass; values are inserted verbatim
    /// and never re-expanded. A placeholder without a value is an error.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<LmRequest, LmError> {
        let mut missing = None;
        let rendered = placeholder_re().replace_all(&self.text, |caps: &regex::Captures<'_>| {
            let name = &caps[0][1..caps[0].len() - 1];
            match vars.iter().find(|(k, _)| *k == name) {
                Some((_, v)) => v.to_string(),
                None => {
                    missing.get_or_insert_with(|| caps[0].to_string());
                    caps[0].to_string()
                }
            }
        });
        if let Some(placeholder) = missing {
            return Err(LmError::PromptUnderflow {
                template_id: self.id.clone(),
                placeholder,
            });
        }
        let req = LmRequest {
            template_id: self.id.clone(),
            rendered_prompt: rendered.into_owned(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        };
        if req.rendered_prompt.trim().is_empty() {
            return Err(LmError::EmptyPrompt(self.id.clone()));
        }
        Ok(req)
    }
}

pub trait LmBackend: Send + Sync {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError>;
}

impl<T: LmBackend + ?Sized> LmBackend for Arc<T> {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        (**self).complete(req)
    }
}

/// Validates the request, then asks the backend.
pub fn complete(req: &LmRequest, backend: &dyn LmBackend) -> Result<String, LmError> {
    req.validate()?;
    backend.complete(req)
}

/// Plays back completions queued per template id.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

#[derive(Deserialize)]
struct ScriptLine {
    template_id: String,
    completion: String,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let backend = Self::new();
        for (k, v) in pairs {
            backend.push(k, v);
        }
        backend
    }

    pub fn push(&self, template_id: impl Into<String>, completion: impl Into<String>) {
        self.queues
            .lock()
            .expect("script lock")
            .entry(template_id.into())
            .or_default()
            .push_back(completion.into());
    }

    /// Line-delimited `{template_id, completion}` records.
    pub fn parse_jsonl(text: &str) -> Result<Self, LmError> {
        let backend = Self::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptLine = serde_json::from_str(line)
                .map_err(|e| LmError::Store(format!("script line {}: {e}", idx + 1)))?;
            backend.push(rec.template_id, rec.completion);
        }
        Ok(backend)
    }

    pub fn remaining(&self, template_id: &str) -> usize {
        self.queues
            .lock()
            .expect("script lock")
            .get(template_id)
            .map_or(0, VecDeque::len)
    }
}

impl LmBackend for ScriptedBackend {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        self.queues
            .lock()
            .expect("script lock")
            .get_mut(&req.template_id)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| LmError::ScriptExhausted(req.template_id.clone()))
    }
}

type CompletionFn = dyn Fn(&LmRequest) -> Result<String, LmError> + Send + Sync;

/// Backend computed by a closure; handy for adversarial test doubles.
pub struct FnBackend {
    f: Box<CompletionFn>,
}

impl FnBackend {
    pub fn new(f: impl Fn(&LmRequest) -> Result<String, LmError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }
}

impl std::fmt::Debug for FnBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FnBackend")
    }
}

impl LmBackend for FnBackend {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        (self.f)(req)
    }
}

/// Deterministic stand-in for a cooperative model: it repeats whatever the
/// prompt lists on its `Preferences:` line.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    prefix: String,
}

impl Default for EchoBackend {
    fn default() -> Self {
        Self {
            prefix: "Preferences:".into(),
        }
    }
}

impl EchoBackend {
    pub fn with_prefix(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into() }
    }
}

impl LmBackend for EchoBackend {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        let prefs = req
            .rendered_prompt
            .lines()
            .find_map(|l| l.trim().strip_prefix(self.prefix.as_str()))
            .map(str::trim)
            .filter(|p| !p.is_empty());
        Ok(match prefs {
            Some(p) => format!("I'm looking for something with {p}."),
            None => "Sounds good.".to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCompletion {
    pub template_id: String,
    pub prompt_hash: String,
    pub completion: String,
}

/// Persists every completion of the wrapped backend to a line-delimited
/// record store.
pub struct RecordingBackend {
    inner: Arc<dyn LmBackend>,
    out: Mutex<BufWriter<File>>,
    path: PathBuf,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LmBackend>, path: &Path) -> Result<Self, LmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LmError::Store(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            out: Mutex::new(BufWriter::new(file)),
            path: path.to_path_buf(),
        })
    }
}

impl LmBackend for RecordingBackend {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        let completion = self.inner.complete(req)?;
        let rec = StoredCompletion {
            template_id: req.template_id.clone(),
            prompt_hash: req.prompt_hash(),
            completion: completion.clone(),
        };
        let mut out = self.out.lock().expect("record lock");
        let store_err = |e: std::io::Error| LmError::Store(format!("{}: {e}", self.path.display()));
        serde_json::to_writer(&mut *out, &rec).map_err(|e| store_err(e.into()))?;
        out.write_all(b"\n").map_err(store_err)?;
        out.flush().map_err(store_err)?;
        Ok(completion)
    }
}

/// Pending completions and the last one served, per (template_id, prompt_hash).
type ReplayQueues = HashMap<(String, String), (VecDeque<String>, String)>;

/// Answers from a record store keyed by `(template_id, prompt_hash)`.
/// Repeated identical prompts replay recorded completions in order; once a
/// key runs dry its last completion is repeated.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    entries: Mutex<ReplayQueues>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, LmError> {
        let file = File::open(path).map_err(|e| LmError::Store(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LmError::Store(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| LmError::Store(format!("{} line {}: {e}", path.display(), idx + 1)))?,
            );
        }
        Ok(Self::from_records(records))
    }

    pub fn from_records(records: Vec<StoredCompletion>) -> Self {
        let mut entries = ReplayQueues::new();
        for rec in records {
            let slot = entries
                .entry((rec.template_id, rec.prompt_hash))
                .or_insert_with(|| (VecDeque::new(), String::new()));
            slot.0.push_back(rec.completion);
        }
        Self {
            entries: Mutex::new(entries),
        }
    }
}

impl LmBackend for ReplayBackend {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        let mut entries = self.entries.lock().expect("replay lock");
        let (queue, last) = entries
            .get_mut(&(req.template_id.clone(), req.prompt_hash()))
            .ok_or_else(|| LmError::ScriptExhausted(req.template_id.clone()))?;
        if let Some(next) = queue.pop_front() {
            *last = next;
        }
        Ok(last.clone())
    }
}

/// Exponential backoff with jitter: attempt `n` (0-based) waits
/// `base * 2^n * U(0.5, 1.5)` before the next try.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base: Duration::from_millis(500),
        }
    }
}

pub enum Attempt<E> {
    Retry(E),
    Fatal(E),
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            attempts: 1,
            base: Duration::ZERO,
        }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let jitter = rand::thread_rng().gen_range(0.5..1.5);
        self.base.mul_f64(2f64.powi(attempt as i32) * jitter)
    }

    /// Runs `op` until it succeeds, fails fatally, or attempts run out;
    /// returns the last error.
    pub fn run<T, E>(&self, mut op: impl FnMut() -> Result<T, Attempt<E>>) -> Result<T, E> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    attempt += 1;
                    if attempt >= attempts {
                        return Err(e);
                    }
                    thread::sleep(self.backoff(attempt - 1));
                }
            }
        }
    }
}

/// Sliding-window limiter: admits at most `per_second` calls in any
/// one-second window.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: usize,
    admitted: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(per_second: usize) -> Self {
        Self {
            per_second: per_second.max(1),
            admitted: Mutex::new(VecDeque::new()),
        }
    }

    /// The process-wide limiter. The first caller fixes the rate.
    pub fn shared(per_second: usize) -> Arc<Self> {
        static SHARED: OnceLock<Arc<RateLimiter>> = OnceLock::new();
        SHARED.get_or_init(|| Arc::new(Self::new(per_second))).clone()
    }

    pub fn per_second(&self) -> usize {
        self.per_second
    }

    /// Blocks until a slot is free and returns the admission instant.
    pub fn acquire(&self) -> Instant {
        let window = Duration::from_secs(1);
        loop {
            let wait = {
                let mut admitted = self.admitted.lock().expect("limiter lock");
                let now = Instant::now();
                while admitted.front().is_some_and(|t| now.duration_since(*t) >= window) {
                    admitted.pop_front();
                }
                if admitted.len() < self.per_second {
                    admitted.push_back(now);
                    return now;
                }
                window - now.duration_since(*admitted.front().expect("non-empty window"))
            };
            thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSettings {
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    pub requests_per_second: usize,
    pub seed: Option<u64>,
}

impl Default for LiveSettings {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo-0613".into(),
            timeout: Duration::from_secs(60),
            requests_per_second: 3,
            seed: None,
        }
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiBackend {
    settings: LiveSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
    limiter: Arc<RateLimiter>,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl OpenAiBackend {
    /// Reads the key from `SIMARENA_API_KEY` and uses the shared limiter.
    pub fn from_env(settings: LiveSettings) -> Self {
        let limiter = RateLimiter::shared(settings.requests_per_second);
        Self::new(settings, std::env::var(API_KEY_ENV).ok(), limiter, RetryPolicy::default())
    }

    pub fn new(settings: LiveSettings, api_key: Option<String>, limiter: Arc<RateLimiter>, retry: RetryPolicy) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(settings.timeout).build();
        Self {
            settings,
            api_key,
            agent,
            limiter,
            retry,
        }
    }

    fn attempt(&self, req: &LmRequest, key: &str) -> Result<String, Attempt<LmError>> {
        self.limiter.acquire();
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let mut body = serde_json::json!({
            "model": self.settings.model,
            "messages": [{"role": "user", "content": req.rendered_prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = self.settings.seed {
            body["seed"] = seed.into();
        }
        let unavailable = |msg: String| LmError::BackendUnavailable(msg);
        match self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(body)
        {
            Ok(resp) => {
                let parsed: ChatResponse = resp
                    .into_json()
                    .map_err(|e| Attempt::Retry(unavailable(format!("bad response body: {e}"))))?;
                parsed
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| Attempt::Retry(unavailable("response has no completion".into())))
            }
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(Attempt::Retry(unavailable(format!("HTTP {code}"))))
            }
            Err(ureq::Error::Status(code, _)) => Err(Attempt::Fatal(unavailable(format!("HTTP {code}")))),
            Err(ureq::Error::Transport(t)) => Err(Attempt::Retry(unavailable(t.to_string()))),
        }
    }
}

impl LmBackend for OpenAiBackend {
    fn complete(&self, req: &LmRequest) -> Result<String, LmError> {
        req.validate()?;
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| LmError::BackendUnavailable(format!("{API_KEY_ENV} is not set")))?;
        self.retry.run(|| self.attempt(req, key))
    }
}
