//! Chat backends and token/cost accounting.
//!
//! A backend turns one [`ChatExchange`] into one [`ChatOutcome`]. Calls never
//! share conversation state. Three implementations ship here:
//!
//! - [`OpenAiBackend`] talks to any OpenAI-compatible `/v1/chat/completions`
//!   endpoint.
//! - [`ScriptedBackend`] replays a JSONL script of canned responses.
//! - [`SyntheticBackend`] answers every requested key from a verdict
//!   function, which makes full-corpus runs possible without a script per
//!   request.
//!
//! The two mocks report [`mock_usage`] token counts. These are a whitespace
//! word count for tests only, not a real tokenizer.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::io::BufRead;
use std::ops::{Add, AddAssign};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Environment variable holding the live endpoint's API key.
pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

const DEFAULT_PRICES: &str = include_str!("../data/prices.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response is missing {0}")]
    MissingField(&'static str),
    #[error("mock script: {0}")]
    Script(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("model {0:?} has no entry in the price sheet")]
    UnknownModel(String),
    #[error("environment variable {0} is not set")]
    MissingCredential(&'static str),
    #[error("invalid price sheet: {0}")]
    InvalidPrices(String),
    #[error("invalid mock script at line {line}: {message}")]
    InvalidScript { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatExchange {
    pub system_text: String,
    pub user_text: String,
    pub model: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatOutcome {
    pub content: String,
    pub usage: TokenUsage,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, exchange: &ChatExchange) -> Result<ChatOutcome, BackendError>;
}

#[async_trait]
impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    async fn complete(&self, exchange: &ChatExchange) -> Result<ChatOutcome, BackendError> {
        (**self).complete(exchange).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    /// USD per 1,000 input tokens.
    pub input_per_1k: f64,
    /// USD per 1,000 output tokens.
    pub output_per_1k: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceSheet(pub BTreeMap<String, ModelPrice>);

impl PriceSheet {
    /// The bundled sheet: one zero-priced entry per model used in the
    /// original experiments. Operators are expected to supply real prices.
    pub fn bundled() -> Self {
        Self::from_json_str(DEFAULT_PRICES).expect("bundled price sheet is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let sheet: PriceSheet =
            serde_json::from_str(text).map_err(|e| ConfigError::InvalidPrices(e.to_string()))?;
        for (model, price) in &sheet.0 {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(price.input_per_1k) || !ok(price.output_per_1k) {
                return Err(ConfigError::InvalidPrices(format!(
                    "{model} has a negative or non-finite price"
                )));
            }
        }
        Ok(sheet)
    }

    pub fn with_model(mut self, model: impl Into<String>, price: ModelPrice) -> Self {
        self.0.insert(model.into(), price);
        self
    }

    pub fn get(&self, model: &str) -> Option<&ModelPrice> {
        self.0.get(model)
    }
}

/// Dollar cost of `usage` at `model`'s per-1k-token prices.
pub fn cost_of(usage: TokenUsage, model: &str, prices: &PriceSheet) -> Result<f64, ConfigError> {
    let price = prices
        .get(model)
        .ok_or_else(|| ConfigError::UnknownModel(model.to_string()))?;
    Ok(usage.input_tokens as f64 / 1000.0 * price.input_per_1k
        + usage.output_tokens as f64 / 1000.0 * price.output_per_1k)
}

/// Whitespace word counts standing in for provider-reported usage.
pub fn mock_usage(system_text: &str, user_text: &str, content: &str) -> TokenUsage {
    let words = |s: &str| s.split_whitespace().count() as u64;
    TokenUsage {
        input_tokens: words(system_text) + words(user_text),
        output_tokens: words(content),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring that the system or user prompt must contain for this entry
    /// to apply. `None` matches every request.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub selector: Option<String>,
    pub content: String,
}

impl ScriptEntry {
    pub fn any(content: impl Into<String>) -> Self {
        ScriptEntry {
            selector: None,
            content: content.into(),
        }
    }
}

/// Replays canned responses.
///
/// Each distinct prompt (system + user text) walks the entries whose
/// selector it matches, in script order, one entry per call. Once a prompt
/// has used up its entries the last one repeats. Because the cursor is kept
/// per prompt, the response to a given request does not depend on how
/// concurrent requests for other prompts interleave.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    cursors: Mutex<HashMap<(String, String), usize>>,
    transcript: Mutex<Vec<ChatExchange>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedBackend {
            entries,
            cursors: Mutex::new(HashMap::new()),
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Every request gets the same response.
    pub fn fixed(content: impl Into<String>) -> Self {
        Self::new(vec![ScriptEntry::any(content)])
    }

    /// Unconditional responses, consumed in order per prompt.
    pub fn sequence<S: Into<String>>(contents: impl IntoIterator<Item = S>) -> Self {
        Self::new(contents.into_iter().map(ScriptEntry::any).collect())
    }

    pub fn load<R: BufRead>(source: R) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(&line).map_err(|e| ConfigError::InvalidScript {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(ConfigError::InvalidScript {
                line: 0,
                message: "script has no entries".into(),
            });
        }
        Ok(Self::new(entries))
    }

    /// Exchanges received so far, in arrival order.
    pub fn transcript(&self) -> Vec<ChatExchange> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn calls(&self) -> usize {
        self.transcript.lock().unwrap().len()
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(&self, exchange: &ChatExchange) -> Result<ChatOutcome, BackendError> {
        self.transcript.lock().unwrap().push(exchange.clone());
        let matching: Vec<&ScriptEntry> = self
            .entries
            .iter()
            .filter(|e| match &e.selector {
                Some(sel) => exchange.system_text.contains(sel) || exchange.user_text.contains(sel),
                None => true,
            })
            .collect();
        if matching.is_empty() {
            return Err(BackendError::Script("no entry matches the request".into()));
        }
        let step = {
            let mut cursors = self.cursors.lock().unwrap();
            let cursor = cursors
                .entry((exchange.system_text.clone(), exchange.user_text.clone()))
                .or_insert(0);
            let step = *cursor;
            *cursor += 1;
            step
        };
        let entry = matching[step.min(matching.len() - 1)];
        Ok(ChatOutcome {
            usage: mock_usage(&exchange.system_text, &exchange.user_text, &entry.content),
            content: entry.content.clone(),
        })
    }
}

type VerdictFn = dyn Fn(&str, &str) -> bool + Send + Sync;

/// Answers every key in the request's concern map with a well-formed
/// Yes/No dictionary, taking each verdict from a function of
/// `(passage text, key)`.
pub struct SyntheticBackend {
    verdict: Box<VerdictFn>,
    key_pattern: Regex,
    calls: Mutex<usize>,
}

impl std::fmt::Debug for SyntheticBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticBackend").finish_non_exhaustive()
    }
}

impl SyntheticBackend {
    pub fn from_fn(verdict: impl Fn(&str, &str) -> bool + Send + Sync + 'static) -> Self {
        SyntheticBackend {
            verdict: Box::new(verdict),
            key_pattern: Regex::new(r"(VaxConcerns \d+(?:\.\d+)?):").unwrap(),
            calls: Mutex::new(0),
        }
    }

    /// Pseudo-random verdicts, fixed by `seed`, that are "Yes" with
    /// probability `positive_rate`.
    pub fn seeded(seed: u64, positive_rate: f64) -> Self {
        Self::from_fn(move |passage, key| {
            let mut h = DefaultHasher::new();
            (seed, passage, key).hash(&mut h);
            (h.finish() as f64 / u64::MAX as f64) < positive_rate
        })
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }

    /// Keys listed in the concern map of a rendered system prompt.
    pub fn requested_keys(&self, system_text: &str) -> Vec<String> {
        let map_section = system_text
            .split_once("CONCERN MAP:")
            .map(|(_, rest)| rest)
            .unwrap_or(system_text);
        let map_section = map_section
            .split_once("Please read the PARAGRAPH")
            .map(|(head, _)| head)
            .unwrap_or(map_section);
        let mut keys: Vec<String> = Vec::new();
        for c in self.key_pattern.captures_iter(map_section) {
            let key = c[1].to_string();
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys
    }
}

#[async_trait]
impl ChatBackend for SyntheticBackend {
    async fn complete(&self, exchange: &ChatExchange) -> Result<ChatOutcome, BackendError> {
        *self.calls.lock().unwrap() += 1;
        let passage = exchange
            .user_text
            .strip_prefix(crate::prompting::USER_PREFIX)
            .unwrap_or(&exchange.user_text);
        let entries: Vec<String> = self
            .requested_keys(&exchange.system_text)
            .into_iter()
            .map(|key| {
                let answer = if (self.verdict)(passage, &key) { "Yes" } else { "No" };
                format!("\"{key}\": \"{answer}\"")
            })
            .collect();
        let content = format!("{{{}}}", entries.join(", "));
        Ok(ChatOutcome {
            usage: mock_usage(&exchange.system_text, &exchange.user_text, &content),
            content,
        })
    }
}

/// Client for an OpenAI-compatible chat completions endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: String,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, api_key: impl Into<String>, timeout: Duration) -> Result<Self, ConfigError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("cannot build HTTP client: {e}")))?;
        Ok(OpenAiBackend {
            client,
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.into(),
        })
    }

    /// Reads the credential from `LLM_API_KEY`.
    pub fn from_env(base_url: &str, timeout: Duration) -> Result<Self, ConfigError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or(ConfigError::MissingCredential(API_KEY_ENV))?;
        Self::new(base_url, key, timeout)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

pub fn request_body(exchange: &ChatExchange) -> Value {
    json!({
        "model": exchange.model,
        "temperature": exchange.temperature,
        "messages": [
            {"role": "system", "content": exchange.system_text},
            {"role": "user", "content": exchange.user_text},
        ],
    })
}

/// Pulls content and usage out of a chat completions response body.
pub fn parse_response_body(body: &Value) -> Result<ChatOutcome, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or(BackendError::MissingField("choices[0].message.content"))?;
    let input = body
        .pointer("/usage/prompt_tokens")
        .and_then(Value::as_u64)
        .ok_or(BackendError::MissingField("usage.prompt_tokens"))?;
    let output = body
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .ok_or(BackendError::MissingField("usage.completion_tokens"))?;
    Ok(ChatOutcome {
        content: content.to_string(),
        usage: TokenUsage {
            input_tokens: input,
            output_tokens: output,
        },
    })
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    async fn complete(&self, exchange: &ChatExchange) -> Result<ChatOutcome, BackendError> {
        let transport = |e: reqwest::Error| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&request_body(exchange))
            .send()
            .await
            .map_err(transport)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(BackendError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let body: Value = response.json().await.map_err(transport)?;
        parse_response_body(&body)
    }
}
