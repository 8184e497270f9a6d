//! Chat-completion clients, the reply cache and the audit log.
//!
//! Replies are keyed by the SHA-256 of the serialized message list
//! (`prompt_hash`) plus the model id. Replay fixtures are JSONL files of
//! `{prompt_hash, reply}`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the bearer token for live endpoints.
pub const API_KEY_ENV: &str = "GCOT_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        source: serde_json::Error,
    },
    #[error("encode: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// A system message followed by one user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub system: String,
    pub user: String,
}

impl ChatPrompt {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
        }
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage {
                role: "system".into(),
                content: self.system.clone(),
            },
            ChatMessage {
                role: "user".into(),
                content: self.user.clone(),
            },
        ]
    }

    /// Hex SHA-256 of the JSON-encoded message list.
    pub fn hash(&self) -> String {
        let encoded = serde_json::to_vec(&self.messages()).expect("messages serialize");
        hex::encode(Sha256::digest(&encoded))
    }

    /// Both messages as one text block, for audit logs.
    pub fn flatten(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

pub trait LlmClient: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, prompt: &ChatPrompt) -> Result<String, LlmError>;
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// Live client for an OpenAI-compatible `chat/completions` endpoint.
pub struct HttpClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            http,
        })
    }

    /// Reads the API key from `GCOT_LLM_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, LlmError> {
        Self::new(endpoint, model, std::env::var(API_KEY_ENV).ok())
    }
}

impl LlmClient for HttpClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &ChatPrompt) -> Result<String, LlmError> {
        let body = ChatRequest {
            model: &self.model,
            messages: prompt.messages(),
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| LlmError::Unavailable(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::Unavailable(format!("{}: HTTP {status}", self.endpoint)));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| LlmError::Unavailable(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Unavailable("response has no choices".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_hash: String,
    pub reply: String,
}

/// Serves canned replies by prompt hash. Several entries for the same hash
/// are served in file order; the last one repeats once exhausted.
pub struct ReplayClient {
    model: String,
    replies: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl ReplayClient {
    pub fn new(model: impl Into<String>, entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        let mut replies: HashMap<String, Vec<String>> = HashMap::new();
        for e in entries {
            replies.entry(e.prompt_hash).or_default().push(e.reply);
        }
        Self {
            model: model.into(),
            replies,
            cursors: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_jsonl<R: BufRead>(model: impl Into<String>, reader: R) -> Result<Self, StoreError> {
        Ok(Self::new(model, read_jsonl::<ReplayEntry, _>(reader)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for ReplayClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &ChatPrompt) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt.hash();
        let replies = self
            .replies
            .get(&hash)
            .ok_or_else(|| LlmError::Unavailable(format!("no replay entry for prompt hash {hash}")))?;
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(hash).or_default();
        let reply = replies[(*cursor).min(replies.len() - 1)].clone();
        *cursor += 1;
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub model: String,
    pub reply: String,
}

/// Reply cache keyed by (prompt hash, model id). Safe for concurrent use.
#[derive(Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<(String, String), String>>,
}

impl ResponseCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self, StoreError> {
        let cache = Self::new();
        for e in read_jsonl::<CacheEntry, _>(reader)? {
            cache.insert(&e.prompt_hash, &e.model, e.reply);
        }
        Ok(cache)
    }

    pub fn get(&self, prompt_hash: &str, model: &str) -> Option<String> {
        self.entries
            .read()
            .unwrap()
            .get(&(prompt_hash.to_owned(), model.to_owned()))
            .cloned()
    }

    pub fn insert(&self, prompt_hash: &str, model: &str, reply: String) {
        self.entries
            .write()
            .unwrap()
            .insert((prompt_hash.to_owned(), model.to_owned()), reply);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes entries sorted by key so the file is stable across runs.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        let entries = self.entries.read().unwrap();
        let mut keys: Vec<_> = entries.keys().collect();
        keys.sort();
        for key in keys {
            let entry = CacheEntry {
                prompt_hash: key.0.clone(),
                model: key.1.clone(),
                reply: entries[key].clone(),
            };
            serde_json::to_writer(&mut w, &entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub segment_or_image_id: String,
    pub prompt: String,
    pub raw_reply: String,
    pub parsed_ok: bool,
}

/// Append-only log of every raw reply received.
#[derive(Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, entry: AuditEntry) {
        self.entries.lock().unwrap().push(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the log ordered by id; attempts for one id keep their order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        let mut entries = self.entries();
        entries.sort_by(|a, b| a.segment_or_image_id.cmp(&b.segment_or_image_id));
        for e in &entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| StoreError::Decode { line: i + 1, source })?);
    }
    Ok(out)
}
