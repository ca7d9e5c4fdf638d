//! Chat-completion backends: an OpenAI-compatible HTTP client and a scripted
//! stand-in that replays canned responses.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::{Conversation, Role, ACKNOWLEDGEMENT};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmError {
    #[error("transport error{}: {body}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, body: String },
    #[error("scripted backend has no response left for call {call}")]
    ScriptExhausted { call: usize },
    #[error("request timed out after {secs} s")]
    Timeout { secs: u64 },
    #[error("invalid inference parameters: {0}")]
    InvalidParams(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct InferenceParams {
    pub temperature: f64,
    pub max_response_tokens: u32,
    pub model_name: String,
    pub seed: Option<u64>,
}

impl Default for InferenceParams {
    fn default() -> Self {
        InferenceParams {
            temperature: 0.0,
            max_response_tokens: 1024,
            model_name: "gpt-3.5-turbo".into(),
            seed: None,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidParams(format!(
                "temperature {} is outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_response_tokens == 0 {
            return Err(LlmError::InvalidParams("max_response_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A chat model. Implementations must not modify the conversation.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, conv: &Conversation, params: &InferenceParams) -> Result<String, LlmError>;

    /// True when repeated runs give identical responses.
    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring the last user turn must contain; absent matches any turn.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matcher: Option<String>,
    pub response: String,
}

/// Replays canned responses. Each call consumes the first unused entry whose
/// matcher occurs in the last user turn.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    used: Mutex<(Vec<bool>, usize)>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let n = entries.len();
        ScriptedBackend {
            entries,
            used: Mutex::new((vec![false; n], 0)),
        }
    }

    /// Entries without matchers, consumed in order.
    pub fn from_responses<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(
            responses
                .into_iter()
                .map(|r| ScriptEntry {
                    matcher: None,
                    response: r.into(),
                })
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| LlmError::Config(format!("invalid script: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn calls(&self) -> usize {
        self.used.lock().expect("script lock").1
    }

    pub fn remaining(&self) -> usize {
        self.used.lock().expect("script lock").0.iter().filter(|u| !**u).count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, conv: &Conversation, params: &InferenceParams) -> Result<String, LlmError> {
        params.validate()?;
        let last_user = conv
            .turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map_or("", |t| t.text.as_str());
        let mut guard = self.used.lock().expect("script lock");
        let (used, calls) = &mut *guard;
        *calls += 1;
        let pick = self
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !used[*i] && e.matcher.as_deref().is_none_or(|m| last_user.contains(m)));
        match pick {
            Some((i, e)) => {
                used[i] = true;
                Ok(e.response.clone())
            }
            None => Err(LlmError::ScriptExhausted { call: *calls }),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthStyle {
    /// `Authorization: Bearer <key>`.
    #[default]
    Bearer,
    /// `api-key: <key>` as used by Azure deployments.
    ApiKey,
}

/// HTTP backend settings. The API key is never printed.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub auth: AuthStyle,
    pub timeout_secs: u64,
    pub max_tries: u32,
    pub backoff_base_ms: u64,
    /// Send the first fixed prompt as a system message.
    pub system_prompt_mode: bool,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key: None,
            model: None,
            auth: AuthStyle::Bearer,
            timeout_secs: 120,
            max_tries: 3,
            backoff_base_ms: 500,
            system_prompt_mode: false,
        }
    }
}

impl fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpConfig")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("auth", &self.auth)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_tries", &self.max_tries)
            .field("backoff_base_ms", &self.backoff_base_ms)
            .field("system_prompt_mode", &self.system_prompt_mode)
            .finish()
    }
}

impl HttpConfig {
    /// Reads `CHATPLAN_ENDPOINT`, `CHATPLAN_API_KEY`, `CHATPLAN_MODEL`,
    /// `CHATPLAN_TIMEOUT_SECS`, `CHATPLAN_AUTH` (`bearer` | `api_key`) and
    /// `CHATPLAN_SYSTEM_PROMPT` over the defaults.
    pub fn from_env() -> Result<Self, LlmError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, LlmError> {
        let mut cfg = HttpConfig::default();
        if let Some(v) = get("CHATPLAN_ENDPOINT") {
            cfg.endpoint = v;
        }
        cfg.api_key = get("CHATPLAN_API_KEY").filter(|k| !k.is_empty());
        cfg.model = get("CHATPLAN_MODEL");
        if let Some(v) = get("CHATPLAN_TIMEOUT_SECS") {
            cfg.timeout_secs = v
                .parse()
                .map_err(|_| LlmError::Config(format!("CHATPLAN_TIMEOUT_SECS `{v}` is not a number")))?;
        }
        if let Some(v) = get("CHATPLAN_AUTH") {
            cfg.auth = match v.as_str() {
                "bearer" => AuthStyle::Bearer,
                "api_key" | "azure" => AuthStyle::ApiKey,
                other => return Err(LlmError::Config(format!("unknown CHATPLAN_AUTH `{other}`"))),
            };
        }
        if let Some(v) = get("CHATPLAN_SYSTEM_PROMPT") {
            cfg.system_prompt_mode = matches!(v.as_str(), "1" | "true" | "yes");
        }
        Ok(cfg)
    }

    /// Reads a JSON config file; `CHATPLAN_API_KEY` fills a missing key.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        #[derive(Deserialize)]
        struct WithKey {
            #[serde(flatten)]
            cfg: HttpConfig,
            api_key: Option<String>,
        }
        let parsed: WithKey =
            serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = parsed.cfg;
        cfg.api_key = parsed.api_key.or_else(|| std::env::var("CHATPLAN_API_KEY").ok());
        Ok(cfg)
    }
}

/// OpenAI-compatible chat-completions client (blocking).
///
/// Inside an async runtime, call it from a blocking task.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend").field("config", &self.config).finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if config.max_tries == 0 {
            return Err(LlmError::Config("max_tries must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// The request body sent for a conversation.
    pub fn request_body(&self, conv: &Conversation, params: &InferenceParams) -> Value {
        let mut messages = Vec::with_capacity(conv.turns.len());
        let mut skip_ack = false;
        for (i, t) in conv.turns.iter().enumerate() {
            if skip_ack {
                skip_ack = false;
                if t.role == Role::Assistant && t.text == ACKNOWLEDGEMENT {
                    continue;
                }
            }
            let role = match t.role {
                Role::User if i == 0 && self.config.system_prompt_mode => {
                    skip_ack = true;
                    "system"
                }
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": t.text}));
        }
        let model = self.config.model.clone().unwrap_or_else(|| params.model_name.clone());
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_response_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, (bool, LlmError)> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = match self.config.auth {
                AuthStyle::Bearer => req.bearer_auth(key),
                AuthStyle::ApiKey => req.header("api-key", key),
            };
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                (true, LlmError::Timeout {
                    secs: self.config.timeout_secs,
                })
            } else {
                (true, LlmError::Transport {
                    status: None,
                    body: e.to_string(),
                })
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            (true, LlmError::Transport {
                status: Some(status.as_u16()),
                body: e.to_string(),
            })
        })?;
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((retry, LlmError::Transport {
                status: Some(status.as_u16()),
                body: text,
            }));
        }
        let value: Value = serde_json::from_str(&text).map_err(|_| {
            (false, LlmError::Transport {
                status: Some(status.as_u16()),
                body: text.clone(),
            })
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or((false, LlmError::Transport {
                status: Some(status.as_u16()),
                body: text,
            }))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, conv: &Conversation, params: &InferenceParams) -> Result<String, LlmError> {
        params.validate()?;
        let body = self.request_body(conv, params);
        let mut last = None;
        for attempt in 0..self.config.max_tries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_base_ms << (attempt - 1)));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((true, e)) => last = Some(e),
                Err((false, e)) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Supplies a backend per benchmark scenario.
pub trait BackendProvider: Send + Sync {
    fn backend_for(&self, scenario_id: &str) -> Result<Arc<dyn ChatBackend>, LlmError>;

    /// True when every backend is deterministic, so runs may be sequential
    /// and reproducible.
    fn is_deterministic(&self) -> bool;
}

/// One shared backend for every scenario.
pub struct SharedBackend(pub Arc<dyn ChatBackend>);

impl BackendProvider for SharedBackend {
    fn backend_for(&self, _: &str) -> Result<Arc<dyn ChatBackend>, LlmError> {
        Ok(self.0.clone())
    }

    fn is_deterministic(&self) -> bool {
        self.0.is_deterministic()
    }
}

/// A directory of `<scenario_id>.json` scripts. Every call to
/// [`BackendProvider::backend_for`] starts the script from its first entry,
/// so each trial replays the same responses.
pub struct ScriptLibrary {
    source: ScriptSource,
    cache: Mutex<HashMap<String, Vec<ScriptEntry>>>,
}

enum ScriptSource {
    Dir(PathBuf),
    Inline(HashMap<String, String>),
}

impl ScriptLibrary {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        ScriptLibrary {
            source: ScriptSource::Dir(dir.into()),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Scripts given as `(scenario_id, json)` pairs.
    pub fn from_texts<'a>(scripts: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        ScriptLibrary {
            source: ScriptSource::Inline(scripts.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn entries(&self, scenario_id: &str) -> Result<Vec<ScriptEntry>, LlmError> {
        let mut cache = self.cache.lock().expect("library lock");
        if let Some(e) = cache.get(scenario_id) {
            return Ok(e.clone());
        }
        let text = match &self.source {
            ScriptSource::Dir(dir) => {
                let path = dir.join(format!("{scenario_id}.json"));
                fs::read_to_string(&path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?
            }
            ScriptSource::Inline(map) => map
                .get(scenario_id)
                .cloned()
                .ok_or_else(|| LlmError::Config(format!("no script for scenario `{scenario_id}`")))?,
        };
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("invalid script `{scenario_id}`: {e}")))?;
        cache.insert(scenario_id.to_string(), entries.clone());
        Ok(entries)
    }
}

impl BackendProvider for ScriptLibrary {
    fn backend_for(&self, scenario_id: &str) -> Result<Arc<dyn ChatBackend>, LlmError> {
        Ok(Arc::new(ScriptedBackend::new(self.entries(scenario_id)?)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
