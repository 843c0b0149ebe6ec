//! Chat-completion clients: an HTTP endpoint and a fixture replayer.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::ChatRequest;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingKey(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("endpoint returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Body(String),
    #[error("no fixture {0}")]
    MissingFixture(PathBuf),
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait LlmClient: Send + Sync {
    /// Returns the assistant message text.
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    /// Retries after the first attempt on transport errors, 429 and 5xx.
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_tokens: Option<u32>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_retries: 3,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_tokens: None,
        }
    }
}

/// OpenAI-style `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    cfg: EndpointConfig,
    key: String,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::MissingKey(cfg.api_key_env.clone()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpChatClient { cfg, key, http })
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        if let Some(n) = self.cfg.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, LlmError> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let resp = self
            .http
            .post(url)
            .bearer_auth(&self.key)
            .json(body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| LlmError::Body(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Body("missing choices[0].message.content".into()))
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let body = self.body(request);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    let wait = Duration::from_millis(500 << attempt.min(6));
                    log::warn!("chat request failed ({e}), retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Replays canned responses stored as `<dir>/<request hash>.txt`.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    dir: PathBuf,
}

impl FixtureClient {
    pub fn new(dir: &Path) -> Self {
        FixtureClient { dir: dir.to_path_buf() }
    }

    pub fn path_for(&self, request: &ChatRequest) -> PathBuf {
        self.dir.join(format!("{}.txt", request.hash()))
    }

    /// Stores `response` as the reply to `request`.
    pub fn record(&self, request: &ChatRequest, response: &str) -> Result<PathBuf, LlmError> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(request);
        std::fs::write(&path, response)?;
        Ok(path)
    }
}

impl LlmClient for FixtureClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let path = self.path_for(request);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LlmError::MissingFixture(path)),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ChatRequest {
        ChatRequest {
            system: "sys".into(),
            user: user.into(),
        }
    }

    #[test]
    fn fixture_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let client = FixtureClient::new(dir.path());
        client.record(&req("a"), "k | increase | none").unwrap();
        assert_eq!(client.complete(&req("a")).unwrap(), "k | increase | none");
        assert!(matches!(client.complete(&req("b")), Err(LlmError::MissingFixture(_))));
    }

    #[test]
    fn missing_key_is_reported() {
        let cfg = EndpointConfig {
            api_key_env: "KNOBTUNE_TEST_UNSET_KEY_VAR".into(),
            ..EndpointConfig::default()
        };
        assert!(matches!(HttpChatClient::new(cfg), Err(LlmError::MissingKey(_))));
    }

    #[test]
    fn request_body_shape() {
        let client = HttpChatClient {
            cfg: EndpointConfig {
                max_tokens: Some(256),
                ..EndpointConfig::default()
            },
            key: "k".into(),
            http: reqwest::blocking::Client::new(),
        };
        let body = client.body(&req("hello"));
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][1]["content"], "hello");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["max_tokens"], 256);
    }

    #[test]
    fn retry_classification() {
        assert!(LlmError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(LlmError::Status { status: 429, body: String::new() }.is_retryable());
        assert!(!LlmError::Status { status: 401, body: String::new() }.is_retryable());
        assert!(!LlmError::MissingKey("X".into()).is_retryable());
    }
}
