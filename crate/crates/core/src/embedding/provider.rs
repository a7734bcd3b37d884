//! HTTP embedding backend speaking the OpenAI-compatible `/v1/embeddings`
//! wire format, with retry and exponential backoff on transient failures.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbeddingBackend, EmbeddingVector};

fn default_base_url() -> String {
    "https://api.openai.com".to_string()
}
fn default_model() -> String {
    "text-embedding-3-small".to_string()
}
fn default_batch_size() -> usize {
    2048
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    4
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable holding the API key; `None` for
    /// unauthenticated endpoints.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: default_base_url(),
            model: default_model(),
            api_key_env: Some("OPENAI_API_KEY".to_string()),
            batch_size: default_batch_size(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            retry_backoff_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f32>,
}

pub struct HttpEmbeddingBackend {
    cfg: ProviderConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingBackend {
    pub fn new(cfg: ProviderConfig) -> Result<Self, EmbedError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| EmbedError::MissingApiKey(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| EmbedError::Transport {
                attempts: 0,
                message: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(Self {
            cfg,
            api_key,
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/embeddings", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, AttemptError> {
        let mut req = self.client.post(self.endpoint()).json(&EmbeddingsRequest {
            model: &self.cfg.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;

        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(AttemptError::Fatal(EmbedError::Auth {
                status: status.as_u16(),
            }));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            let snippet: String = body.chars().take(200).collect();
            return Err(AttemptError::Fatal(EmbedError::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {snippet}"),
            }));
        }

        let parsed: EmbeddingsResponse = resp
            .json()
            .map_err(|e| AttemptError::Retryable(format!("bad response body: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(AttemptError::Fatal(EmbedError::CountMismatch {
                requested: texts.len(),
                returned: parsed.data.len(),
            }));
        }
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for item in parsed.data {
            if item.index >= slots.len() {
                return Err(AttemptError::Fatal(EmbedError::Transport {
                    attempts: 1,
                    message: format!("response index {} out of range", item.index),
                }));
            }
            slots[item.index] = Some(item.embedding);
        }
        slots
            .into_iter()
            .map(|s| {
                let values = s.ok_or(AttemptError::Fatal(EmbedError::CountMismatch {
                    requested: texts.len(),
                    returned: 0,
                }))?;
                EmbeddingVector::new(values).map_err(AttemptError::Fatal)
            })
            .collect()
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(EmbedError),
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut last_message = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let backoff = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(message)) => last_message = message,
            }
        }
        Err(EmbedError::Transport {
            attempts: self.cfg.max_retries + 1,
            message: last_message,
        })
    }

    fn model_name(&self) -> &str {
        &self.cfg.model
    }
}
