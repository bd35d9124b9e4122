use std::time::Duration;

use serde_json::{json, Value};

use super::{EmbedError, EmbeddingVector, TextEncoder};
use crate::http::{join_url, HttpFailure, JsonClient};

pub const ENDPOINT_ENV: &str = "E2T_EMBED_ENDPOINT";
pub const TOKEN_ENV: &str = "E2T_EMBED_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

impl RemoteEmbedderConfig {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            dim,
            timeout: Duration::from_secs(10),
        }
    }

    /// Reads the endpoint and optional bearer token from the environment.
    pub fn from_env(dim: usize) -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        let mut cfg = Self::new(endpoint, dim);
        cfg.token = std::env::var(TOKEN_ENV).ok().filter(|s| !s.is_empty());
        Some(cfg)
    }
}

/// Client for `POST {endpoint}/embed`. The agent is shareable across threads,
/// so concurrent callers each get their own in-flight request and deadline.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Self {
        let client = JsonClient::new(config.timeout, config.token.clone());
        Self { config, client }
    }

    pub fn embed_remote(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let url = join_url(&self.config.endpoint, "embed");
        let resp = self
            .client
            .post(&url, &json!({ "input": text }))
            .map_err(|f| match f {
                HttpFailure::Timeout => EmbedError::Timeout,
                HttpFailure::Transport(m) | HttpFailure::Body(m) => EmbedError::Transport(m),
            })?;
        let values = resp
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Transport("response has no embedding array".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| EmbedError::Transport("non-numeric embedding value".into())))
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != self.config.dim {
            return Err(EmbedError::BadDim {
                expected: self.config.dim,
                actual: values.len(),
            });
        }
        Ok(EmbeddingVector::normalized(&values))
    }
}

impl TextEncoder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed_remote(text)
    }
}
