use std::time::Duration;

use serde_json::{json, Value};

use super::parse::parse_llm_response;
use super::prompt::CotPrompt;
use super::{AssessmentInput, CotError};
use crate::event_model::{ProducedBy, ThreatReport, VerdictBands};
use crate::http::{join_url, HttpFailure, JsonClient};

pub const ENDPOINT_ENV: &str = "E2T_LLM_ENDPOINT";
pub const TOKEN_ENV: &str = "E2T_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            model: "threat-cot".to_owned(),
            timeout: Duration::from_secs(30),
        }
    }

    /// Endpoint from `E2T_LLM_ENDPOINT`, bearer token from `E2T_LLM_TOKEN`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        let mut cfg = Self::new(endpoint);
        cfg.token = std::env::var(TOKEN_ENV).ok().filter(|s| !s.is_empty());
        Some(cfg)
    }
}

/// Chat-completions client. One request in flight per caller; the client
/// itself can be shared across streams.
pub struct LlmClient {
    config: LlmConfig,
    http: JsonClient,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Self {
        let http = JsonClient::new(config.timeout, config.token.clone());
        Self { config, http }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn request_body(&self, prompt: &CotPrompt) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.system_instructions},
                {"role": "user", "content": prompt.user_message()},
            ],
            "temperature": 0,
        })
    }

    pub fn complete(&self, prompt: &CotPrompt) -> Result<String, CotError> {
        let url = join_url(&self.config.endpoint, "v1/chat/completions");
        let resp = self.http.post(&url, &self.request_body(prompt)).map_err(|f| match f {
            HttpFailure::Timeout => CotError::Timeout,
            HttpFailure::Transport(m) => CotError::Transport(m),
            HttpFailure::Body(m) => CotError::ParseFailure(format!("unreadable response body: {m}")),
        })?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| CotError::ParseFailure("response has no choices[0].message.content".into()))
    }
}

pub fn assess_with_llm(
    prompt: &CotPrompt,
    client: &LlmClient,
    input: &AssessmentInput,
    bands: &VerdictBands,
) -> Result<ThreatReport, CotError> {
    let text = client.complete(prompt)?;
    let parsed = parse_llm_response(&text)?;
    Ok(ThreatReport {
        window_start: input.window_start,
        window_end: input.window_end,
        threat_score: parsed.score,
        verdict: bands.verdict(parsed.score),
        tier1_scene: parsed.tier1,
        tier2_semantics: parsed.tier2,
        tier3_narrative: parsed.tier3,
        supporting_event_ids: input.focus.iter().map(|e| e.representative_event_id).collect(),
        produced_by: ProducedBy::Llm,
    })
}
