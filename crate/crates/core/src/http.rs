//! Blocking JSON-over-HTTP helper shared by the embedding and LLM clients.

use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum HttpFailure {
    Timeout,
    Transport(String),
    Body(String),
}

pub(crate) struct JsonClient {
    agent: ureq::Agent,
    token: Option<String>,
}

impl JsonClient {
    pub(crate) fn new(timeout: Duration, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { agent, token }
    }

    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value, HttpFailure> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| HttpFailure::Body(e.to_string()))?;
        let resp = req.send(&payload[..]).map_err(classify)?;
        resp.into_body()
            .read_json::<Value>()
            .map_err(|e| match classify(e) {
                HttpFailure::Transport(m) => HttpFailure::Body(m),
                other => other,
            })
    }
}

fn classify(e: ureq::Error) -> HttpFailure {
    match e {
        ureq::Error::Timeout(_) => HttpFailure::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut || io.kind() == std::io::ErrorKind::WouldBlock => {
            HttpFailure::Timeout
        }
        other => HttpFailure::Transport(other.to_string()),
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}
