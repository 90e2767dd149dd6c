//! Chat-completions style HTTP client.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, GeneratorError, GeneratorRequest};

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(config.timeout)).build().into();
        RemoteBackend { config, agent }
    }

    /// The exact request body sent for `rendered`.
    pub fn body(&self, rendered: &str) -> Value {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": rendered }],
        })
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, _req: &GeneratorRequest, rendered: &str, _attempt: u32) -> Result<String, GeneratorError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var).map_err(|_| GeneratorError::BackendUnavailable(format!("environment variable {var} is not set")))?;
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_vec(&self.body(rendered)).expect("json body");
        let mut resp = request.send(&body[..]).map_err(|e| GeneratorError::BackendUnavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| GeneratorError::Backend(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(GeneratorError::Backend(format!("{url} returned HTTP {status}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| GeneratorError::Backend(format!("response is not JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| GeneratorError::Backend("response lacks choices[0].message.content".into()))
    }
}
