use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ModelRequest, ModelResponse, TokenUsage, Transport};
use crate::error::{Error, Result};

/// OpenAI-style `/chat/completions` endpoint over blocking HTTP.
pub struct ChatCompletionsTransport {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl ChatCompletionsTransport {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        ChatCompletionsTransport {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            agent,
        }
    }

    /// Reads the credential from `env_var`.
    pub fn from_env(endpoint: impl Into<String>, env_var: &str, timeout: Duration) -> Result<Self> {
        let key = std::env::var(env_var)
            .map_err(|_| Error::Endpoint(format!("credential environment variable {env_var} is not set")))?;
        Ok(Self::new(endpoint, key, timeout))
    }

    fn body(request: &ModelRequest) -> Value {
        json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }
}

impl Transport for ChatCompletionsTransport {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let started = Instant::now();
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(Self::body(request))
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("reading response body: {e}")))?;
        if status == 429 || status >= 500 {
            return Err(Error::Transport(format!("endpoint returned {status}")));
        }
        if status >= 400 {
            return Err(Error::Endpoint(format!("endpoint returned {status}: {body}")));
        }
        parse_completion(&body, started.elapsed().as_millis() as u64)
    }
}

fn parse_completion(body: &Value, latency_ms: u64) -> Result<ModelResponse> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Endpoint("response has no choices[0].message.content".into()))?;
    let usage = TokenUsage {
        input_tokens: body
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
        output_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(ModelResponse {
        text: text.to_string(),
        usage,
        latency_ms,
    })
}
