use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ModelRequest, ModelResponse, TokenUsage, Transport};
use crate::error::{Error, Result};
use crate::text::approx_tokens;

/// A rule of a [`ScriptedModel`]: when every `when` substring occurs in
/// the request, answer with the next reply; the last reply repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: Vec<String>,
    #[serde(default)]
    pub unless: Vec<String>,
    pub replies: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<ScriptRule>,
}

/// Deterministic stand-in for a model, used to produce transcripts offline.
///
/// Rules are tried in order; token usage is estimated from text length.
#[derive(Debug, Default)]
pub struct ScriptedModel {
    rules: Vec<ScriptRule>,
    hits: Mutex<Vec<usize>>,
}

impl ScriptedModel {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let hits = Mutex::new(vec![0; rules.len()]);
        ScriptedModel { rules, hits }
    }

    pub fn rule(mut self, when: &[&str], replies: &[&str]) -> Self {
        self.rules.push(ScriptRule {
            when: when.iter().map(|s| s.to_string()).collect(),
            unless: vec![],
            replies: replies.iter().map(|s| s.to_string()).collect(),
        });
        self.hits.get_mut().expect("hits lock").push(0);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| Error::parse("scripted model", e))?;
        Ok(Self::new(file.rules))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

impl Transport for ScriptedModel {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let text = request.joined_text();
        let mut hits = self.hits.lock().expect("hits lock");
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.replies.is_empty()
                || !rule.when.iter().all(|w| text.contains(w.as_str()))
                || rule.unless.iter().any(|w| text.contains(w.as_str()))
            {
                continue;
            }
            let reply = &rule.replies[hits[i].min(rule.replies.len() - 1)];
            hits[i] += 1;
            return Ok(ModelResponse {
                text: reply.clone(),
                usage: TokenUsage::new(approx_tokens(&text) as u64, approx_tokens(reply) as u64),
                latency_ms: 1,
            });
        }
        let head: String = text.chars().take(120).collect();
        Err(Error::Endpoint(format!("scripted model has no rule for request starting {head:?}")))
    }
}
