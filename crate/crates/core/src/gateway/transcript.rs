use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelRequest, ModelResponse};
use crate::error::{write_atomic, Error, Result};

/// One recorded model call: a single line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request: ModelRequest,
    pub response: ModelResponse,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayStore {
    responses: HashMap<String, ModelResponse>,
    pub warnings: Vec<String>,
}

impl ReplayStore {
    /// Later entries win over earlier ones with the same digest.
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut store = ReplayStore::default();
        for entry in entries {
            store.insert(entry);
        }
        store
    }

    fn insert(&mut self, entry: TranscriptEntry) {
        if self
            .responses
            .insert(entry.digest.clone(), entry.response)
            .is_some()
        {
            let msg = format!("duplicate transcript digest {}; keeping the later entry", entry.digest);
            tracing::warn!("{msg}");
            self.warnings.push(msg);
        }
    }

    pub fn get(&self, digest: &str) -> Option<&ModelResponse> {
        self.responses.get(digest)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut store = ReplayStore::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(line).map_err(|e| Error::Transcript {
                line: i + 1,
                message: e.to_string(),
            })?;
            if entry.digest != entry.request.digest() {
                return Err(Error::Transcript {
                    line: i + 1,
                    message: "digest does not match the recorded request".into(),
                });
            }
            store.insert(entry);
        }
        Ok(store)
    }
}

pub fn load_transcript(path: &Path) -> Result<ReplayStore> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ReplayStore::parse(&text)
}

/// Reads the raw entries of a transcript, for appending new recordings.
pub fn read_entries(path: &Path) -> Result<Vec<TranscriptEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Transcript {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_transcript(path: &Path, entries: &[TranscriptEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in entries {
        out.push_str(&serde_json::to_string(entry).expect("transcript entries serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
