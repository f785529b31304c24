//! Library package index and candidate search.
//!
//! Two on-disk shapes are accepted. The native TOML schema:
//!
//! ```toml
//! source_id = "fixture"
//! [[libraries]]
//! name = "DHT sensor library"
//! description = "Arduino library for DHT11, DHT22, etc Temperature & Humidity Sensors"
//! paragraph = "..."
//! versions = ["1.4.4", "1.4.6"]
//! architectures = ["*"]
//! ```
//!
//! and a JSON document with the same `libraries` array, where each record may
//! instead carry a single `version` (and `sentence` in place of
//! `description`): one record per published release, merged on load.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::token_set;

pub const DEFAULT_TOP_N: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryDetails {
    pub name: String,
    pub description: String,
    pub paragraph: String,
    pub versions: Vec<String>,
    pub architectures: Vec<String>,
}

impl LibraryDetails {
    /// The text the resolver and search look at.
    pub fn search_text(&self) -> String {
        format!("{} {} {}", self.name, self.description, self.paragraph)
    }

    pub fn latest_version(&self) -> Option<&str> {
        self.versions
            .iter()
            .max_by(|a, b| compare_versions(a, b))
            .map(String::as_str)
    }
}

/// Orders dotted versions numerically component by component, falling
/// back to string comparison for non-numeric parts.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut left = a.split(['.', '-', '+']);
    let mut right = b.split(['.', '-', '+']);
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => {
                let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
                    (Ok(x), Ok(y)) => x.cmp(&y),
                    _ => x.cmp(y),
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LibraryIndex {
    pub entries: Vec<LibraryDetails>,
    pub source_id: String,
}

#[derive(Debug, Deserialize)]
struct RawIndex {
    #[serde(default)]
    source_id: Option<String>,
    #[serde(default)]
    libraries: Vec<RawLibrary>,
}

#[derive(Debug, Deserialize)]
struct RawLibrary {
    name: Option<String>,
    #[serde(alias = "sentence")]
    description: Option<String>,
    paragraph: Option<String>,
    versions: Option<Vec<String>>,
    version: Option<String>,
    architectures: Option<Vec<String>>,
}

impl LibraryIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let default_id = path.display().to_string();
        if is_json {
            Self::from_json(&text, &default_id)
        } else {
            Self::from_toml(&text, &default_id)
        }
    }

    pub fn from_toml(text: &str, default_source: &str) -> Result<Self> {
        let raw: RawIndex = toml::from_str(text).map_err(|e| Error::parse("library index", e))?;
        Self::from_raw(raw, default_source)
    }

    pub fn from_json(text: &str, default_source: &str) -> Result<Self> {
        let raw: RawIndex =
            serde_json::from_str(text).map_err(|e| Error::parse("library index", e))?;
        Self::from_raw(raw, default_source)
    }

    fn from_raw(raw: RawIndex, default_source: &str) -> Result<Self> {
        let mut entries: Vec<LibraryDetails> = Vec::new();
        let mut by_name: HashMap<String, usize> = HashMap::new();
        for (i, rec) in raw.libraries.into_iter().enumerate() {
            let name = rec
                .name
                .filter(|n| !n.trim().is_empty())
                .ok_or_else(|| Error::IndexEntry {
                    entry: format!("#{i}"),
                    message: "missing `name`".into(),
                })?;
            let mut versions = rec.versions.unwrap_or_default();
            versions.extend(rec.version);
            if versions.is_empty() {
                return Err(Error::IndexEntry {
                    entry: name,
                    message: "missing `versions`".into(),
                });
            }
            let architectures = match rec.architectures {
                Some(a) if !a.is_empty() => a,
                _ => {
                    return Err(Error::IndexEntry {
                        entry: name,
                        message: "missing `architectures`".into(),
                    })
                }
            };
            let details = LibraryDetails {
                name,
                description: rec.description.unwrap_or_default(),
                paragraph: rec.paragraph.unwrap_or_default(),
                versions,
                architectures,
            };
            match by_name.get(&details.name.to_lowercase()) {
                Some(&idx) => merge_into(&mut entries[idx], details),
                None => {
                    by_name.insert(details.name.to_lowercase(), entries.len());
                    entries.push(details);
                }
            }
        }
        if entries.is_empty() {
            tracing::warn!(source = default_source, "library index is empty");
        }
        Ok(LibraryIndex {
            entries,
            source_id: raw.source_id.unwrap_or_else(|| default_source.to_string()),
        })
    }

    pub fn get(&self, name: &str) -> Option<&LibraryDetails> {
        let folded = name.to_lowercase();
        self.entries.iter().find(|e| e.name.to_lowercase() == folded)
    }

    /// Ranked candidates for `component`, at most `n` of them.
    pub fn search(&self, component: &str, n: usize) -> Vec<LibraryDetails> {
        let mut hits: Vec<(Relevance, String, &LibraryDetails)> = self
            .entries
            .iter()
            .map(|e| (relevance(component, e), e.name.to_lowercase(), e))
            .filter(|(r, _, _)| r.is_match())
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        hits.into_iter().take(n).map(|(_, _, e)| e.clone()).collect()
    }
}

fn merge_into(existing: &mut LibraryDetails, other: LibraryDetails) {
    for v in other.versions {
        if !existing.versions.contains(&v) {
            existing.versions.push(v);
        }
    }
    for a in other.architectures {
        if !existing.architectures.iter().any(|x| x.eq_ignore_ascii_case(&a)) {
            existing.architectures.push(a);
        }
    }
    if existing.description.is_empty() {
        existing.description = other.description;
    }
    if existing.paragraph.is_empty() {
        existing.paragraph = other.paragraph;
    }
}

/// Lexical relevance. Ordered so that an exact-name substring hit outranks
/// any amount of token overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relevance {
    pub name_contains_component: bool,
    pub token_overlap: usize,
}

impl Relevance {
    pub fn is_match(&self) -> bool {
        self.name_contains_component || self.token_overlap > 0
    }
}

pub fn relevance(component: &str, entry: &LibraryDetails) -> Relevance {
    let needle = component.trim().to_lowercase();
    let name_contains_component = !needle.is_empty() && entry.name.to_lowercase().contains(&needle);
    let query = token_set(component);
    let doc = token_set(&entry.search_text());
    Relevance {
        name_contains_component,
        token_overlap: query.intersection(&doc).count(),
    }
}
