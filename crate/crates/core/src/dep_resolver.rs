//! Library selection.
//!
//! Every top-N search candidate is scored on three criteria: TF-IDF name
//! match `m`, normalized version count `v` and architecture compatibility
//! `a`, combined as `total = (m + 0.1·v + 0.1·a)·a`. Candidates with `a = 0`
//! are never selected. Ties on `total` go to the higher `m`, then to the
//! case-folded name.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{write_atomic, Error, Result};
use crate::hw_config::HardwareConfig;
use crate::library_index::{LibraryDetails, LibraryIndex};
use crate::text::TfIdfSpace;

pub const ARCH_WILDCARD: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryScore {
    pub m: f64,
    pub v: f64,
    pub a: u8,
    pub total: f64,
}

impl LibraryScore {
    pub fn new(m: f64, v: f64, a: u8) -> Self {
        LibraryScore {
            m,
            v,
            a,
            total: combine(m, v, a),
        }
    }

    pub fn is_eligible(&self) -> bool {
        self.a == 1
    }
}

pub fn combine(m: f64, v: f64, a: u8) -> f64 {
    let a = f64::from(a);
    (m + 0.1 * v + 0.1 * a) * a
}

/// Cosine similarity between the component name and the library's
/// name + description + paragraph, in a TF-IDF space fitted on
/// `corpus` (all candidate texts for this component).
pub fn name_match_score<S: AsRef<str>>(component: &str, details: &LibraryDetails, corpus: &[S]) -> f64 {
    let space = TfIdfSpace::fit(corpus);
    space.cosine(component, &details.search_text())
}

pub fn version_score(details: &LibraryDetails, cohort: &[LibraryDetails]) -> f64 {
    let max = cohort
        .iter()
        .map(|c| c.versions.len())
        .max()
        .unwrap_or(0)
        .max(details.versions.len());
    if max == 0 {
        return 0.0;
    }
    details.versions.len() as f64 / max as f64
}

pub fn arch_score(details: &LibraryDetails, target_arch: &str) -> u8 {
    let target = target_arch.trim().to_lowercase();
    let compatible = details
        .architectures
        .iter()
        .any(|a| a.trim() == ARCH_WILDCARD || a.trim().to_lowercase() == target);
    u8::from(compatible)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub library: LibraryDetails,
    pub score: LibraryScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Every candidate with its score, in input order.
    pub scored: Vec<ScoredCandidate>,
    /// Index into `scored` of the winner; `None` means unresolved.
    pub chosen: Option<usize>,
}

impl Selection {
    pub fn winner(&self) -> Option<&ScoredCandidate> {
        self.chosen.map(|i| &self.scored[i])
    }
}

pub fn score_candidates(component: &str, candidates: &[LibraryDetails], target_arch: &str) -> Vec<ScoredCandidate> {
    let corpus: Vec<String> = candidates.iter().map(LibraryDetails::search_text).collect();
    let space = TfIdfSpace::fit(&corpus);
    candidates
        .iter()
        .zip(&corpus)
        .map(|(lib, text)| {
            let m = space.cosine(component, text);
            let v = version_score(lib, candidates);
            let a = arch_score(lib, target_arch);
            ScoredCandidate {
                library: lib.clone(),
                score: LibraryScore::new(m, v, a),
            }
        })
        .collect()
}

/// `Greater` means `x` beats `y`.
fn rank(x: &ScoredCandidate, y: &ScoredCandidate) -> Ordering {
    x.score
        .total
        .total_cmp(&y.score.total)
        .then_with(|| x.score.m.total_cmp(&y.score.m))
        .then_with(|| y.library.name.to_lowercase().cmp(&x.library.name.to_lowercase()))
}

pub fn select_library(component: &str, candidates: &[LibraryDetails], target_arch: &str) -> Selection {
    let scored = score_candidates(component, candidates, target_arch);
    let chosen = scored
        .iter()
        .enumerate()
        .filter(|(_, c)| c.score.is_eligible())
        .max_by(|(_, x), (_, y)| rank(x, y))
        .map(|(i, _)| i);
    Selection { scored, chosen }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub library: LibraryDetails,
    pub score: LibraryScore,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub target_arch: String,
    pub top_n: usize,
    pub assignments: BTreeMap<String, Assignment>,
    pub unresolved: Vec<String>,
    /// Per-component audit trail of every scored candidate.
    pub candidates: BTreeMap<String, Vec<ScoredCandidate>>,
}

impl Resolution {
    pub fn library_for(&self, component: &str) -> Option<&LibraryDetails> {
        self.assignments.get(component).map(|a| &a.library)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("resolution serializes");
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("resolution report", e))
    }
}

pub fn resolve_all(cfg: &HardwareConfig, index: &LibraryIndex, n: usize) -> Resolution {
    let n = n.max(1);
    let mut resolution = Resolution {
        target_arch: cfg.platform_arch.clone(),
        top_n: n,
        ..Resolution::default()
    };
    for component in cfg.component_names() {
        let top = index.search(component, n);
        let selection = select_library(component, &top, &cfg.platform_arch);
        match selection.winner() {
            Some(w) => {
                resolution.assignments.insert(
                    component.to_string(),
                    Assignment {
                        library: w.library.clone(),
                        score: w.score,
                    },
                );
            }
            None => {
                tracing::warn!(component, candidates = top.len(), "no compatible library found");
                resolution.unresolved.push(component.to_string());
            }
        }
        resolution
            .candidates
            .insert(component.to_string(), selection.scored);
    }
    resolution
}
