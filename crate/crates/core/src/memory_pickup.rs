//! Selective memory pick-up: split the task into functionalities, match
//! each against the utility table by TF-IDF cosine similarity, and gather
//! only the API entries the best matches use.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gateway::Gateway;
use crate::hw_config::{HardwareConfig, TaskSpec};
use crate::knowledge::{ask_structured, find_api, ApiEntry, KnowledgeBase, UtilityEntry};
use crate::prompting::templates;
use crate::text::{approx_tokens, TfIdfSpace};

pub const DEFAULT_K: usize = 2;
pub const DEFAULT_CONTEXT_BUDGET_TOKENS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Functionality {
    pub text: String,
    pub component_hint: Option<String>,
}

impl Functionality {
    pub fn new(text: impl Into<String>) -> Self {
        Functionality {
            text: text.into(),
            component_hint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub functionalities: Vec<Functionality>,
    /// True when the model reply was unusable and the whole task became a
    /// single functionality.
    pub fell_back: bool,
}

fn parse_functionalities(reply: &str) -> Option<Vec<Functionality>> {
    let mut out = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let item = line.strip_prefix("- ")?.trim();
        let (hint, text) = match item.strip_prefix('[').and_then(|r| r.split_once(']')) {
            Some((hint, text)) => (Some(hint.trim().to_string()).filter(|h| !h.is_empty()), text.trim()),
            None => (None, item),
        };
        if text.is_empty() {
            return None;
        }
        out.push(Functionality {
            text: text.to_string(),
            component_hint: hint,
        });
    }
    (!out.is_empty()).then_some(out)
}

/// Never fails on model content: malformed twice falls back to the task
/// text as one functionality. Gateway errors still propagate.
pub fn separate_functionalities(task: &TaskSpec, cfg: &HardwareConfig, gateway: &Gateway) -> Result<Separation> {
    let user = format!("HARDWARE:\n{}\nTASK: {}", cfg.describe(), task.description);
    let parsed = ask_structured(gateway, templates::FUNCTIONALITY_SEPARATION.body(), &user, parse_functionalities)?;
    Ok(match parsed {
        Some(functionalities) => Separation {
            functionalities,
            fell_back: false,
        },
        None => {
            tracing::warn!("functionality separation reply unparseable; using the whole task");
            Separation {
                functionalities: vec![Functionality::new(task.description.clone())],
                fell_back: true,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityMatch {
    /// Position in the utility table the match was drawn from.
    pub table_index: usize,
    pub entry: UtilityEntry,
    pub similarity: f64,
}

/// TF-IDF space fitted on the utility-table functionality texts; queries
/// are projected into it without contributing to idf.
#[derive(Debug, Clone)]
pub struct UtilityMatcher<'a> {
    table: &'a [UtilityEntry],
    space: TfIdfSpace,
}

impl<'a> UtilityMatcher<'a> {
    pub fn new(table: &'a [UtilityEntry]) -> Self {
        let corpus: Vec<&str> = table.iter().map(|u| u.functionality.as_str()).collect();
        UtilityMatcher {
            table,
            space: TfIdfSpace::fit(&corpus),
        }
    }

    /// Every nonzero match, by descending similarity then table order.
    pub fn ranked(&self, f: &Functionality) -> Vec<UtilityMatch> {
        let mut all: Vec<UtilityMatch> = self
            .table
            .iter()
            .enumerate()
            .map(|(i, u)| UtilityMatch {
                table_index: i,
                entry: u.clone(),
                similarity: self.space.cosine(&f.text, &u.functionality),
            })
            .filter(|m| m.similarity > 0.0)
            .collect();
        all.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.table_index.cmp(&b.table_index))
        });
        all
    }

    pub fn top_k(&self, f: &Functionality, k: usize) -> Vec<UtilityMatch> {
        let mut ranked = self.ranked(f);
        ranked.truncate(k.max(1));
        ranked
    }
}

pub fn match_functionality(f: &Functionality, utility_table: &[UtilityEntry], k: usize) -> Vec<UtilityMatch> {
    UtilityMatcher::new(utility_table).top_k(f, k)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApiContext {
    pub matched: Vec<(Functionality, Vec<UtilityMatch>)>,
    pub api_details: Vec<ApiEntry>,
    pub warnings: Vec<String>,
    catalog: Vec<ApiEntry>,
}

impl ApiContext {
    fn recompute(&mut self) {
        let mut entries: Vec<&UtilityMatch> = self.matched.iter().flat_map(|(_, m)| m.iter()).collect();
        entries.sort_by_key(|m| m.table_index);
        entries.dedup_by_key(|m| m.table_index);
        let mut details: Vec<ApiEntry> = Vec::new();
        for m in entries {
            for name in &m.entry.api_sequence {
                if let Some(api) = find_api(&self.catalog, name) {
                    if !details.iter().any(|d| d.api_name == api.api_name) {
                        details.push(api.clone());
                    }
                }
            }
        }
        self.api_details = details;
    }

    pub fn match_count(&self) -> usize {
        self.matched.iter().map(|(_, m)| m.len()).sum()
    }

    /// Removes the globally lowest-similarity match (the later one on
    /// ties). Returns false when nothing is left to drop.
    pub fn drop_weakest_match(&mut self) -> bool {
        let mut weakest: Option<(usize, usize, f64)> = None;
        for (fi, (_, matches)) in self.matched.iter().enumerate() {
            for (mi, m) in matches.iter().enumerate() {
                if weakest.is_none_or(|(_, _, s)| m.similarity <= s) {
                    weakest = Some((fi, mi, m.similarity));
                }
            }
        }
        let Some((fi, mi, _)) = weakest else {
            return false;
        };
        self.matched[fi].1.remove(mi);
        self.recompute();
        true
    }

    pub fn render(&self) -> String {
        if self.matched.iter().all(|(_, m)| m.is_empty()) && self.api_details.is_empty() {
            return "No library knowledge matched this task; use the platform core library.".to_string();
        }
        let mut out = String::from("Matched functionalities:\n");
        for (f, matches) in &self.matched {
            for m in matches {
                out.push_str(&format!(
                    "- \"{}\" ~ \"{}\" (similarity {:.3}): {}\n",
                    f.text,
                    m.entry.functionality,
                    m.similarity,
                    m.entry.api_sequence.join(" -> ")
                ));
            }
        }
        out.push_str("API details:\n");
        for api in &self.api_details {
            out.push_str(&format!("* {}\n  signature: {}\n", api.api_name, api.signature));
            if !api.parameters.is_empty() {
                let params: Vec<String> = api
                    .parameters
                    .iter()
                    .map(|p| format!("{} - {}", p.name, p.description))
                    .collect();
                out.push_str(&format!("  parameters: {}\n", params.join("; ")));
            }
            if !api.returns.is_empty() {
                out.push_str(&format!("  returns: {}\n", api.returns));
            }
            if !api.usage_notes.is_empty() {
                out.push_str(&format!("  usage: {}\n", api.usage_notes.replace('\n', " | ")));
            }
        }
        out
    }

    pub fn approx_tokens(&self) -> usize {
        approx_tokens(&self.render())
    }

    /// Drops weakest matches until the rendered context fits `budget_tokens`.
    pub fn fit_to_budget(&mut self, budget_tokens: usize) {
        while self.approx_tokens() > budget_tokens && self.drop_weakest_match() {}
    }
}

pub fn collect_api_context(matched: Vec<(Functionality, Vec<UtilityMatch>)>, api_table: &[ApiEntry]) -> ApiContext {
    let mut warnings = Vec::new();
    let mut catalog: Vec<ApiEntry> = Vec::new();
    let mut seen_missing: Vec<String> = Vec::new();
    for (_, matches) in &matched {
        for m in matches {
            for name in &m.entry.api_sequence {
                match find_api(api_table, name) {
                    Some(api) => {
                        if !catalog.iter().any(|c| c.api_name == api.api_name) {
                            catalog.push(api.clone());
                        }
                    }
                    None if !seen_missing.contains(name) => seen_missing.push(name.clone()),
                    None => {}
                }
            }
        }
    }
    if !seen_missing.is_empty() {
        let msg = format!("matched APIs missing from the API table: {}", seen_missing.join(", "));
        tracing::warn!("{msg}");
        warnings.push(msg);
    }
    let mut ctx = ApiContext {
        matched,
        api_details: vec![],
        warnings,
        catalog,
    };
    ctx.recompute();
    ctx
}

/// Matches every functionality against the knowledge base and trims the
/// result to `budget_tokens`.
pub fn pick_up(functionalities: &[Functionality], kb: &KnowledgeBase, k: usize, budget_tokens: usize) -> ApiContext {
    let table = kb.utility_table();
    let matcher = UtilityMatcher::new(&table);
    let matched = functionalities
        .iter()
        .map(|f| (f.clone(), matcher.top_k(f, k)))
        .collect();
    let mut ctx = collect_api_context(matched, &kb.api_table());
    ctx.fit_to_budget(budget_tokens);
    ctx
}

/// The whole knowledge base as context: the baseline selective pick-up is
/// measured against.
pub fn full_context(kb: &KnowledgeBase) -> ApiContext {
    let table = kb.utility_table();
    let all = Functionality::new("entire knowledge base");
    let matches = table
        .iter()
        .enumerate()
        .map(|(i, u)| UtilityMatch {
            table_index: i,
            entry: u.clone(),
            similarity: 1.0,
        })
        .collect();
    let apis = kb.api_table();
    let mut ctx = collect_api_context(vec![(all, matches)], &apis);
    ctx.catalog = apis.clone();
    ctx.api_details = apis;
    ctx
}
