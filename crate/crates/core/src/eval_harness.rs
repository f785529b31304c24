//! Coding accuracy, completion, and the benchmark runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::autoprogram::SessionStatus;
use crate::error::{Error, Result};
use crate::gateway::TokenUsage;

pub const SEED_DATASET: &str = include_str!("../datasets/seed.toml");

/// One call site: api name plus normalized argument list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ApiUsage {
    pub name: String,
    pub args: Vec<String>,
}

impl ApiUsage {
    pub fn new(name: &str, args: &[&str]) -> Self {
        ApiUsage {
            name: name.trim().to_string(),
            args: args.iter().map(|a| normalize_arg(a)).collect(),
        }
    }

    pub fn short_name(&self) -> &str {
        crate::knowledge::short_name(&self.name)
    }

    fn qualifier(&self) -> Option<&str> {
        let short = self.short_name();
        let q = self.name[..self.name.len() - short.len()].trim_end_matches([':', '.', '>', '-']);
        (!q.is_empty()).then_some(q)
    }

    /// Names match when equal, or when either side is unqualified and the
    /// short names agree.
    pub fn same_api(&self, other: &ApiUsage) -> bool {
        self.short_name() == other.short_name()
            && match (self.qualifier(), other.qualifier()) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            }
    }

    pub fn matches(&self, other: &ApiUsage) -> bool {
        self.same_api(other) && self.args == other.args
    }
}

impl fmt::Display for ApiUsage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name, self.args.join(","))
    }
}

impl FromStr for ApiUsage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = match s.find('(') {
            Some(i) => (&s[..i], &s[i + 1..]),
            None => (s, ")"),
        };
        let inner = rest
            .trim_end()
            .strip_suffix(')')
            .ok_or_else(|| Error::Dataset(format!("api usage `{s}` is missing `)`")))?;
        if name.trim().is_empty() {
            return Err(Error::Dataset(format!("api usage `{s}` has no name")));
        }
        Ok(ApiUsage {
            name: name.trim().to_string(),
            args: split_args(inner).iter().map(|a| normalize_arg(a)).collect(),
        })
    }
}

/// Splits on top-level commas, respecting brackets and literals.
pub fn split_args(inner: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for ch in inner.chars() {
        if let Some(q) = quote {
            cur.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == q {
                quote = None;
            }
            continue;
        }
        match ch {
            '"' | '\'' => {
                quote = Some(ch);
                cur.push(ch);
            }
            '(' | '[' | '{' => {
                depth += 1;
                cur.push(ch);
            }
            ')' | ']' | '}' => {
                depth -= 1;
                cur.push(ch);
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur);
    }
    out
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:0[xX][0-9a-fA-F]+|0[bB][01]+|(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(?:[uU]?[lL]{0,2}|[lL]{1,2}[uU]|[fF])$")
        .unwrap()
});

fn fold_number(lit: &str) -> Option<String> {
    if !NUMBER.is_match(lit) {
        return None;
    }
    let body = lit.trim_end_matches(['u', 'U', 'l', 'L']);
    let lower = body.to_ascii_lowercase();
    if let Some(h) = lower.strip_prefix("0x") {
        return u128::from_str_radix(h, 16).ok().map(|v| v.to_string());
    }
    if let Some(b) = lower.strip_prefix("0b") {
        return u128::from_str_radix(b, 2).ok().map(|v| v.to_string());
    }
    let body = lower.trim_end_matches('f');
    if !body.contains(['.', 'e']) {
        return body.parse::<u128>().ok().map(|v| v.to_string());
    }
    body.parse::<f64>().ok().map(|v| format!("{v}"))
}

/// Whitespace outside literals is dropped and numeric literals are folded
/// to a canonical spelling; string and char literals stay byte-exact.
pub fn normalize_arg(arg: &str) -> String {
    let chars: Vec<char> = arg.chars().collect();
    let mut out = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' || c == '\'' {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i] != c {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            out.extend(&chars[start..i]);
            continue;
        }
        let prev_ident = out.chars().last().is_some_and(|p| p.is_alphanumeric() || p == '_');
        let starts_number = c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()));
        if starts_number && !prev_ident {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric()
                    || chars[i] == '.'
                    || ((chars[i] == '+' || chars[i] == '-') && matches!(chars[i - 1], 'e' | 'E') && !chars[start..i].iter().any(|c| matches!(c, 'x' | 'X'))))
            {
                i += 1;
            }
            let lit: String = chars[start..i].iter().collect();
            out.push_str(&fold_number(&lit).unwrap_or(lit));
            continue;
        }
        if !c.is_whitespace() {
            out.push(c);
        }
        i += 1;
    }
    out
}

/// Positional accuracy: matches / |reference|. `None` for an empty
/// reference, where the metric is not applicable.
pub fn coding_accuracy(generated: &[ApiUsage], reference: &[ApiUsage]) -> Option<Ratio<u64>> {
    if reference.is_empty() {
        return None;
    }
    let matched = generated
        .iter()
        .zip(reference)
        .filter(|(g, r)| g.matches(r))
        .count();
    Some(Ratio::new(matched as u64, reference.len() as u64))
}

pub fn completion(status: SessionStatus, accuracy: Option<Ratio<u64>>) -> bool {
    status == SessionStatus::Success && accuracy == Some(Ratio::from_integer(1))
}

/// Same length as the input with comments blanked; `strings` also blanks
/// literal contents so calls inside them are not seen.
fn blank_code(code: &str, strings: bool) -> String {
    let b = code.as_bytes();
    let mut out = b.to_vec();
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'/' if b.get(i + 1) == Some(&b'/') => {
                while i < b.len() && b[i] != b'\n' {
                    out[i] = b' ';
                    i += 1;
                }
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                let end = code[i + 2..].find("*/").map(|p| i + 2 + p + 2).unwrap_or(b.len());
                for o in &mut out[i..end] {
                    if *o != b'\n' {
                        *o = b' ';
                    }
                }
                i = end;
            }
            q @ (b'"' | b'\'') => {
                i += 1;
                while i < b.len() && b[i] != q && b[i] != b'\n' {
                    if b[i] == b'\\' && i + 1 < b.len() {
                        if strings {
                            out[i] = b' ';
                            out[i + 1] = b' ';
                        }
                        i += 2;
                        continue;
                    }
                    if strings {
                        out[i] = b' ';
                    }
                    i += 1;
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    String::from_utf8(out.iter().map(|&c| if c >= 0x80 { b' ' } else { c }).collect()).expect("ascii")
}

static CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:\b([A-Za-z_]\w*)\s*(?:\.|->|::)\s*)?\b([A-Za-z_]\w*)\s*\(").unwrap());
static DECL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([A-Z]\w*)\s*\*?\s+([A-Za-z_]\w*)\s*[;(=\[{]").unwrap());

/// Scans code for calls to any of `api_names`, in source order. Receivers
/// are resolved to their declared class when a declaration is visible.
pub fn extract_usages(code: &str, api_names: &[String]) -> Vec<ApiUsage> {
    let comments_blank = blank_code(code, false);
    let view = blank_code(code, true);
    let mut var_types: BTreeMap<String, String> = BTreeMap::new();
    for c in DECL.captures_iter(&view) {
        var_types.entry(c[2].to_string()).or_insert_with(|| c[1].to_string());
    }
    let targets: Vec<(Option<String>, String)> = api_names
        .iter()
        .map(|n| {
            let usage = ApiUsage { name: n.clone(), args: vec![] };
            (usage.qualifier().map(str::to_string), usage.short_name().to_string())
        })
        .collect();
    let vb = view.as_bytes();
    let mut out = Vec::new();
    for c in CALL.captures_iter(&view) {
        let recv = c.get(1).map(|m| m.as_str());
        let method = &c[2];
        let matched = targets.iter().find(|(q, short)| {
            short == method
                && match (q.as_deref(), recv) {
                    (None, None) => true,
                    (None, Some(_)) => true,
                    (Some(_), None) => false,
                    (Some(q), Some(r)) => q == r || var_types.get(r).is_some_and(|t| t == q),
                }
        });
        let Some((q, short)) = matched else { continue };
        let open = c.get(0).expect("match").end() - 1;
        let mut depth = 0;
        let mut close = None;
        for (j, &ch) in vb.iter().enumerate().skip(open) {
            match ch {
                b'(' => depth += 1,
                b')' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(j);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(close) = close else { continue };
        let inner = &comments_blank[open + 1..close];
        let name = match q {
            Some(q) => format!("{q}::{short}"),
            None => short.clone(),
        };
        out.push(ApiUsage {
            name,
            args: split_args(inner).iter().map(|a| normalize_arg(a)).collect(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkTask {
    pub id: String,
    pub description: String,
    pub module_tags: Vec<String>,
    pub difficulty: u8,
    pub components: Vec<String>,
    pub functionalities: u32,
    pub reference: Vec<String>,
    /// Hardware config, relative to the dataset file.
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub fault_script: Option<PathBuf>,
}

impl BenchmarkTask {
    pub fn complexity(&self) -> u32 {
        self.functionalities * self.components.len() as u32
    }

    pub fn reference_usages(&self) -> Result<Vec<ApiUsage>> {
        self.reference.iter().map(|r| r.parse()).collect()
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Dataset(format!("task `{}`: {m}", self.id)));
        if self.id.trim().is_empty() {
            return Err(Error::Dataset("task with empty id".into()));
        }
        if !(1..=3).contains(&self.difficulty) {
            return fail(format!("difficulty {} is outside 1..=3", self.difficulty));
        }
        if self.complexity() == 0 {
            return fail("complexity N_f x N_c must be at least 1".into());
        }
        if self.reference.is_empty() {
            return fail("reference API sequence is empty".into());
        }
        self.reference_usages().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub tasks: Vec<BenchmarkTask>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut ds: Dataset = toml::from_str(text).map_err(|e| Error::Dataset(e.to_string()))?;
        let mut ids = BTreeSet::new();
        for t in &ds.tasks {
            t.validate()?;
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate task id `{}`", t.id)));
            }
        }
        ds.base_dir = base_dir.to_path_buf();
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn seed() -> Self {
        Self::parse(SEED_DATASET, Path::new(".")).expect("seed dataset is valid")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }
}

/// What the pipeline reports back for one benchmark task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskOutcome {
    pub status: SessionStatus,
    pub final_code: Option<String>,
    /// Api names the extractor looks for.
    pub api_names: Vec<String>,
    pub compile_trials: Vec<u32>,
    pub flash_trials: u32,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRow {
    pub id: String,
    pub difficulty: u8,
    pub module_tags: Vec<String>,
    pub complexity: u32,
    pub status: String,
    pub coding_accuracy: Ratio<u64>,
    pub completed: bool,
    pub compile_trials: Vec<u32>,
    pub flash_trials: u32,
    pub usage: TokenUsage,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStats {
    pub tasks: u64,
    pub completed: u64,
    pub completion_rate: Ratio<u64>,
    pub mean_coding_accuracy: Ratio<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BenchmarkReport {
    pub rows: Vec<TaskRow>,
}

fn stats<'a>(rows: impl Iterator<Item = &'a TaskRow>) -> GroupStats {
    let rows: Vec<&TaskRow> = rows.collect();
    let n = rows.len() as u64;
    let completed = rows.iter().filter(|r| r.completed).count() as u64;
    let acc_sum = rows
        .iter()
        .fold(Ratio::from_integer(0u64), |acc, r| acc + r.coding_accuracy);
    GroupStats {
        tasks: n,
        completed,
        completion_rate: if n == 0 { Ratio::from_integer(0) } else { Ratio::new(completed, n) },
        mean_coding_accuracy: if n == 0 { Ratio::from_integer(0) } else { acc_sum / n },
    }
}

fn ratio_cell(r: Ratio<u64>) -> String {
    format!("{}/{} ({:.3})", r.numer(), r.denom(), *r.numer() as f64 / *r.denom() as f64)
}

impl BenchmarkReport {
    pub fn overall(&self) -> GroupStats {
        stats(self.rows.iter())
    }

    pub fn by_module(&self) -> BTreeMap<String, GroupStats> {
        let tags: BTreeSet<&String> = self.rows.iter().flat_map(|r| &r.module_tags).collect();
        tags.into_iter()
            .map(|t| (t.clone(), stats(self.rows.iter().filter(|r| r.module_tags.contains(t)))))
            .collect()
    }

    pub fn by_difficulty(&self) -> BTreeMap<u8, GroupStats> {
        let levels: BTreeSet<u8> = self.rows.iter().map(|r| r.difficulty).collect();
        levels
            .into_iter()
            .map(|d| (d, stats(self.rows.iter().filter(|r| r.difficulty == d))))
            .collect()
    }

    /// Tab-separated sections: per-task rows, then the two grouping tables.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "# tasks\nid\tdifficulty\tmodules\tcomplexity\tstatus\tcoding_accuracy\tcompleted\tcompile_trials\tflash_trials\tinput_tokens\toutput_tokens\terror\n",
        );
        for r in &self.rows {
            let trials: Vec<String> = r.compile_trials.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t[{}]\t{}\t{}\t{}\t{}\n",
                r.id,
                r.difficulty,
                r.module_tags.join(","),
                r.complexity,
                r.status,
                ratio_cell(r.coding_accuracy),
                r.completed,
                trials.join(","),
                r.flash_trials,
                r.usage.input_tokens,
                r.usage.output_tokens,
                r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " "),
            ));
        }
        let group_header = "tasks\tcompleted\tcompletion_rate\tmean_coding_accuracy\n";
        let group_row = |g: &GroupStats| {
            format!(
                "{}\t{}\t{}\t{}\n",
                g.tasks,
                g.completed,
                ratio_cell(g.completion_rate),
                ratio_cell(g.mean_coding_accuracy)
            )
        };
        out.push_str(&format!("\n# by module\nmodule\t{group_header}"));
        for (m, g) in self.by_module() {
            out.push_str(&format!("{m}\t{}", group_row(&g)));
        }
        out.push_str(&format!("\n# by difficulty\ndifficulty\t{group_header}"));
        for (d, g) in self.by_difficulty() {
            out.push_str(&format!("{d}\t{}", group_row(&g)));
        }
        out.push_str(&format!("\n# overall\n{group_header}{}", group_row(&self.overall())));
        out
    }
}

/// Runs every task through `run`; a task error becomes a failed row and
/// the batch continues.
pub fn run_benchmark(
    dataset: &Dataset,
    mut run: impl FnMut(&BenchmarkTask) -> Result<TaskOutcome>,
) -> BenchmarkReport {
    let mut report = BenchmarkReport::default();
    for task in &dataset.tasks {
        let reference = task.reference_usages().unwrap_or_default();
        let base = TaskRow {
            id: task.id.clone(),
            difficulty: task.difficulty,
            module_tags: task.module_tags.clone(),
            complexity: task.complexity(),
            status: String::new(),
            coding_accuracy: Ratio::from_integer(0),
            completed: false,
            compile_trials: vec![],
            flash_trials: 0,
            usage: TokenUsage::default(),
            error: None,
        };
        let row = match run(task) {
            Ok(outcome) => {
                let mut names = outcome.api_names.clone();
                names.extend(reference.iter().map(|r| r.name.clone()));
                names.sort();
                names.dedup();
                let generated = outcome
                    .final_code
                    .as_deref()
                    .map(|c| extract_usages(c, &names))
                    .unwrap_or_default();
                let accuracy = coding_accuracy(&generated, &reference);
                TaskRow {
                    status: outcome.status.to_string(),
                    coding_accuracy: accuracy.unwrap_or(Ratio::from_integer(0)),
                    completed: completion(outcome.status, accuracy),
                    compile_trials: outcome.compile_trials,
                    flash_trials: outcome.flash_trials,
                    usage: outcome.usage,
                    ..base
                }
            }
            Err(e) => {
                tracing::warn!(task = %task.id, error = %e, "benchmark task failed");
                TaskRow {
                    status: "error".into(),
                    error: Some(e.to_string()),
                    ..base
                }
            }
        };
        report.rows.push(row);
    }
    report
}
