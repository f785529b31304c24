//! Risk confirmation and reversible PII masking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, Message};
use crate::hw_config::HardwareConfig;
use crate::prompting::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecretCategory {
    DeviceId,
    Password,
    Ssid,
    PersonName,
    Other,
}

impl SecretCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            SecretCategory::DeviceId => "device_id",
            SecretCategory::Password => "password",
            SecretCategory::Ssid => "ssid",
            SecretCategory::PersonName => "person_name",
            SecretCategory::Other => "other",
        }
    }
}

impl fmt::Display for SecretCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskReason {
    pub trigger: String,
    pub explanation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskVerdict {
    pub requires_confirmation: bool,
    pub reasons: Vec<RiskReason>,
}

impl RiskVerdict {
    pub fn from_reasons(reasons: Vec<RiskReason>) -> Self {
        RiskVerdict {
            requires_confirmation: !reasons.is_empty(),
            reasons,
        }
    }
}

#[derive(Debug, Clone)]
struct Trigger {
    phrase: String,
    explanation: String,
    matcher: Regex,
}

impl Trigger {
    fn new(phrase: &str, explanation: &str) -> Self {
        let words: Vec<String> = phrase.split_whitespace().map(regex::escape).collect();
        Trigger {
            phrase: phrase.to_string(),
            explanation: explanation.to_string(),
            matcher: Regex::new(&format!(r"(?i)\b{}", words.join(r"[\s_-]+"))).expect("escaped phrase"),
        }
    }
}

impl PartialEq for Trigger {
    fn eq(&self, other: &Self) -> bool {
        self.phrase == other.phrase && self.explanation == other.explanation
    }
}

impl Eq for Trigger {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskLexicon {
    triggers: Vec<Trigger>,
}

const SEED_TRIGGERS: &[(&str, &str)] = &[
    ("warning", "the task or its sources carry an explicit warning"),
    ("overheat", "the action can overheat a component"),
    ("damage", "the action can damage hardware"),
    ("high voltage", "the task involves high voltage"),
    ("mains", "the task involves mains power"),
    ("pwm frequency", "changing the PWM frequency can drive the load outside its rating"),
    ("overcurrent", "the action can cause overcurrent"),
    ("unprotected write", "the action writes to unprotected memory or storage"),
];

impl Default for RiskLexicon {
    fn default() -> Self {
        RiskLexicon {
            triggers: SEED_TRIGGERS
                .iter()
                .map(|(p, e)| Trigger::new(p, e))
                .collect(),
        }
    }
}

impl RiskLexicon {
    pub fn empty() -> Self {
        RiskLexicon { triggers: vec![] }
    }

    pub fn with_trigger(mut self, phrase: &str, explanation: &str) -> Self {
        let phrase = phrase.trim().to_lowercase();
        if !phrase.is_empty() && !self.triggers.iter().any(|t| t.phrase == phrase) {
            self.triggers.push(Trigger::new(&phrase, explanation));
        }
        self
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.triggers.iter().map(|t| t.phrase.as_str())
    }

    pub fn scan(&self, text: &str, cfg: Option<&HardwareConfig>) -> Vec<RiskReason> {
        let has_motor = cfg.is_some_and(|c| {
            c.component_names()
                .any(|n| n.to_lowercase().contains("motor") || n.to_lowercase().contains("servo"))
        }) || text.to_lowercase().contains("motor");
        self.triggers
            .iter()
            .filter(|t| t.matcher.is_match(text))
            .map(|t| RiskReason {
                trigger: t.phrase.clone(),
                explanation: if t.phrase == "pwm frequency" && has_motor {
                    "setting the PWM frequency of a motor driver can cause the motor to overheat".to_string()
                } else {
                    t.explanation.clone()
                },
            })
            .collect()
    }
}

fn parse_risk_reply(reply: &str) -> Option<Vec<RiskReason>> {
    let mut lines = reply.lines().map(str::trim).filter(|l| !l.is_empty());
    let head = lines.next()?.to_lowercase().replace(' ', "");
    match head.as_str() {
        "requires_confirmation=no" => Some(vec![]),
        "requires_confirmation=yes" => {
            let reasons: Vec<RiskReason> = lines
                .filter_map(|l| l.strip_prefix("REASON:"))
                .map(|r| RiskReason {
                    trigger: "model".to_string(),
                    explanation: r.trim().to_string(),
                })
                .collect();
            if reasons.is_empty() {
                Some(vec![RiskReason {
                    trigger: "model".into(),
                    explanation: "the model flagged the task as risky".into(),
                }])
            } else {
                Some(reasons)
            }
        }
        _ => None,
    }
}

/// The lexicon scan always runs; the optional model check can only add
/// reasons. A malformed model reply contributes nothing.
pub fn assess_risk(
    task_text: &str,
    cfg: Option<&HardwareConfig>,
    lexicon: &RiskLexicon,
    gateway: Option<&Gateway>,
) -> Result<RiskVerdict> {
    let mut reasons = lexicon.scan(task_text, cfg);
    if let Some(gw) = gateway {
        let mut user = format!("TASK: {task_text}");
        if let Some(c) = cfg {
            user = format!("HARDWARE:\n{}\n{user}", c.describe());
        }
        let req = gw.request(vec![Message::system(templates::RISK_CHECK.body()), Message::user(user)]);
        let reply = gw.complete(&req)?;
        match parse_risk_reply(&reply.text) {
            Some(extra) => reasons.extend(extra),
            None => tracing::warn!("risk check reply unparseable; keeping lexicon verdict"),
        }
    }
    Ok(RiskVerdict::from_reasons(reasons))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Proceed,
    Abort,
}

/// `answer` is `None` when no interactive answer is available, which
/// aborts a risky task.
pub fn confirm_gate(verdict: &RiskVerdict, answer: Option<&str>) -> GateDecision {
    if !verdict.requires_confirmation {
        return GateDecision::Proceed;
    }
    match answer.map(|a| a.trim().to_lowercase()) {
        Some(a) if a == "yes" || a == "y" => GateDecision::Proceed,
        _ => GateDecision::Abort,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceholderEntry {
    pub placeholder: String,
    /// The masked span exactly as it appeared, quotes included.
    pub original: String,
    /// The credential itself, without quoting.
    pub secret: String,
    pub category: SecretCategory,
}

/// How `unmask` substitutes a placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnmaskStyle {
    /// Restore the original span; exact inverse of `mask_pii`.
    Verbatim,
    /// Substitute the bare secret, for generated code.
    Bare,
}

/// Session-only mapping; deliberately not serializable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlaceholderMap {
    entries: Vec<PlaceholderEntry>,
    passthrough: BTreeSet<String>,
}

impl PlaceholderMap {
    pub fn entries(&self) -> &[PlaceholderEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, placeholder: &str) -> Option<&PlaceholderEntry> {
        self.entries.iter().find(|e| e.placeholder == placeholder)
    }

    /// Every string that must never leave the machine.
    pub fn originals(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .flat_map(|e| [e.original.as_str(), e.secret.as_str()])
            .collect()
    }

    /// Placeholders are assigned per distinct span.
    fn placeholder_for(&mut self, span: &str, secret: &str, category: SecretCategory, source: &str) -> String {
        if let Some(e) = self.entries.iter().find(|e| e.original == span) {
            return e.placeholder.clone();
        }
        let mut n = 1 + self.entries.iter().filter(|e| e.category == category).count();
        let token = loop {
            let t = format!("<{}_{n}>", category.as_str());
            if !source.contains(&t) && self.get(&t).is_none() {
                break t;
            }
            n += 1;
        };
        self.entries.push(PlaceholderEntry {
            placeholder: token.clone(),
            original: span.to_string(),
            secret: secret.to_string(),
            category,
        });
        token
    }
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[a-z][a-z_]*_\d+>").unwrap());

const VALUE: &str = r#"(?P<v>"[^"\n]+"|'[^'\n]+'|[^\s"'<>]+)"#;
const QUOTED: &str = r#"(?P<v>"[^"\n]+"|'[^'\n]+')"#;
const LINK: &str = r"(?:\s*[=:]\s*|\s+(?:to|is|as|be)\s+|\s+)";

static PATTERNS: LazyLock<Vec<(Regex, SecretCategory)>> = LazyLock::new(|| {
    let p = |kw: &str, value: &str, cat| (Regex::new(&format!(r"(?i)\b{kw}{LINK}{value}")).unwrap(), cat);
    vec![
        p(r"device[\s_-]?id\b", VALUE, SecretCategory::DeviceId),
        p(r"(?:password|passwd)\b", VALUE, SecretCategory::Password),
        p(r"ssid\b", VALUE, SecretCategory::Ssid),
        p(r"user[\s_-]?name\b", VALUE, SecretCategory::PersonName),
        p(r"(?:api[\s_-]?)?(?:key|token)\b", QUOTED, SecretCategory::Other),
    ]
});

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "or", "of", "to", "is", "as", "be", "for", "with", "from", "in", "on", "at", "then",
    "that", "this", "it", "into", "via", "by",
];

#[derive(Debug, Clone)]
struct Span {
    start: usize,
    end: usize,
    secret: String,
    category: SecretCategory,
}

fn detect(text: &str, declared: &[(String, SecretCategory)]) -> Vec<Span> {
    let mut found = Vec::new();
    for (re, cat) in PATTERNS.iter() {
        for caps in re.captures_iter(text) {
            let m = caps.name("v").expect("value group");
            let raw = m.as_str();
            let quoted = raw.len() >= 2 && (raw.starts_with('"') || raw.starts_with('\''));
            let (start, end, secret) = if quoted {
                (m.start(), m.end(), &raw[1..raw.len() - 1])
            } else {
                let trimmed = raw.trim_end_matches(['.', ',', ';', ':', '!', '?', ')']);
                (m.start(), m.start() + trimmed.len(), trimmed)
            };
            if secret.trim().is_empty() || (!quoted && STOPWORDS.contains(&secret.to_lowercase().as_str())) {
                continue;
            }
            found.push(Span {
                start,
                end,
                secret: secret.to_string(),
                category: *cat,
            });
        }
    }
    for (value, cat) in declared {
        if value.is_empty() {
            continue;
        }
        for (start, _) in text.match_indices(value.as_str()) {
            found.push(Span {
                start,
                end: start + value.len(),
                secret: value.clone(),
                category: *cat,
            });
        }
    }
    found.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    let mut kept: Vec<Span> = Vec::new();
    for s in found {
        if kept.last().is_none_or(|k| s.start >= k.end) {
            kept.push(s);
        }
    }
    kept
}

/// Leftmost-longest, non-overlapping occurrences of any needle.
fn occurrences(text: &str, needles: &[&str]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let best = needles
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.is_empty())
            .filter_map(|(i, n)| text[pos..].find(*n).map(|off| (pos + off, pos + off + n.len(), i)))
            .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        match best {
            Some((s, e, i)) => {
                out.push((s, e, i));
                pos = e;
            }
            None => break,
        }
    }
    out
}

pub fn mask_pii(text: &str) -> (String, PlaceholderMap) {
    mask_pii_with(text, &[])
}

/// Masks pattern-detected PII plus `declared` secrets. Every other
/// occurrence of a detected secret is masked as well.
pub fn mask_pii_with(text: &str, declared: &[(String, SecretCategory)]) -> (String, PlaceholderMap) {
    let mut spans = detect(text, declared);
    let secrets: Vec<(String, SecretCategory)> = {
        let mut s: Vec<(String, SecretCategory)> = Vec::new();
        for sp in &spans {
            if !s.iter().any(|(v, _)| *v == sp.secret) {
                s.push((sp.secret.clone(), sp.category));
            }
        }
        s
    };
    let needles: Vec<&str> = secrets.iter().map(|(v, _)| v.as_str()).collect();
    let mut extra = Vec::new();
    let mut gap_start = 0;
    for bound in spans.iter().map(|s| (s.start, s.end)).chain([(text.len(), text.len())]) {
        for (s, e, i) in occurrences(&text[gap_start..bound.0], &needles) {
            extra.push(Span {
                start: gap_start + s,
                end: gap_start + e,
                secret: secrets[i].0.clone(),
                category: secrets[i].1,
            });
        }
        gap_start = bound.1;
    }
    spans.extend(extra);
    spans.sort_by_key(|s| s.start);

    let mut map = PlaceholderMap {
        entries: vec![],
        passthrough: PLACEHOLDER.find_iter(text).map(|m| m.as_str().to_string()).collect(),
    };
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for s in &spans {
        out.push_str(&text[last..s.start]);
        out.push_str(&map.placeholder_for(&text[s.start..s.end], &s.secret, s.category, text));
        last = s.end;
    }
    out.push_str(&text[last..]);
    (out, map)
}

/// Replaces known placeholders. Placeholder-shaped tokens that are
/// neither in the map nor present in the masked source are an error.
pub fn unmask(text: &str, map: &PlaceholderMap, style: UnmaskStyle) -> Result<String> {
    let mut unknown = BTreeSet::new();
    let out = PLACEHOLDER.replace_all(text, |c: &regex::Captures<'_>| {
        let token = &c[0];
        match map.get(token) {
            Some(e) => match style {
                UnmaskStyle::Verbatim => e.original.clone(),
                UnmaskStyle::Bare => e.secret.clone(),
            },
            None => {
                if !map.passthrough.contains(token) {
                    unknown.insert(token.to_string());
                }
                token.to_string()
            }
        }
    });
    if unknown.is_empty() {
        Ok(out.into_owned())
    } else {
        Err(Error::UnknownPlaceholder(unknown.into_iter().collect()))
    }
}

/// Replaces any secret that resurfaced (e.g. echoed in a serial log) with
/// its placeholder.
pub fn redact(text: &str, map: &PlaceholderMap) -> String {
    let mut by_needle: BTreeMap<&str, &str> = BTreeMap::new();
    for e in &map.entries {
        by_needle.entry(e.original.as_str()).or_insert(e.placeholder.as_str());
        by_needle.entry(e.secret.as_str()).or_insert(e.placeholder.as_str());
    }
    let needles: Vec<&str> = by_needle.keys().copied().collect();
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (s, e, i) in occurrences(text, &needles) {
        out.push_str(&text[last..s]);
        out.push_str(by_needle[needles[i]]);
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

/// True when no map original occurs in `text`.
pub fn is_leak_free(text: &str, map: &PlaceholderMap) -> bool {
    map.originals().iter().all(|o| !text.contains(o))
}
