//! The auto-programming loop: coder, compile validator, flash validator
//! and the DEBUG marker contract that ties them together.

use std::fmt;
use std::sync::LazyLock;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dep_resolver::Resolution;
use crate::error::{Error, Result};
use crate::executor::{CompileResult, Executor, FlashLog};
use crate::gateway::{Gateway, Message, TokenUsage};
use crate::hw_config::{HardwareConfig, TaskSpec};
use crate::knowledge::ask_structured;
use crate::memory_pickup::ApiContext;
use crate::prompting::{self, templates, Feedback, FeedbackItem, FeedbackOrigin, TaskPrompt};
use crate::security::{redact, unmask, PlaceholderMap, UnmaskStyle};

pub const MARKER_TOKEN: &str = "@DBG";
pub const COMPILE_SUMMARY_CAP: usize = 1000;
pub const RAW_LOG_TAIL_LINES: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkerKind {
    Start,
    End,
    Check { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub subtask: String,
    pub kind: MarkerKind,
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            MarkerKind::Start => write!(f, "{MARKER_TOKEN}|{}|START", self.subtask),
            MarkerKind::End => write!(f, "{MARKER_TOKEN}|{}|END", self.subtask),
            MarkerKind::Check { key, value } => write!(f, "{MARKER_TOKEN}|{}|CHECK|{key}={value}", self.subtask),
        }
    }
}

static LOG_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*@DBG\|([A-Za-z0-9_.-]+)\|(?:(START)|(END)|CHECK\|([^=|]+)=(.*?))\s*$").unwrap()
});
static SOURCE_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"@DBG\|([A-Za-z0-9_.-]+)\|(START|END|CHECK)").unwrap());

/// Parses one serial line; anything that is not a marker is program output.
pub fn parse_marker(line: &str) -> Option<Marker> {
    let c = LOG_MARKER.captures(line)?;
    let kind = if c.get(2).is_some() {
        MarkerKind::Start
    } else if c.get(3).is_some() {
        MarkerKind::End
    } else {
        MarkerKind::Check {
            key: c[4].trim().to_string(),
            value: c[5].to_string(),
        }
    };
    Some(Marker {
        subtask: c[1].to_string(),
        kind,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedCode {
    pub source: String,
    pub subtasks: Vec<Subtask>,
    /// Every source line carrying the marker token.
    pub debug_markers: Vec<String>,
}

impl AnnotatedCode {
    /// Subtask ids lacking a START or END marker in the source.
    pub fn missing_markers(&self) -> Vec<String> {
        let mut missing = Vec::new();
        for s in &self.subtasks {
            let has = |kind: &str| {
                SOURCE_MARKER
                    .captures_iter(&self.source)
                    .any(|c| c[1] == *s.id && &c[2] == kind)
            };
            match (has("START"), has("END")) {
                (true, true) => {}
                (false, true) => missing.push(format!("{} (START)", s.id)),
                (true, false) => missing.push(format!("{} (END)", s.id)),
                (false, false) => missing.push(format!("{} (START, END)", s.id)),
            }
        }
        missing
    }
}

fn extract_code_block(reply: &str) -> Option<(String, String)> {
    let mut outside = String::new();
    let mut code: Option<String> = None;
    let mut in_block = false;
    let mut buf = String::new();
    for line in reply.lines() {
        let t = line.trim();
        if !in_block && code.is_none() && t.starts_with("```") {
            let lang = t.trim_start_matches('`').trim().to_lowercase();
            if ["", "cpp", "c++", "arduino", "ino", "c"].contains(&lang.as_str()) {
                in_block = true;
                continue;
            }
        }
        if in_block {
            if t == "```" {
                in_block = false;
                code = Some(std::mem::take(&mut buf));
            } else {
                buf.push_str(line);
                buf.push('\n');
            }
        } else {
            outside.push_str(line);
            outside.push('\n');
        }
    }
    code.map(|c| (c, outside))
}

/// Splits a coder reply into declared subtasks and source. `Err` carries
/// the contract violation, phrased as feedback.
pub fn parse_coder_reply(reply: &str) -> std::result::Result<AnnotatedCode, String> {
    let Some((source, outside)) = extract_code_block(reply) else {
        return Err("reply must contain the program in one ```cpp fenced block".into());
    };
    if source.trim().is_empty() {
        return Err("the ```cpp block is empty".into());
    }
    let mut subtasks: Vec<Subtask> = Vec::new();
    for line in outside.lines().map(str::trim) {
        let Some(rest) = line.strip_prefix("SUBTASK|") else {
            continue;
        };
        let (id, desc) = rest.split_once('|').unwrap_or((rest, ""));
        let id = id.trim();
        if id.is_empty() || subtasks.iter().any(|s| s.id == id) {
            continue;
        }
        subtasks.push(Subtask {
            id: id.to_string(),
            description: desc.trim().to_string(),
        });
    }
    if subtasks.is_empty() {
        return Err("missing DEBUG markers for subtasks: no SUBTASK|<id>|<description> declarations found".into());
    }
    let code = AnnotatedCode {
        debug_markers: source
            .lines()
            .filter(|l| l.contains(MARKER_TOKEN))
            .map(str::to_string)
            .collect(),
        source,
        subtasks,
    };
    let missing = code.missing_markers();
    if missing.is_empty() {
        Ok(code)
    } else {
        Err(format!("missing DEBUG markers for subtasks: {}", missing.join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Generation {
    Code(AnnotatedCode),
    /// The contract was still violated after the corrective re-ask.
    Violation { feedback: String, raw_source: Option<String> },
}

/// Asks the coder; on a contract violation re-asks once with the violation
/// appended to the user message.
pub fn generate_code(prompt: &TaskPrompt, gateway: &Gateway) -> Result<Generation> {
    let request = prompting::render(prompt, gateway);
    let first = gateway.complete(&request)?;
    let violation = match parse_coder_reply(&first.text) {
        Ok(code) => return Ok(Generation::Code(code)),
        Err(v) => v,
    };
    let mut messages = request.messages.clone();
    if let Some(last) = messages.last_mut() {
        last.content = format!(
            "{}\n\nYour previous reply broke the output contract: {violation}. Emit the complete reply again.",
            last.content
        );
    }
    let second = gateway.complete(&gateway.request(messages))?;
    Ok(match parse_coder_reply(&second.text) {
        Ok(code) => Generation::Code(code),
        Err(feedback) => Generation::Violation {
            feedback,
            raw_source: extract_code_block(&second.text).map(|(c, _)| c),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub feedback: String,
    pub origin: FeedbackOrigin,
}

impl Verdict {
    pub fn success(origin: FeedbackOrigin) -> Self {
        Verdict {
            outcome: Outcome::Success,
            feedback: String::new(),
            origin,
        }
    }

    pub fn failure(origin: FeedbackOrigin, feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        Verdict {
            outcome: Outcome::Failure,
            feedback: if feedback.trim().is_empty() {
                "the validator reported a failure without details".into()
            } else {
                feedback
            },
            origin,
        }
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

fn log_tail(log: &str, n: usize) -> String {
    let lines: Vec<&str> = log.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

fn cap_chars(text: &str, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((i, _)) => text[..i].to_string(),
        None => text.to_string(),
    }
}

pub fn validate_compile(result: &CompileResult, gateway: &Gateway) -> Verdict {
    if result.success {
        return Verdict::success(FeedbackOrigin::Compile);
    }
    let user = format!("COMPILER LOG:\n{}", result.log);
    let summary = match gateway.ask(templates::COMPILE_VALIDATION.body(), &user) {
        Ok(r) if !r.text.trim().is_empty() => cap_chars(r.text.trim(), COMPILE_SUMMARY_CAP),
        Ok(_) => log_tail(&result.log, RAW_LOG_TAIL_LINES),
        Err(e) => {
            tracing::warn!(error = %e, "compile summary unavailable; using raw log tail");
            log_tail(&result.log, RAW_LOG_TAIL_LINES)
        }
    };
    Verdict::failure(FeedbackOrigin::Compile, summary)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "subtask", rename_all = "snake_case")]
pub enum OrderViolation {
    MissingStart(String),
    MissingEnd(String),
    EndBeforeStart(String),
    SequenceMismatch { expected: Vec<String>, observed: Vec<String> },
}

impl fmt::Display for OrderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderViolation::MissingStart(s) => write!(f, "missing START ({s})"),
            OrderViolation::MissingEnd(s) => write!(f, "missing END ({s})"),
            OrderViolation::EndBeforeStart(s) => write!(f, "END before START ({s})"),
            OrderViolation::SequenceMismatch { expected, observed } => write!(
                f,
                "subtask sequence {} differs from declared order {}",
                observed.join(","),
                expected.join(",")
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderReport {
    pub violations: Vec<OrderViolation>,
}

impl OrderReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Deterministic marker order check over the captured log, in line order.
pub fn check_order(log: &FlashLog, subtasks: &[Subtask]) -> OrderReport {
    let markers: Vec<Marker> = log.lines.iter().filter_map(|l| parse_marker(&l.text)).collect();
    let first = |id: &str, kind: &MarkerKind| markers.iter().position(|m| m.subtask == id && m.kind == *kind);
    let mut violations = Vec::new();
    let mut started: Vec<(usize, &str)> = Vec::new();
    for s in subtasks {
        let start = first(&s.id, &MarkerKind::Start);
        let end = first(&s.id, &MarkerKind::End);
        match (start, end) {
            (None, None) => {
                violations.push(OrderViolation::MissingStart(s.id.clone()));
                violations.push(OrderViolation::MissingEnd(s.id.clone()));
            }
            (None, Some(_)) => violations.push(OrderViolation::MissingStart(s.id.clone())),
            (Some(_), None) => violations.push(OrderViolation::MissingEnd(s.id.clone())),
            (Some(a), Some(b)) if b < a => violations.push(OrderViolation::EndBeforeStart(s.id.clone())),
            _ => {}
        }
        if let Some(a) = start {
            started.push((a, &s.id));
        }
    }
    let expected: Vec<String> = started.iter().map(|(_, id)| id.to_string()).collect();
    started.sort_by_key(|(pos, _)| *pos);
    let observed: Vec<String> = started.iter().map(|(_, id)| id.to_string()).collect();
    if observed != expected {
        violations.push(OrderViolation::SequenceMismatch { expected, observed });
    }
    OrderReport { violations }
}

fn parse_flash_reply(reply: &str) -> Option<(Outcome, String)> {
    let mut outcome = None;
    let mut feedback: Option<String> = None;
    for line in reply.lines().map(str::trim) {
        if let Some(v) = line.strip_prefix("VERDICT:") {
            outcome = match v.trim().to_uppercase().as_str() {
                "SUCCESS" => Some(Outcome::Success),
                "FAILURE" => Some(Outcome::Failure),
                _ => return None,
            };
        } else if let Some(f) = line.strip_prefix("FEEDBACK:") {
            feedback = Some(f.trim().to_string());
        } else if let Some(f) = feedback.as_mut().filter(|_| !line.is_empty()) {
            f.push('\n');
            f.push_str(line);
        }
    }
    Some((outcome?, feedback.unwrap_or_default()))
}

/// Order violations fail without consulting the model; otherwise the model
/// judges the logic from CHECK values and program output.
pub fn validate_flash(
    log: &FlashLog,
    task: &TaskSpec,
    subtasks: &[Subtask],
    order: &OrderReport,
    gateway: &Gateway,
) -> Result<Verdict> {
    if !order.passed() {
        return Ok(Verdict::failure(
            FeedbackOrigin::Flash,
            format!("DEBUG marker order check failed: {}", order.summary()),
        ));
    }
    let declared: String = subtasks
        .iter()
        .map(|s| format!("- {}: {}\n", s.id, s.description))
        .collect();
    let user = format!(
        "TASK: {}\nSUBTASKS:\n{declared}SERIAL LOG ({} lines):\n{}",
        task.description,
        log.lines.len(),
        log.text()
    );
    let parsed = ask_structured(gateway, templates::FLASH_VALIDATION.body(), &user, parse_flash_reply)?;
    Ok(match parsed {
        Some((Outcome::Success, _)) => Verdict::success(FeedbackOrigin::Flash),
        Some((Outcome::Failure, fb)) => Verdict::failure(FeedbackOrigin::Flash, fb),
        None => Verdict::failure(FeedbackOrigin::Flash, "validator reply unparseable"),
    })
}

/// Removes every line carrying the marker token and nothing else.
pub fn strip_debug(source: &str) -> String {
    source
        .split_inclusive('\n')
        .filter(|l| !l.contains(MARKER_TOKEN))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_compile_trials: u32,
    pub max_flash_trials: u32,
    pub capture_window_ms: u64,
    pub prompt_budget_tokens: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_compile_trials: 3,
            max_flash_trials: 5,
            capture_window_ms: crate::executor::DEFAULT_CAPTURE_WINDOW_MS,
            prompt_budget_tokens: prompting::DEFAULT_PROMPT_BUDGET_TOKENS,
        }
    }
}

impl Limits {
    /// Upper bound on gateway calls in one session: per compile trial a
    /// coder call, its re-ask and a compile summary; per flash round the
    /// logic check, its re-ask and a summary for a failed clean recompile.
    pub fn max_gateway_calls(&self) -> u64 {
        u64::from(self.max_flash_trials) * (u64::from(self.max_compile_trials) * 3 + 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Success,
    CompileExhausted,
    FlashExhausted,
    AbortedByUser,
    /// The executor reported an environment problem.
    Aborted,
}

impl SessionStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            SessionStatus::Success => 0,
            SessionStatus::CompileExhausted => 2,
            SessionStatus::FlashExhausted => 3,
            SessionStatus::AbortedByUser => 4,
            SessionStatus::Aborted => 5,
        }
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionStatus::Success => "success",
            SessionStatus::CompileExhausted => "compile_exhausted",
            SessionStatus::FlashExhausted => "flash_exhausted",
            SessionStatus::AbortedByUser => "aborted_by_user",
            SessionStatus::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub status: SessionStatus,
    /// Clean code, still masked; the caller unmasks it for output.
    pub final_code: Option<String>,
    /// Compile trials used in each flash round.
    pub compile_trials: Vec<u32>,
    pub flash_trials: u32,
    pub verdict_history: Vec<Verdict>,
    pub usage: TokenUsage,
    pub gateway_calls: u64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

impl SessionResult {
    pub fn aborted_by_user(reason: impl Into<String>) -> Self {
        SessionResult {
            status: SessionStatus::AbortedByUser,
            final_code: None,
            compile_trials: vec![],
            flash_trials: 0,
            verdict_history: vec![],
            usage: TokenUsage::default(),
            gateway_calls: 0,
            wall_ms: 0,
            abort_reason: Some(reason.into()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session result serializes")
    }
}

pub struct SessionInputs<'a> {
    /// PII-masked task.
    pub task: &'a TaskSpec,
    pub cfg: &'a HardwareConfig,
    pub context: &'a ApiContext,
    pub resolution: &'a Resolution,
    pub pii: &'a PlaceholderMap,
}

struct Session<'a, 'b> {
    inputs: &'b SessionInputs<'a>,
    executor: &'b mut dyn Executor,
    gateway: &'b Gateway,
    limits: Limits,
    verdicts: Vec<Verdict>,
    compile_trials: Vec<u32>,
}

enum RoundEnd {
    Compiled(AnnotatedCode, crate::executor::BinaryArtifact),
    Exhausted,
}

impl Session<'_, '_> {
    fn compile_round(&mut self, flash_feedback: Option<&str>, prior_code: &mut Option<String>) -> Result<RoundEnd> {
        let mut compile_feedback: Option<String> = None;
        self.compile_trials.push(0);
        for t_c in 1..=self.limits.max_compile_trials {
            *self.compile_trials.last_mut().expect("round pushed") = t_c;
            let mut items = Vec::new();
            if let Some(f) = flash_feedback {
                items.push(FeedbackItem { origin: FeedbackOrigin::Flash, text: f.to_string() });
            }
            if let Some(c) = &compile_feedback {
                items.push(FeedbackItem { origin: FeedbackOrigin::Compile, text: c.clone() });
            }
            let feedback = Feedback { items, prior_code: prior_code.clone() };
            let prompt = prompting::build_task_prompt(
                self.inputs.task,
                self.inputs.cfg,
                self.inputs.context,
                &feedback,
                self.limits.prompt_budget_tokens,
            )?;
            let code = match generate_code(&prompt, self.gateway)? {
                Generation::Code(code) => code,
                Generation::Violation { feedback, raw_source } => {
                    if raw_source.is_some() {
                        *prior_code = raw_source;
                    }
                    self.verdicts.push(Verdict::failure(FeedbackOrigin::Compile, feedback.clone()));
                    compile_feedback = Some(feedback);
                    continue;
                }
            };
            *prior_code = Some(code.source.clone());
            let bare = match unmask(&code.source, self.inputs.pii, UnmaskStyle::Bare) {
                Ok(b) => b,
                Err(Error::UnknownPlaceholder(tokens)) => {
                    let fb = format!("the code uses unknown placeholders {}; use only the ones given in the task", tokens.join(", "));
                    self.verdicts.push(Verdict::failure(FeedbackOrigin::Compile, fb.clone()));
                    compile_feedback = Some(fb);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut result = self.executor.compile(&bare, self.inputs.cfg, self.inputs.resolution)?;
            result.log = redact(&result.log, self.inputs.pii);
            let verdict = validate_compile(&result, self.gateway);
            self.verdicts.push(verdict.clone());
            if let (true, Some(binary)) = (verdict.is_success(), result.binary) {
                return Ok(RoundEnd::Compiled(code, binary));
            }
            compile_feedback = Some(verdict.feedback);
        }
        Ok(RoundEnd::Exhausted)
    }

    fn redacted(&self, mut log: FlashLog) -> FlashLog {
        for l in &mut log.lines {
            l.text = redact(&l.text, self.inputs.pii);
        }
        log
    }

    fn run(&mut self) -> Result<(SessionStatus, Option<String>)> {
        let mut flash_feedback: Option<String> = None;
        let mut prior_code: Option<String> = None;
        for _ in 1..=self.limits.max_flash_trials {
            let (code, binary) = match self.compile_round(flash_feedback.as_deref(), &mut prior_code)? {
                RoundEnd::Compiled(code, binary) => (code, binary),
                RoundEnd::Exhausted => return Ok((SessionStatus::CompileExhausted, None)),
            };
            let log = self.executor.flash_and_capture(&binary, self.inputs.cfg, self.limits.capture_window_ms)?;
            let log = self.redacted(log);
            let order = check_order(&log, &code.subtasks);
            let verdict = validate_flash(&log, self.inputs.task, &code.subtasks, &order, self.gateway)?;
            self.verdicts.push(verdict.clone());
            if !verdict.is_success() {
                flash_feedback = Some(verdict.feedback);
                continue;
            }
            let clean = strip_debug(&code.source);
            let bare = unmask(&clean, self.inputs.pii, UnmaskStyle::Bare)?;
            let mut result = self.executor.compile(&bare, self.inputs.cfg, self.inputs.resolution)?;
            match result.binary.take() {
                Some(clean_binary) if result.success => {
                    self.executor
                        .flash_and_capture(&clean_binary, self.inputs.cfg, self.limits.capture_window_ms)?;
                    return Ok((SessionStatus::Success, Some(clean)));
                }
                _ => {
                    result.log = redact(&result.log, self.inputs.pii);
                    let summary = validate_compile(&result, self.gateway);
                    let fb = format!(
                        "the program stopped compiling once the DEBUG marker lines were removed; keep every marker statement on its own line. {}",
                        summary.feedback
                    );
                    self.verdicts.push(Verdict::failure(FeedbackOrigin::Flash, fb.clone()));
                    flash_feedback = Some(fb);
                }
            }
        }
        Ok((SessionStatus::FlashExhausted, None))
    }
}

/// Runs the nested compile and flash loops. Environment errors end the
/// session with status `Aborted`; gateway failures propagate.
pub fn run_session(
    inputs: &SessionInputs<'_>,
    executor: &mut dyn Executor,
    gateway: &Gateway,
    limits: Limits,
) -> Result<SessionResult> {
    let started = Instant::now();
    let usage_before = gateway.ledger().total();
    let calls_before = gateway.ledger().calls();
    let mut session = Session {
        inputs,
        executor,
        gateway,
        limits,
        verdicts: vec![],
        compile_trials: vec![],
    };
    let (status, final_code, abort_reason) = match session.run() {
        Ok((status, code)) => (status, code, None),
        Err(Error::Environment(msg)) => {
            tracing::error!(error = %msg, "session aborted by environment error");
            (SessionStatus::Aborted, None, Some(msg))
        }
        Err(e) => return Err(e),
    };
    Ok(SessionResult {
        status,
        final_code,
        flash_trials: session.compile_trials.len() as u32,
        compile_trials: session.compile_trials,
        verdict_history: session.verdicts,
        usage: gateway.ledger().total().saturating_sub(usage_before),
        gateway_calls: gateway.ledger().calls() - calls_before,
        wall_ms: started.elapsed().as_millis() as u64,
        abort_reason,
    })
}

/// Messages the coder would receive for `prompt`; handy for audits.
pub fn coder_messages(prompt: &TaskPrompt, gateway: &Gateway) -> Vec<Message> {
    prompting::render(prompt, gateway).messages
}
