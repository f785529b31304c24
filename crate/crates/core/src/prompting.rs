//! Prompt assembly: the structured coder prompt and the versioned
//! template assets behind every auxiliary request.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, Message, ModelRequest};
use crate::hw_config::{HardwareConfig, TaskSpec};
use crate::memory_pickup::ApiContext;
use crate::text::approx_tokens;

pub const DEFAULT_PROMPT_BUDGET_TOKENS: usize = 4096;

pub mod templates {
    /// A prompt template shipped as a text asset. The first line is a
    /// `# <name> v<version>` header; `{{key}}` marks substitutions.
    #[derive(Debug, Clone, Copy)]
    pub struct Template {
        raw: &'static str,
    }

    impl Template {
        const fn new(raw: &'static str) -> Self {
            Template { raw }
        }

        fn header(&self) -> &'static str {
            self.raw.lines().next().unwrap_or_default()
        }

        pub fn name(&self) -> &'static str {
            self.header()
                .trim_start_matches('#')
                .split_whitespace()
                .next()
                .unwrap_or_default()
        }

        pub fn version(&self) -> u32 {
            self.header()
                .split_whitespace()
                .last()
                .and_then(|v| v.strip_prefix('v'))
                .and_then(|v| v.parse().ok())
                .unwrap_or(0)
        }

        /// Template text with the header line kept, so the version travels
        /// with every request.
        pub fn body(&self) -> &'static str {
            self.raw.trim_end()
        }

        pub fn render(&self, vars: &[(&str, &str)]) -> String {
            let mut out = self.body().to_string();
            for (key, value) in vars {
                out = out.replace(&format!("{{{{{key}}}}}"), value);
            }
            out
        }
    }

    pub const API_EXTRACTION: Template = Template::new(include_str!("../templates/api_extraction.txt"));
    pub const EXPERIENCE_EXTRACTION: Template =
        Template::new(include_str!("../templates/experience_extraction.txt"));
    pub const UTILITY_EXTRACTION: Template = Template::new(include_str!("../templates/utility_extraction.txt"));
    pub const FUNCTIONALITY_SEPARATION: Template =
        Template::new(include_str!("../templates/functionality_separation.txt"));
    pub const CODING_RULES: Template = Template::new(include_str!("../templates/coding_rules.txt"));
    pub const COMPILE_VALIDATION: Template = Template::new(include_str!("../templates/compile_validation.txt"));
    pub const FLASH_VALIDATION: Template = Template::new(include_str!("../templates/flash_validation.txt"));
    pub const RISK_CHECK: Template = Template::new(include_str!("../templates/risk_check.txt"));
    pub const FORMAT_REMINDER: Template = Template::new(include_str!("../templates/format_reminder.txt"));

    pub const ALL: [Template; 9] = [
        API_EXTRACTION,
        EXPERIENCE_EXTRACTION,
        UTILITY_EXTRACTION,
        FUNCTIONALITY_SEPARATION,
        CODING_RULES,
        COMPILE_VALIDATION,
        FLASH_VALIDATION,
        RISK_CHECK,
        FORMAT_REMINDER,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionTag {
    Task,
    Hardware,
    ApiContext,
    CodingRules,
    Feedback,
}

impl fmt::Display for SectionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SectionTag::Task => "TASK",
            SectionTag::Hardware => "HARDWARE",
            SectionTag::ApiContext => "API CONTEXT",
            SectionTag::CodingRules => "CODING RULES",
            SectionTag::Feedback => "FEEDBACK",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackOrigin {
    Compile,
    Flash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub origin: FeedbackOrigin,
    pub text: String,
}

/// What the coder is told about its previous attempt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Feedback {
    pub items: Vec<FeedbackItem>,
    pub prior_code: Option<String>,
}

impl Feedback {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn render(&self, with_code: bool) -> String {
        let mut out = String::from("The previous attempt failed. Fix the problems below and emit the full program again.\n");
        for item in &self.items {
            let label = match item.origin {
                FeedbackOrigin::Compile => "Compile feedback",
                FeedbackOrigin::Flash => "Flash feedback",
            };
            out.push_str(&format!("{label}:\n{}\n", item.text));
        }
        if let (true, Some(code)) = (with_code, &self.prior_code) {
            out.push_str(&format!("Previous code:\n```cpp\n{code}\n```\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPrompt {
    pub sections: Vec<(SectionTag, String)>,
}

impl TaskPrompt {
    pub fn section(&self, tag: SectionTag) -> Option<&str> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, s)| s.as_str())
    }

    pub fn tags(&self) -> Vec<SectionTag> {
        self.sections.iter().map(|(t, _)| *t).collect()
    }

    pub fn approx_tokens(&self) -> usize {
        render_messages(self).iter().map(|m| approx_tokens(&m.content)).sum()
    }
}

pub fn coding_rules(cfg: &HardwareConfig) -> String {
    templates::CODING_RULES.render(&[
        ("platform", &cfg.platform_name),
        ("arch", &cfg.platform_arch),
        ("board_id", &cfg.toolchain_board_id),
    ])
}

fn assemble(task: &TaskSpec, cfg: &HardwareConfig, ctx: &ApiContext, feedback: &Feedback, with_code: bool) -> TaskPrompt {
    let mut sections = vec![
        (SectionTag::Task, task.description.clone()),
        (SectionTag::Hardware, cfg.describe()),
        (SectionTag::ApiContext, ctx.render()),
        (SectionTag::CodingRules, coding_rules(cfg)),
    ];
    if !feedback.is_empty() {
        sections.push((SectionTag::Feedback, feedback.render(with_code)));
    }
    TaskPrompt { sections }
}

/// Builds the coder prompt. `task` must already be PII-masked.
///
/// Over budget, the prior code is dropped first, then the lowest-similarity
/// context matches; the task text is never truncated.
pub fn build_task_prompt(
    task: &TaskSpec,
    cfg: &HardwareConfig,
    ctx: &ApiContext,
    feedback: &Feedback,
    budget_tokens: usize,
) -> Result<TaskPrompt> {
    let prompt = assemble(task, cfg, ctx, feedback, true);
    if prompt.approx_tokens() <= budget_tokens {
        return Ok(prompt);
    }
    let prompt = assemble(task, cfg, ctx, feedback, false);
    if prompt.approx_tokens() <= budget_tokens {
        return Ok(prompt);
    }
    let mut trimmed = ctx.clone();
    while trimmed.drop_weakest_match() {
        let prompt = assemble(task, cfg, &trimmed, feedback, false);
        if prompt.approx_tokens() <= budget_tokens {
            return Ok(prompt);
        }
    }
    Err(Error::PromptBudget {
        needed: assemble(task, cfg, &trimmed, feedback, false).approx_tokens(),
        budget: budget_tokens,
    })
}

fn frame(tag: SectionTag, text: &str) -> String {
    format!("=== {tag} [{} bytes] ===\n{text}\n", text.len())
}

fn render_messages(prompt: &TaskPrompt) -> Vec<Message> {
    let system = prompt
        .sections
        .iter()
        .filter(|(t, _)| *t == SectionTag::CodingRules)
        .map(|(_, s)| s.clone())
        .collect::<Vec<_>>()
        .join("\n");
    let user: String = prompt
        .sections
        .iter()
        .filter(|(t, _)| *t != SectionTag::CodingRules)
        .map(|(t, s)| frame(*t, s))
        .collect();
    vec![Message::system(system), Message::user(user)]
}

/// Coding rules become the system message; the other sections are framed
/// with their byte length, so distinct prompts never render identically.
pub fn render(prompt: &TaskPrompt, gateway: &Gateway) -> ModelRequest {
    gateway.request(render_messages(prompt))
}
