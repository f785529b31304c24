//! End-to-end orchestration: mask, gate, separate, pick up, program,
//! unmask. Also the pipeline configuration file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::autoprogram::{run_session, Limits, SessionInputs, SessionResult};
use crate::dep_resolver::{resolve_all, Resolution};
use crate::error::{Error, Result};
use crate::eval_harness::{run_benchmark, BenchmarkReport, Dataset, TaskOutcome};
use crate::executor::{ArduinoCliExecutor, Executor, FaultScript, SimulatedExecutor};
use crate::gateway::{
    load_transcript, ChatCompletionsTransport, Gateway, GatewayMode, ScriptedModel, Transport, API_KEY_ENV,
    DEFAULT_MODEL_ID,
};
use crate::hw_config::{ConfigDocument, HardwareConfig, TaskSpec};
use crate::knowledge::{load_kb, KnowledgeBase};
use crate::library_index::{LibraryIndex, DEFAULT_TOP_N};
use crate::memory_pickup::{pick_up, separate_functionalities, ApiContext, Separation, DEFAULT_CONTEXT_BUDGET_TOKENS, DEFAULT_K};
use crate::security::{
    assess_risk, confirm_gate, mask_pii_with, unmask, GateDecision, PlaceholderMap, RiskLexicon, RiskVerdict,
    UnmaskStyle,
};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub config: PathBuf,
    pub index: PathBuf,
    pub knowledge_dir: PathBuf,
    pub libraries_dir: PathBuf,
    pub transcript: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            config: "hardware.toml".into(),
            index: "library_index.toml".into(),
            knowledge_dir: "knowledge".into(),
            libraries_dir: "libraries".into(),
            transcript: "transcript.jsonl".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub mode: GatewayMode,
    pub endpoint: String,
    pub model_id: String,
    pub api_key_env: String,
    pub timeout_s: u64,
    /// Offline stand-in for the endpoint in live or record mode.
    pub scripted_model: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            mode: GatewayMode::Replay,
            endpoint: DEFAULT_ENDPOINT.into(),
            model_id: DEFAULT_MODEL_ID.into(),
            api_key_env: API_KEY_ENV.into(),
            timeout_s: 120,
            scripted_model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub top_n: usize,
    pub k: usize,
    pub context_budget_tokens: usize,
    pub prompt_budget_tokens: usize,
    pub max_compile_trials: u32,
    pub max_flash_trials: u32,
    pub capture_window_ms: u64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let l = Limits::default();
        LimitsSection {
            top_n: DEFAULT_TOP_N,
            k: DEFAULT_K,
            context_budget_tokens: DEFAULT_CONTEXT_BUDGET_TOKENS,
            prompt_budget_tokens: l.prompt_budget_tokens,
            max_compile_trials: l.max_compile_trials,
            max_flash_trials: l.max_flash_trials,
            capture_window_ms: l.capture_window_ms,
        }
    }
}

impl LimitsSection {
    pub fn session_limits(&self) -> Limits {
        Limits {
            max_compile_trials: self.max_compile_trials,
            max_flash_trials: self.max_flash_trials,
            capture_window_ms: self.capture_window_ms,
            prompt_budget_tokens: self.prompt_budget_tokens,
        }
    }

    fn validate(&self) -> Result<()> {
        let checks = [
            ("limits.top_n", self.top_n == 0),
            ("limits.k", self.k == 0),
            ("limits.max_compile_trials", self.max_compile_trials == 0),
            ("limits.max_flash_trials", self.max_flash_trials == 0),
        ];
        match checks.iter().find(|(_, bad)| *bad) {
            Some((field, _)) => Err(Error::schema(*field, "must be at least 1")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Simulated,
    ArduinoCli,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorSection {
    pub backend: Backend,
    pub fault_script: Option<PathBuf>,
    pub cli_path: PathBuf,
    pub port: Option<String>,
    pub work_dir: Option<PathBuf>,
    pub compile_timeout_s: u64,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        ExecutorSection {
            backend: Backend::Simulated,
            fault_script: None,
            cli_path: "arduino-cli".into(),
            port: None,
            work_dir: None,
            compile_timeout_s: crate::executor::DEFAULT_COMPILE_TIMEOUT.as_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraTrigger {
    pub phrase: String,
    #[serde(default = "default_trigger_explanation")]
    pub explanation: String,
}

fn default_trigger_explanation() -> String {
    "matches a configured risk trigger".into()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecuritySection {
    pub triggers: Vec<ExtraTrigger>,
    /// Also ask the model whether the task is risky.
    pub model_check: bool,
}

impl SecuritySection {
    pub fn lexicon(&self) -> RiskLexicon {
        self.triggers
            .iter()
            .fold(RiskLexicon::default(), |l, t| l.with_trigger(&t.phrase, &t.explanation))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsSection,
    pub gateway: GatewaySection,
    pub limits: LimitsSection,
    pub executor: ExecutorSection,
    pub security: SecuritySection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::parse("pipeline config", e))?;
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.limits.validate()?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn resolution_path(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir).join("resolution.json")
    }

    pub fn load_document(&self) -> Result<ConfigDocument> {
        let doc = ConfigDocument::load(&self.resolve(&self.paths.config))?;
        doc.hardware.validate()?;
        Ok(doc)
    }

    pub fn load_resolution(&self) -> Result<Resolution> {
        let path = self.resolution_path();
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                hint: "embedpilot resolve".into(),
            });
        }
        Resolution::load(&path)
    }

    pub fn resolve_dependencies(&self, hw: &HardwareConfig) -> Result<Resolution> {
        let index = LibraryIndex::load(&self.resolve(&self.paths.index))?;
        Ok(resolve_all(hw, &index, self.limits.top_n))
    }

    pub fn load_knowledge(&self) -> Result<KnowledgeBase> {
        load_kb(&self.resolve(&self.paths.knowledge_dir))
    }

    fn transport(&self) -> Result<Arc<dyn Transport>> {
        Ok(match &self.gateway.scripted_model {
            Some(p) => Arc::new(ScriptedModel::load(&self.resolve(p))?),
            None => {
                Arc::new(ChatCompletionsTransport::from_env(
                    self.gateway.endpoint.clone(),
                    &self.gateway.api_key_env,
                    Duration::from_secs(self.gateway.timeout_s),
                )?)
            }
        })
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        let gw = match self.gateway.mode {
            GatewayMode::Replay => Gateway::replay(load_transcript(&self.resolve(&self.paths.transcript))?),
            GatewayMode::Record => Gateway::record(self.transport()?),
            GatewayMode::Live => Gateway::live(self.transport()?),
        };
        Ok(gw.with_model_id(self.gateway.model_id.clone()))
    }

    pub fn build_executor(&self, fault_script: Option<&Path>) -> Result<Box<dyn Executor>> {
        match self.executor.backend {
            Backend::Simulated => {
                let script = match fault_script.map(Path::to_path_buf).or_else(|| self.executor.fault_script.as_ref().map(|p| self.resolve(p))) {
                    Some(p) => FaultScript::load(&p)?,
                    None => FaultScript::default(),
                };
                Ok(Box::new(SimulatedExecutor::new(script)))
            }
            Backend::ArduinoCli => {
                let work = self
                    .executor
                    .work_dir
                    .as_ref()
                    .map(|p| self.resolve(p))
                    .unwrap_or_else(|| self.resolve(&self.paths.output_dir).join("build"));
                Ok(Box::new(
                    ArduinoCliExecutor::new(self.executor.cli_path.clone(), work)
                        .with_compile_timeout(Duration::from_secs(self.executor.compile_timeout_s))
                        .with_port(self.executor.port.clone()),
                ))
            }
        }
    }
}

/// Everything one pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub masked_task: TaskSpec,
    pub pii: PlaceholderMap,
    pub risk: RiskVerdict,
    pub separation: Option<Separation>,
    pub context: Option<ApiContext>,
    pub session: SessionResult,
    /// Clean code with credentials restored, ready to write out.
    pub final_code: Option<String>,
}

pub struct RunOptions<'a> {
    pub k: usize,
    pub context_budget_tokens: usize,
    pub limits: Limits,
    pub lexicon: RiskLexicon,
    pub model_risk_check: bool,
    /// Asked only when the verdict requires confirmation; `None` aborts.
    pub confirm: &'a mut dyn FnMut(&RiskVerdict) -> Option<String>,
}

impl PipelineConfig {
    pub fn run_options<'a>(&self, confirm: &'a mut dyn FnMut(&RiskVerdict) -> Option<String>) -> RunOptions<'a> {
        RunOptions {
            k: self.limits.k,
            context_budget_tokens: self.limits.context_budget_tokens,
            limits: self.limits.session_limits(),
            lexicon: self.security.lexicon(),
            model_risk_check: self.security.model_check,
            confirm,
        }
    }
}

pub fn run_pipeline(
    task: &TaskSpec,
    hw: &HardwareConfig,
    kb: &KnowledgeBase,
    resolution: &Resolution,
    executor: &mut dyn Executor,
    gateway: &Gateway,
    opts: RunOptions<'_>,
) -> Result<PipelineOutcome> {
    let declared: Vec<_> = hw.secrets.iter().map(|s| (s.value.clone(), s.category)).collect();
    let (masked, pii) = mask_pii_with(&task.description, &declared);
    let masked_task = TaskSpec {
        description: masked,
        ..task.clone()
    };
    let mut risk = assess_risk(&task.description, Some(hw), &opts.lexicon, None)?;
    if opts.model_risk_check {
        let model = assess_risk(&masked_task.description, Some(hw), &RiskLexicon::empty(), Some(gateway))?;
        risk = RiskVerdict::from_reasons(risk.reasons.into_iter().chain(model.reasons).collect());
    }
    let answer = if risk.requires_confirmation { (opts.confirm)(&risk) } else { None };
    if confirm_gate(&risk, answer.as_deref()) == GateDecision::Abort {
        let reasons: Vec<String> = risk.reasons.iter().map(|r| r.explanation.clone()).collect();
        return Ok(PipelineOutcome {
            masked_task,
            pii,
            risk,
            separation: None,
            context: None,
            session: SessionResult::aborted_by_user(reasons.join("; ")),
            final_code: None,
        });
    }
    let separation = separate_functionalities(&masked_task, hw, gateway)?;
    let context = pick_up(&separation.functionalities, kb, opts.k, opts.context_budget_tokens);
    let inputs = SessionInputs {
        task: &masked_task,
        cfg: hw,
        context: &context,
        resolution,
        pii: &pii,
    };
    let session = run_session(&inputs, executor, gateway, opts.limits)?;
    let final_code = session
        .final_code
        .as_deref()
        .map(|c| unmask(c, &pii, UnmaskStyle::Bare))
        .transpose()?;
    Ok(PipelineOutcome {
        masked_task,
        pii,
        risk,
        separation: Some(separation),
        context: Some(context),
        session,
        final_code,
    })
}

/// Runs a dataset with one shared gateway. Each task gets its own
/// simulated executor, hardware config and resolution; risky tasks are
/// declined.
pub fn bench(dataset: &Dataset, pcfg: &PipelineConfig, gateway: &Gateway) -> Result<BenchmarkReport> {
    let default_doc = pcfg.load_document().ok();
    let kb = pcfg.load_knowledge()?;
    let api_names: Vec<String> = kb.api_table().iter().map(|a| a.api_name.clone()).collect();
    let report = run_benchmark(dataset, |task| {
        let hw = match &task.config {
            Some(p) => ConfigDocument::load(&dataset.resolve(p))?.hardware,
            None => default_doc
                .as_ref()
                .map(|d| d.hardware.clone())
                .ok_or_else(|| Error::Dataset(format!("task `{}` has no hardware config", task.id)))?,
        };
        hw.validate()?;
        let resolution = pcfg.resolve_dependencies(&hw).or_else(|_| pcfg.load_resolution())?;
        let script = task.fault_script.as_ref().map(|p| dataset.resolve(p));
        let mut executor = pcfg.build_executor(script.as_deref())?;
        let spec = TaskSpec {
            description: task.description.clone(),
            reference_api_sequence: Some(task.reference.clone()),
            expected_functionality_count: Some(task.functionalities),
        };
        let before = gateway.ledger().total();
        let mut decline = |_: &RiskVerdict| None;
        let out = run_pipeline(&spec, &hw, &kb, &resolution, executor.as_mut(), gateway, pcfg.run_options(&mut decline))?;
        Ok(TaskOutcome {
            status: out.session.status,
            final_code: out.final_code,
            api_names: api_names.clone(),
            compile_trials: out.session.compile_trials,
            flash_trials: out.session.flash_trials,
            usage: gateway.ledger().total().saturating_sub(before),
        })
    });
    Ok(report)
}
