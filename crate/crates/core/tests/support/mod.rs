//! Scenario builders shared by the session, security and acceptance tests.
#![allow(dead_code)]

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use embedpilot::autoprogram::{run_session, Limits, SessionInputs, SessionResult};
use embedpilot::dep_resolver::Resolution;
use embedpilot::executor::{
    CompileDirective, CompileOutcome, FaultScript, FlashDirective, ScriptLine, SimulatedExecutor,
};
use embedpilot::gateway::{Gateway, ModelRequest, ModelResponse, TokenUsage, Transport};
use embedpilot::hw_config::{HardwareConfig, Interface, ModuleBinding, TaskSpec};
use embedpilot::memory_pickup::ApiContext;
use embedpilot::security::PlaceholderMap;

pub const GOOD_CHECK: &str = "@DBG|S2|CHECK|led=ON";
pub const BAD_CHECK: &str = "@DBG|S2|CHECK|led=OFF";
pub const COMPILE_SUMMARY: &str = "SUMMARY: declare ledState before use";

pub fn uno() -> HardwareConfig {
    HardwareConfig {
        platform_name: "Uno R3".into(),
        platform_arch: "avr".into(),
        toolchain_board_id: "arduino:avr:uno".into(),
        port: None,
        modules: vec![ModuleBinding {
            component_name: "LED".into(),
            pins: vec!["13".into()],
            interface: Interface::Gpio,
        }],
        secrets: vec![],
    }
}

pub fn task(text: &str) -> TaskSpec {
    TaskSpec {
        description: text.into(),
        reference_api_sequence: None,
        expected_functionality_count: None,
    }
}

/// Coder source for revision `rev`, with two instrumented subtasks.
pub fn annotated_source(rev: u32) -> String {
    format!(
        "// rev {rev};\nvoid setup() {{\n  Serial.begin(115200);\n  Serial.println(\"@DBG|S1|START\");\n  pinMode(13, OUTPUT);\n  Serial.println(\"@DBG|S1|END\");\n}}\n\nvoid loop() {{\n  Serial.println(\"@DBG|S2|START\");\n  digitalWrite(13, HIGH);\n  Serial.println(\"@DBG|S2|CHECK|led=ON\");\n  Serial.println(\"@DBG|S2|END\");\n  delay(1000);\n}}\n"
    )
}

pub fn coder_reply(rev: u32) -> String {
    format!(
        "SUBTASK|S1|configure the LED pin\nSUBTASK|S2|switch the LED on\n```cpp\n{}```\n",
        annotated_source(rev)
    )
}

pub fn rev_tag(rev: u32) -> String {
    format!("// rev {rev};")
}

pub fn log_lines(check: &str) -> Vec<ScriptLine> {
    ["@DBG|S1|START", "@DBG|S1|END", "@DBG|S2|START", check, "@DBG|S2|END"]
        .iter()
        .map(|s| ScriptLine::Text(s.to_string()))
        .collect()
}

/// Replies by role: coder turns return successive revisions, compile
/// reviews a fixed summary, flash reviews judge the CHECK value.
#[derive(Default)]
pub struct RoleModel {
    pub revision: AtomicU32,
    pub requests: Mutex<Vec<ModelRequest>>,
    /// Coder copies every placeholder of the task into the sketch.
    pub echo_placeholders: bool,
}

impl RoleModel {
    pub fn coder_requests(&self) -> Vec<ModelRequest> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter(|r| is_coder(r))
            .cloned()
            .collect()
    }
}

pub fn is_coder(r: &ModelRequest) -> bool {
    r.messages[0].content.contains("You are an embedded firmware engineer")
}

impl Transport for RoleModel {
    fn send(&self, request: &ModelRequest) -> embedpilot::Result<ModelResponse> {
        self.requests.lock().unwrap().push(request.clone());
        let system = &request.messages[0].content;
        let text = request.joined_text();
        let reply = if is_coder(request) {
            let rev = self.revision.fetch_add(1, Ordering::SeqCst) + 1;
            if self.echo_placeholders {
                let consts: String = placeholders(&request.messages[1].content)
                    .iter()
                    .enumerate()
                    .map(|(i, p)| format!("const char* CRED_{i} = \"{p}\";\n"))
                    .collect();
                coder_reply(rev).replacen("```cpp\n", &format!("```cpp\n{consts}"), 1)
            } else {
                coder_reply(rev)
            }
        } else if system.contains("You split an embedded development task") {
            "- [LED] switch the LED on".to_string()
        } else if system.contains("You screen embedded development tasks") {
            "requires_confirmation=No".to_string()
        } else if system.contains("compiler run that failed") {
            COMPILE_SUMMARY.to_string()
        } else if system.contains("You judge whether firmware") {
            if text.contains("led=OFF") {
                "VERDICT: FAILURE\nFEEDBACK: the LED stays off; drive pin 13 HIGH".to_string()
            } else {
                "VERDICT: SUCCESS".to_string()
            }
        } else {
            panic!("unexpected request: {system}");
        };
        Ok(ModelResponse {
            text: reply,
            usage: TokenUsage::new(10, 10),
            latency_ms: 0,
        })
    }
}

/// Distinct `<name_N>` tokens in order of first appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        rest = &rest[open..];
        let close = match rest.find('>') {
            Some(c) => c,
            None => break,
        };
        let inner = &rest[1..close];
        let shaped = inner.rsplit_once('_').is_some_and(|(name, n)| {
            name.starts_with(|c: char| c.is_ascii_lowercase())
                && name.chars().all(|c| c.is_ascii_lowercase() || c == '_')
                && !n.is_empty()
                && n.chars().all(|c| c.is_ascii_digit())
        });
        if shaped && !out.iter().any(|p| p[1..p.len() - 1] == *inner) {
            out.push(format!("<{inner}>"));
        }
        rest = if shaped { &rest[close + 1..] } else { &rest[1..] };
    }
    out
}

/// Revisions `1..=compile_failures` fail to compile.
pub fn compile_faults(script: &mut FaultScript, compile_failures: u32) {
    for rev in 1..=compile_failures {
        script.compile.push(CompileDirective {
            trial: None,
            when_contains: Some(rev_tag(rev)),
            outcome: CompileOutcome::Error,
            log: format!("sketch.ino:{}:5: error: 'ledState' was not declared in this scope", 10 + rev),
        });
    }
}

/// Flash calls `1..fixed_on` show the logic fault; later ones do not.
/// `None` means the fault never goes away.
pub fn flash_faults(script: &mut FaultScript, fixed_on: Option<u32>) {
    match fixed_on {
        Some(f) => {
            for t in 1..f {
                script.flash.push(FlashDirective {
                    trial: Some(t),
                    lines: log_lines(BAD_CHECK),
                    ..Default::default()
                });
            }
            script.flash.push(FlashDirective {
                when_contains: Some("@DBG".into()),
                lines: log_lines(GOOD_CHECK),
                ..Default::default()
            });
        }
        None => script.flash.push(FlashDirective {
            when_contains: Some("@DBG".into()),
            lines: log_lines(BAD_CHECK),
            ..Default::default()
        }),
    }
}

pub struct Run {
    pub result: SessionResult,
    pub executor: SimulatedExecutor,
    pub model: Arc<RoleModel>,
}

pub fn run_scenario(script: FaultScript, limits: Limits) -> Run {
    let model = Arc::new(RoleModel::default());
    let gateway = Gateway::live(model.clone());
    let mut executor = SimulatedExecutor::new(script);
    let cfg = uno();
    let t = task("Turn the LED on pin 13 on and keep it on.");
    let context = ApiContext::default();
    let resolution = Resolution::default();
    let pii = PlaceholderMap::default();
    let inputs = SessionInputs {
        task: &t,
        cfg: &cfg,
        context: &context,
        resolution: &resolution,
        pii: &pii,
    };
    let result = run_session(&inputs, &mut executor, &gateway, limits).expect("session runs");
    Run { result, executor, model }
}
