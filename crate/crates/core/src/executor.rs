//! Compile and flash backends: a simulated one driven by a fault script,
//! and one that shells out to `arduino-cli`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{LazyLock, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use crate::dep_resolver::Resolution;
use crate::error::{Error, Result};
use crate::hw_config::HardwareConfig;

pub const DEFAULT_CAPTURE_WINDOW_MS: u64 = 10_000;
pub const DEFAULT_COMPILE_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_STRIDE_MS: u64 = 100;
pub const SERIAL_BAUD: u32 = 115_200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryArtifact {
    /// SHA-256 of the compiled source.
    pub id: String,
    pub path: Option<PathBuf>,
}

pub fn source_digest(code: &str) -> String {
    hex::encode(Sha256::digest(code.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileResult {
    pub success: bool,
    pub log: String,
    pub binary: Option<BinaryArtifact>,
}

impl CompileResult {
    pub fn ok(log: impl Into<String>, binary: BinaryArtifact) -> Self {
        CompileResult {
            success: true,
            log: log.into(),
            binary: Some(binary),
        }
    }

    pub fn failed(log: impl Into<String>) -> Self {
        CompileResult {
            success: false,
            log: log.into(),
            binary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub t_ms: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashLog {
    pub lines: Vec<LogLine>,
    pub capture_window_ms: u64,
    pub port_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FlashLog {
    /// Clamps timestamps to be non-decreasing and drops lines past the
    /// capture window.
    pub fn normalized(lines: Vec<LogLine>, capture_window_ms: u64, port_id: impl Into<String>) -> Self {
        let mut warnings = Vec::new();
        let mut out: Vec<LogLine> = Vec::with_capacity(lines.len());
        let mut floor = 0;
        for mut line in lines {
            if line.t_ms < floor {
                warnings.push(format!(
                    "out-of-order timestamp {} ms clamped to {floor} ms for line {:?}",
                    line.t_ms, line.text
                ));
                line.t_ms = floor;
            }
            floor = line.t_ms;
            if capture_window_ms == 0 || line.t_ms > capture_window_ms {
                continue;
            }
            out.push(line);
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }
        FlashLog {
            lines: out,
            capture_window_ms,
            port_id: port_id.into(),
            warnings,
        }
    }

    pub fn text(&self) -> String {
        self.lines
            .iter()
            .map(|l| format!("[{:>6} ms] {}", l.t_ms, l.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallReport {
    pub installed: Vec<String>,
    pub already_present: Vec<String>,
    pub errors: Vec<(String, String)>,
}

impl InstallReport {
    pub fn actions(&self) -> usize {
        self.installed.len()
    }
}

pub trait Executor {
    /// Compile failures are `Ok` with `success = false`; `Err` is reserved
    /// for environment problems.
    fn compile(&mut self, code: &str, cfg: &HardwareConfig, libs: &Resolution) -> Result<CompileResult>;

    fn flash_and_capture(&mut self, binary: &BinaryArtifact, cfg: &HardwareConfig, window_ms: u64) -> Result<FlashLog>;

    fn install_libraries(&mut self, resolution: &Resolution) -> InstallReport;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileOutcome {
    #[default]
    Ok,
    Error,
    EnvError,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompileDirective {
    pub trial: Option<u32>,
    pub when_contains: Option<String>,
    #[serde(default)]
    pub outcome: CompileOutcome,
    #[serde(default)]
    pub log: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptLine {
    Text(String),
    Timed { t_ms: u64, text: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlashOutcome {
    #[default]
    Ok,
    EnvError,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlashDirective {
    pub trial: Option<u32>,
    pub when_contains: Option<String>,
    #[serde(default)]
    pub outcome: FlashOutcome,
    #[serde(default)]
    pub lines: Vec<ScriptLine>,
}

/// Directives are tried in file order; the first whose trial and content
/// predicates both hold applies. Trial numbers count calls of that kind
/// across the whole session, starting at 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScript {
    pub stride_ms: Option<u64>,
    #[serde(default)]
    pub compile: Vec<CompileDirective>,
    #[serde(default)]
    pub flash: Vec<FlashDirective>,
}

fn applies(trial: Option<u32>, when: &Option<String>, n: u32, code: &str) -> bool {
    trial.is_none_or(|t| t == n) && when.as_ref().is_none_or(|w| code.contains(w.as_str()))
}

impl FaultScript {
    pub fn parse(text: &str) -> Result<Self> {
        let script: FaultScript = toml::from_str(text).map_err(|e| Error::parse("fault script", e))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let trials = self
            .compile
            .iter()
            .map(|d| ("compile", d.trial))
            .chain(self.flash.iter().map(|d| ("flash", d.trial)));
        for (kind, t) in trials {
            if t == Some(0) {
                return Err(Error::schema(format!("{kind}.trial"), "trial indices start at 1"));
            }
        }
        Ok(())
    }

    fn compile_for(&self, n: u32, code: &str) -> Option<&CompileDirective> {
        self.compile
            .iter()
            .find(|d| applies(d.trial, &d.when_contains, n, code))
    }

    fn flash_for(&self, n: u32, code: &str) -> Option<&FlashDirective> {
        self.flash.iter().find(|d| applies(d.trial, &d.when_contains, n, code))
    }
}

/// Deterministic stand-in for a board: identical script and call sequence
/// give identical results.
#[derive(Debug, Clone, Default)]
pub struct SimulatedExecutor {
    script: FaultScript,
    compile_calls: u32,
    flash_calls: u32,
    binaries: BTreeMap<String, String>,
    installed: BTreeSet<String>,
    flashed: Vec<String>,
}

impl SimulatedExecutor {
    pub fn new(script: FaultScript) -> Self {
        SimulatedExecutor {
            script,
            ..Default::default()
        }
    }

    pub fn compile_calls(&self) -> u32 {
        self.compile_calls
    }

    pub fn flash_calls(&self) -> u32 {
        self.flash_calls
    }

    /// Sources of every flashed binary, in order.
    pub fn flashed_sources(&self) -> &[String] {
        &self.flashed
    }
}

impl Executor for SimulatedExecutor {
    fn compile(&mut self, code: &str, _cfg: &HardwareConfig, _libs: &Resolution) -> Result<CompileResult> {
        self.compile_calls += 1;
        if code.trim().is_empty() {
            return Ok(CompileResult::failed("error: empty source file"));
        }
        let directive = self.script.compile_for(self.compile_calls, code).cloned().unwrap_or_default();
        match directive.outcome {
            CompileOutcome::Ok => {
                let id = source_digest(code);
                self.binaries.insert(id.clone(), code.to_string());
                Ok(CompileResult::ok(directive.log, BinaryArtifact { id, path: None }))
            }
            CompileOutcome::Error => {
                let log = if directive.log.is_empty() {
                    "compilation failed".to_string()
                } else {
                    directive.log
                };
                Ok(CompileResult::failed(log))
            }
            CompileOutcome::EnvError => Err(Error::Environment(if directive.log.is_empty() {
                "toolchain unavailable".to_string()
            } else {
                directive.log
            })),
        }
    }

    fn flash_and_capture(&mut self, binary: &BinaryArtifact, cfg: &HardwareConfig, window_ms: u64) -> Result<FlashLog> {
        self.flash_calls += 1;
        let code = self
            .binaries
            .get(&binary.id)
            .cloned()
            .ok_or_else(|| Error::Environment(format!("unknown binary {}", binary.id)))?;
        let directive = self.script.flash_for(self.flash_calls, &code).cloned().unwrap_or_default();
        if directive.outcome == FlashOutcome::EnvError {
            return Err(Error::Environment("serial port busy or absent".into()));
        }
        self.flashed.push(code);
        let stride = self.script.stride_ms.unwrap_or(DEFAULT_STRIDE_MS);
        let mut next = 0;
        let lines = directive
            .lines
            .into_iter()
            .map(|l| {
                let line = match l {
                    ScriptLine::Text(text) => LogLine { t_ms: next, text },
                    ScriptLine::Timed { t_ms, text } => LogLine { t_ms, text },
                };
                next = line.t_ms + stride;
                line
            })
            .collect();
        let port = cfg.port.clone().unwrap_or_else(|| "sim0".to_string());
        Ok(FlashLog::normalized(lines, window_ms, port))
    }

    fn install_libraries(&mut self, resolution: &Resolution) -> InstallReport {
        let mut report = InstallReport::default();
        for a in resolution.assignments.values() {
            let key = format!("{}@{}", a.library.name, a.library.latest_version().unwrap_or(""));
            if self.installed.insert(key.clone()) {
                report.installed.push(key);
            } else {
                report.already_present.push(key);
            }
        }
        report
    }
}

static PORT_LEASES: LazyLock<Mutex<HashSet<String>>> = LazyLock::new(Default::default);

/// Exclusive in-process claim on a serial port, released on drop.
#[derive(Debug)]
pub struct PortLease {
    port: String,
}

impl PortLease {
    pub fn acquire(port: &str) -> Result<Self> {
        let mut leases = PORT_LEASES.lock().unwrap_or_else(|p| p.into_inner());
        if !leases.insert(port.to_string()) {
            return Err(Error::Environment(format!("serial port {port} is already in use")));
        }
        Ok(PortLease { port: port.to_string() })
    }
}

impl Drop for PortLease {
    fn drop(&mut self) {
        PORT_LEASES
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&self.port);
    }
}

/// Drives a real board through `arduino-cli`.
#[derive(Debug, Clone)]
pub struct ArduinoCliExecutor {
    cli: PathBuf,
    work_dir: PathBuf,
    compile_timeout: Duration,
    port_override: Option<String>,
    builds: BTreeMap<String, PathBuf>,
}

struct Captured {
    status: Option<std::process::ExitStatus>,
    output: String,
}

impl ArduinoCliExecutor {
    pub fn new(cli: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        ArduinoCliExecutor {
            cli: cli.into(),
            work_dir: work_dir.into(),
            compile_timeout: DEFAULT_COMPILE_TIMEOUT,
            port_override: None,
            builds: BTreeMap::new(),
        }
    }

    pub fn with_compile_timeout(mut self, timeout: Duration) -> Self {
        self.compile_timeout = timeout;
        self
    }

    pub fn with_port(mut self, port: Option<String>) -> Self {
        self.port_override = port;
        self
    }

    fn run(&self, args: &[&str], timeout: Option<Duration>) -> Result<Captured> {
        let mut child = Command::new(&self.cli)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Environment(format!("cannot run {}: {e}", self.cli.display())))?;
        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let status = match timeout {
            Some(t) => match child.wait_timeout(t).map_err(|e| Error::Environment(e.to_string()))? {
                Some(s) => Some(s),
                None => {
                    let _ = child.kill();
                    let _ = child.wait();
                    None
                }
            },
            None => Some(child.wait().map_err(|e| Error::Environment(e.to_string()))?),
        };
        let mut output = out_reader.join().unwrap_or_default();
        output.push_str(&err_reader.join().unwrap_or_default());
        Ok(Captured { status, output })
    }

    fn port(&self, cfg: &HardwareConfig) -> Result<String> {
        self.port_override
            .clone()
            .or_else(|| cfg.port.clone())
            .ok_or_else(|| Error::Environment("no serial port configured".into()))
    }

    fn installed_libraries(&self) -> BTreeSet<String> {
        let Ok(c) = self.run(&["lib", "list", "--format", "json"], None) else {
            return BTreeSet::new();
        };
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&c.output) else {
            return BTreeSet::new();
        };
        let items = v
            .get("installed_libraries")
            .and_then(|x| x.as_array())
            .or_else(|| v.as_array())
            .cloned()
            .unwrap_or_default();
        items
            .iter()
            .filter_map(|i| {
                let lib = i.get("library")?;
                Some(format!(
                    "{}@{}",
                    lib.get("name")?.as_str()?,
                    lib.get("version")?.as_str()?
                ))
            })
            .collect()
    }
}

impl Executor for ArduinoCliExecutor {
    fn compile(&mut self, code: &str, cfg: &HardwareConfig, _libs: &Resolution) -> Result<CompileResult> {
        if code.trim().is_empty() {
            return Ok(CompileResult::failed("error: empty source file"));
        }
        let id = source_digest(code);
        let sketch_dir = self.work_dir.join("sketch");
        let out_dir = self.work_dir.join("build").join(&id[..16]);
        std::fs::create_dir_all(&sketch_dir).map_err(|e| Error::io(&sketch_dir, e))?;
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let ino = sketch_dir.join("sketch.ino");
        std::fs::write(&ino, code).map_err(|e| Error::io(&ino, e))?;
        let sketch = sketch_dir.to_string_lossy().into_owned();
        let out = out_dir.to_string_lossy().into_owned();
        let c = self.run(
            &["compile", "--fqbn", &cfg.toolchain_board_id, "--output-dir", &out, &sketch],
            Some(self.compile_timeout),
        )?;
        match c.status {
            None => Ok(CompileResult::failed(format!(
                "{}\ncompile timed out after {} s",
                c.output,
                self.compile_timeout.as_secs()
            ))),
            Some(s) if s.success() => {
                self.builds.insert(id.clone(), out_dir.clone());
                Ok(CompileResult::ok(c.output, BinaryArtifact { id, path: Some(out_dir) }))
            }
            Some(_) => Ok(CompileResult::failed(c.output)),
        }
    }

    fn flash_and_capture(&mut self, binary: &BinaryArtifact, cfg: &HardwareConfig, window_ms: u64) -> Result<FlashLog> {
        let port = self.port(cfg)?;
        let _lease = PortLease::acquire(&port)?;
        let input = binary
            .path
            .clone()
            .or_else(|| self.builds.get(&binary.id).cloned())
            .ok_or_else(|| Error::Environment(format!("no build output for binary {}", binary.id)))?;
        let input = input.to_string_lossy().into_owned();
        let sketch = self.work_dir.join("sketch").to_string_lossy().into_owned();
        let up = self.run(
            &["upload", "-p", &port, "--fqbn", &cfg.toolchain_board_id, "--input-dir", &input, &sketch],
            Some(self.compile_timeout),
        )?;
        if !up.status.is_some_and(|s| s.success()) {
            return Err(Error::Environment(format!("upload to {port} failed: {}", up.output.trim())));
        }
        if window_ms == 0 {
            return Ok(FlashLog::normalized(vec![], 0, port));
        }
        let baud = format!("baudrate={SERIAL_BAUD}");
        let mut child = Command::new(&self.cli)
            .args(["monitor", "-p", &port, "--config", &baud, "--quiet"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Environment(format!("cannot open serial monitor: {e}")))?;
        let stdout = child.stdout.take().expect("piped");
        let start = Instant::now();
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(|l| l.ok()) {
                if tx.send((start.elapsed().as_millis() as u64, line)).is_err() {
                    break;
                }
            }
        });
        let window = Duration::from_millis(window_ms);
        let mut lines = Vec::new();
        while let Some(left) = window.checked_sub(start.elapsed()) {
            match rx.recv_timeout(left) {
                Ok((t_ms, text)) => lines.push(LogLine { t_ms, text }),
                Err(_) => break,
            }
        }
        let _ = child.kill();
        let _ = child.wait();
        Ok(FlashLog::normalized(lines, window_ms, port))
    }

    fn install_libraries(&mut self, resolution: &Resolution) -> InstallReport {
        let present = self.installed_libraries();
        let mut report = InstallReport::default();
        for a in resolution.assignments.values() {
            let spec = match a.library.latest_version() {
                Some(v) => format!("{}@{v}", a.library.name),
                None => a.library.name.clone(),
            };
            if present.contains(&spec) {
                report.already_present.push(spec);
                continue;
            }
            match self.run(&["lib", "install", &spec], None) {
                Ok(c) if c.status.is_some_and(|s| s.success()) => report.installed.push(spec),
                Ok(c) => report.errors.push((spec, c.output.trim().to_string())),
                Err(e) => report.errors.push((spec, e.to_string())),
            }
        }
        report
    }
}
