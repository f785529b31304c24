//! One check per acceptance criterion that needs no CLI binary. Each
//! returns a short detail line on success and the first mismatch on
//! failure.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use num_rational::Ratio;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embedpilot::autoprogram::{
    check_order, strip_debug, Limits, OrderViolation, SessionStatus, Subtask, MARKER_TOKEN,
};
use embedpilot::dep_resolver::{combine, resolve_all, select_library, LibraryScore};
use embedpilot::eval_harness::{coding_accuracy, completion, run_benchmark, ApiUsage, Dataset, TaskOutcome};
use embedpilot::executor::{FaultScript, FlashDirective, FlashLog, LogLine, ScriptLine, SimulatedExecutor};
use embedpilot::gateway::{Gateway, ModelRequest, TokenUsage};
use embedpilot::hw_config::{HardwareConfig, Interface, ModuleBinding, TaskSpec};
use embedpilot::knowledge::{ApiEntry, ApiParam, ComponentKnowledge, KnowledgeBase, UtilityEntry};
use embedpilot::library_index::{LibraryDetails, LibraryIndex};
use embedpilot::memory_pickup::{full_context, pick_up, Functionality};
use embedpilot::pipeline::{run_pipeline, RunOptions};
use embedpilot::prompting::{build_task_prompt, Feedback};
use embedpilot::security::{unmask, RiskLexicon, UnmaskStyle};
use embedpilot::text::TfIdfSpace;
use embedpilot::Error;

use crate::oracle::{self, Lib};
use crate::support::{self, RoleModel};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const WORDS: &[&str] = &[
    "sensor", "driver", "library", "arduino", "temperature", "humidity", "pressure", "display", "oled", "motion",
    "accelerometer", "gyro", "distance", "ultrasonic", "digital", "i2c", "spi", "fast", "simple", "wire", "graphics",
    "reading", "module", "board", "esp32", "helper", "unified", "light", "weather",
];

const COMPONENTS: &[&str] = &["DHT11", "BMP280", "SSD1306", "MPU6050", "HC-SR04", "DS18B20"];
const ARCHES: &[&str] = &["avr", "esp32", "samd", "megaavr", "*"];
const VENDORS: &[&str] = &["Adafruit", "Seeed", "Grove", "Makers", "Tiny", "Open"];

fn phrase(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random index of `size` libraries clustered around [`COMPONENTS`].
pub fn random_index(seed: u64, size: usize) -> Vec<LibraryDetails> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let comp = *COMPONENTS.choose(&mut rng).unwrap();
            let vendor = *VENDORS.choose(&mut rng).unwrap();
            let name = match rng.random_range(0..4) {
                0 => format!("{comp} {} {i}", WORDS.choose(&mut rng).unwrap()),
                1 => format!("{vendor} {comp} {i}"),
                2 => format!("{vendor} {} {i}", WORDS.choose(&mut rng).unwrap()),
                _ => format!("{} lib {i}", WORDS.choose(&mut rng).unwrap()),
            };
            let mention = if rng.random_bool(0.7) { comp } else { "" };
            let description = format!("{} {mention} {}", phrase(&mut rng, 1, 5), phrase(&mut rng, 0, 3));
            let paragraph = phrase(&mut rng, 0, 12);
            let versions = (0..rng.random_range(1..=8)).map(|v| format!("1.{v}.0")).collect();
            let mut architectures: Vec<String> = ARCHES
                .iter()
                .filter(|_| rng.random_bool(0.35))
                .map(|a| a.to_string())
                .collect();
            if architectures.is_empty() {
                architectures.push("avr".into());
            }
            LibraryDetails {
                name,
                description,
                paragraph,
                versions,
                architectures,
            }
        })
        .collect()
}

fn as_lib(d: &LibraryDetails) -> Lib {
    Lib {
        name: d.name.clone(),
        description: d.description.clone(),
        paragraph: d.paragraph.clone(),
        versions: d.versions.clone(),
        architectures: d.architectures.clone(),
    }
}

pub fn board(arch: &str, components: &[&str]) -> HardwareConfig {
    HardwareConfig {
        platform_name: "Test board".into(),
        platform_arch: arch.into(),
        toolchain_board_id: format!("vendor:{arch}:board"),
        port: None,
        modules: components
            .iter()
            .enumerate()
            .map(|(i, c)| ModuleBinding {
                component_name: c.to_string(),
                pins: vec![format!("D{}", i + 2)],
                interface: Interface::Gpio,
            })
            .collect(),
        secrets: vec![],
    }
}

/// Compares `resolve_all` with the brute-force oracle on one index.
pub fn resolver_agrees(entries: &[LibraryDetails], arch: &str, n: usize) -> Check {
    let index = LibraryIndex {
        entries: entries.to_vec(),
        source_id: "fixture".into(),
    };
    let cfg = board(arch, COMPONENTS);
    let resolution = resolve_all(&cfg, &index, n);
    let libs: Vec<Lib> = entries.iter().map(as_lib).collect();
    for comp in COMPONENTS {
        let top = oracle::search(&libs, comp, n);
        let got_top: Vec<String> = resolution.candidates[*comp].iter().map(|c| c.library.name.clone()).collect();
        let want_top: Vec<String> = top.iter().map(|l| l.name.clone()).collect();
        ensure!(got_top == want_top, "{comp}: candidates {got_top:?} != oracle {want_top:?}");
        let scores = oracle::score_all(comp, &top, arch);
        for (c, s) in resolution.candidates[*comp].iter().zip(&scores) {
            ensure!(
                (c.score.m - s.m).abs() < 1e-9 && (c.score.v - s.v).abs() < 1e-12 && f64::from(c.score.a) == s.a,
                "{comp}/{}: score ({}, {}, {}) != oracle ({}, {}, {})",
                c.library.name,
                c.score.m,
                c.score.v,
                c.score.a,
                s.m,
                s.v,
                s.a
            );
        }
        let want = oracle::select(comp, &top, arch);
        let got = resolution.library_for(comp).map(|l| l.name.clone());
        ensure!(got == want, "{comp}: selected {got:?}, oracle {want:?}");
        ensure!(
            got.is_some() != resolution.unresolved.iter().any(|u| u == comp),
            "{comp}: unresolved list disagrees with the assignment"
        );
    }
    Ok(format!(
        "{} components agree, {} resolved",
        COMPONENTS.len(),
        resolution.assignments.len()
    ))
}

pub fn c1_resolver_oracle() -> Check {
    let entries = random_index(1, 60);
    let started = Instant::now();
    let detail = resolver_agrees(&entries, "esp32", 5)?;
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs_f64() < 1.0, "resolve_all took {elapsed:?}");
    for seed in 2..12 {
        for n in [1, 3, 10] {
            resolver_agrees(&random_index(seed, 50 + seed as usize), ARCHES[(seed % 4) as usize], n)
                .map_err(|e| format!("seed {seed}, n {n}: {e}"))?;
        }
    }
    Ok(format!("60-library index: {detail} in {elapsed:.2?}; 30 extra indices agree"))
}

pub fn c2_formula() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let m: f64 = rng.random();
        let v: f64 = rng.random();
        let a: u8 = rng.random_range(0..=1);
        let want = (m + 0.1 * v + 0.1 * f64::from(a)) * f64::from(a);
        let got = combine(m, v, a);
        ensure!((got - want).abs() <= f64::EPSILON, "combine({m}, {v}, {a}) = {got}, want {want}");
        ensure!(LibraryScore::new(m, v, a).total == got, "LibraryScore total disagrees with combine");
        if a == 0 {
            ensure!(got == 0.0, "a = 0 gave nonzero total {got}");
        }
    }
    let mut excluded = 0;
    for seed in 0..200u64 {
        let entries = random_index(seed + 100, 8);
        let sel = select_library("DHT11", &entries, "esp32");
        if let Some(w) = sel.winner() {
            ensure!(w.score.a == 1, "incompatible winner {}", w.library.name);
        }
        let all_incompatible = sel.scored.iter().all(|c| c.score.a == 0);
        ensure!(sel.chosen.is_none() == all_incompatible, "seed {seed}: unresolved iff nothing is compatible");
        excluded += sel.scored.iter().filter(|c| c.score.a == 0).count();
    }
    Ok(format!("1000 triples exact; {excluded} incompatible candidates never selected"))
}

fn lib(name: &str, description: &str, versions: usize, arches: &[&str]) -> LibraryDetails {
    LibraryDetails {
        name: name.into(),
        description: description.into(),
        paragraph: String::new(),
        versions: (0..versions).map(|v| format!("1.{v}.0")).collect(),
        architectures: arches.iter().map(|a| a.to_string()).collect(),
    }
}

/// The correct library for DHT11 on esp32 only overlaps by token, so it
/// ranks behind three name hits that are built for other boards.
pub fn candidate_count_fixture() -> LibraryIndex {
    LibraryIndex {
        entries: vec![
            lib("DHT11 Classic", "legacy sensor code for old boards", 2, &["avr"]),
            lib("DHT11 Mini", "trimmed build for small chips", 1, &["avr"]),
            lib("DHT11 Samd", "port for samd only", 3, &["samd"]),
            lib("Grove Climate", "reads dht11 sensors", 6, &["esp32"]),
            lib("Humidity Toolkit", "helpers for dht11 plus lots of other weather and climate station parts", 2, &["*"]),
            lib("Sonar", "ultrasonic distance", 4, &["*"]),
        ],
        source_id: "candidate-count".into(),
    }
}

pub const CANDIDATE_COUNT_TARGET: &str = "Grove Climate";

pub fn c3_candidate_count() -> Check {
    let index = candidate_count_fixture();
    let rank = index
        .search("DHT11", 10)
        .iter()
        .position(|l| l.name == CANDIDATE_COUNT_TARGET)
        .map(|p| p + 1);
    ensure!(rank == Some(4), "target ranks {rank:?} in search, fixture needs 4");
    let cfg = board("esp32", &["DHT11"]);
    let five = resolve_all(&cfg, &index, 5);
    let one = resolve_all(&cfg, &index, 1);
    let pick = |r: &embedpilot::dep_resolver::Resolution| r.library_for("DHT11").map(|l| l.name.clone());
    ensure!(pick(&five).as_deref() == Some(CANDIDATE_COUNT_TARGET), "top_n = 5 picked {:?}", pick(&five));
    ensure!(pick(&one).as_deref() != Some(CANDIDATE_COUNT_TARGET), "top_n = 1 picked the target");
    Ok(format!("search rank 4; top_n=5 -> {:?}, top_n=1 -> {:?}", pick(&five), pick(&one)))
}

pub fn c4_tfidf() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let corpus: Vec<String> = (0..40).map(|_| phrase(&mut rng, 2, 14)).collect();
    let space = TfIdfSpace::fit(&corpus);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let a = if i % 3 == 0 { phrase(&mut rng, 1, 6) } else { corpus.choose(&mut rng).unwrap().clone() };
        let b = corpus.choose(&mut rng).unwrap().clone();
        let got = space.cosine(&a, &b);
        let want = oracle::tfidf_cosine(&corpus, &a, &b);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() < 1e-9, "cosine({a:?}, {b:?}) = {got}, oracle {want}");
    }
    for doc in &corpus {
        let c = space.cosine(doc, doc);
        ensure!((c - 1.0).abs() < 1e-12, "identity pair {doc:?} gave {c}");
    }
    let disjoint = ["temperature humidity", "display oled graphics"];
    let c = TfIdfSpace::fit(&disjoint).cosine(disjoint[0], disjoint[1]);
    ensure!(c == 0.0, "disjoint pair gave {c}");
    ensure!(oracle::tfidf_cosine(&disjoint.map(String::from), disjoint[0], disjoint[1]) == 0.0, "oracle disjoint");
    Ok(format!("100 pairs within {worst:.1e}; identities 1.0; disjoint 0.0"))
}

pub fn c5_compile_loop() -> Check {
    for j in 0..20u32 {
        let failures = j % 3;
        let mut script = FaultScript::default();
        support::compile_faults(&mut script, failures);
        support::flash_faults(&mut script, Some(1));
        let run = support::run_scenario(script, Limits::default());
        let r = &run.result;
        ensure!(r.status == SessionStatus::Success, "fixture {j}: status {}", r.status);
        ensure!(r.compile_trials == [failures + 1], "fixture {j}: compile trials {:?}", r.compile_trials);
    }
    let mut script = FaultScript::default();
    support::compile_faults(&mut script, 1000);
    let run = support::run_scenario(script, Limits::default());
    ensure!(run.result.status == SessionStatus::CompileExhausted, "unfixable: status {}", run.result.status);
    ensure!(run.result.compile_trials == [3], "unfixable: compile trials {:?}", run.result.compile_trials);
    ensure!(run.executor.flash_calls() == 0, "unfixable script reached the board");
    Ok("20/20 fixable fixtures succeed with t_c <= 3; unfixable stops at t_c = 3".into())
}

pub fn c6_flash_loop() -> Check {
    let limits = Limits::default();
    for f in 1..=5 {
        let mut script = FaultScript::default();
        support::flash_faults(&mut script, Some(f));
        let run = support::run_scenario(script, limits);
        ensure!(run.result.status == SessionStatus::Success, "fixed on {f}: status {}", run.result.status);
        ensure!(run.result.flash_trials == f, "fixed on {f}: t_f = {}", run.result.flash_trials);
        ensure!(run.result.gateway_calls <= limits.max_gateway_calls(), "fixed on {f}: call budget exceeded");
    }
    let mut script = FaultScript::default();
    support::flash_faults(&mut script, None);
    let run = support::run_scenario(script, limits);
    ensure!(run.result.status == SessionStatus::FlashExhausted, "unfixable: status {}", run.result.status);
    ensure!(run.result.flash_trials == 5, "unfixable: t_f = {}", run.result.flash_trials);
    ensure!(run.result.gateway_calls <= limits.max_gateway_calls(), "unfixable: call budget exceeded");
    Ok("t_f = f for f in 1..=5; unfixable stops at t_f = 5".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    EndBeforeStart,
    MissingStart,
    MissingEnd,
    Swap,
}

/// A clean log for `n` subtasks repeated over `loops` iterations, with
/// CHECK lines and plain output interleaved.
pub fn generated_log(rng: &mut ChaCha8Rng, n: usize, loops: usize) -> (Vec<Subtask>, Vec<Vec<String>>) {
    let subtasks: Vec<Subtask> = (1..=n)
        .map(|i| Subtask {
            id: format!("S{i}"),
            description: format!("step {i}"),
        })
        .collect();
    let mut blocks = Vec::new();
    for _ in 0..loops {
        for s in &subtasks {
            let mut b = vec![format!("{MARKER_TOKEN}|{}|START", s.id)];
            for k in 0..rng.random_range(0..3) {
                b.push(if rng.random_bool(0.5) {
                    format!("{MARKER_TOKEN}|{}|CHECK|v{k}={}", s.id, rng.random_range(0..100))
                } else {
                    format!("reading {}", rng.random_range(0..1000))
                });
            }
            b.push(format!("{MARKER_TOKEN}|{}|END", s.id));
            blocks.push(b);
        }
    }
    (subtasks, blocks)
}

pub fn inject(blocks: &mut [Vec<String>], n: usize, kind: Injection, k: usize) {
    let start = format!("{MARKER_TOKEN}|S{}|START", k + 1);
    let end = format!("{MARKER_TOKEN}|S{}|END", k + 1);
    match kind {
        Injection::MissingStart => blocks.iter_mut().for_each(|b| b.retain(|l| *l != start)),
        Injection::MissingEnd => blocks.iter_mut().for_each(|b| b.retain(|l| *l != end)),
        Injection::EndBeforeStart => {
            let b = &mut blocks[k];
            let e = b.pop().expect("block ends with END");
            b.insert(0, e);
        }
        Injection::Swap => {
            let j = if k + 1 < n { k + 1 } else { k - 1 };
            blocks.swap(k, j);
        }
    }
}

pub fn flatten(blocks: &[Vec<String>]) -> FlashLog {
    let lines = blocks
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, t)| LogLine {
            t_ms: i as u64 * 10,
            text: t.clone(),
        })
        .collect();
    FlashLog::normalized(lines, u64::MAX, "gen")
}

fn classify(v: &OrderViolation) -> Injection {
    match v {
        OrderViolation::EndBeforeStart(_) => Injection::EndBeforeStart,
        OrderViolation::MissingStart(_) => Injection::MissingStart,
        OrderViolation::MissingEnd(_) => Injection::MissingEnd,
        OrderViolation::SequenceMismatch { .. } => Injection::Swap,
    }
}

pub fn c7_order_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kinds = [Injection::EndBeforeStart, Injection::MissingStart, Injection::MissingEnd, Injection::Swap];
    for case in 0..200 {
        let kind = kinds[case % 4];
        let n = rng.random_range(2..=6);
        let loops = rng.random_range(1..=3);
        let (subtasks, mut blocks) = generated_log(&mut rng, n, loops);
        let k = rng.random_range(0..n);
        inject(&mut blocks, n, kind, k);
        let report = check_order(&flatten(&blocks), &subtasks);
        ensure!(report.violations.len() == 1, "case {case} ({kind:?} on S{}): {:?}", k + 1, report.violations);
        ensure!(classify(&report.violations[0]) == kind, "case {case}: expected {kind:?}, got {:?}", report.violations);
    }
    for case in 0..200 {
        let n = rng.random_range(1..=6);
        let loops = rng.random_range(1..=3);
        let (subtasks, blocks) = generated_log(&mut rng, n, loops);
        let report = check_order(&flatten(&blocks), &subtasks);
        ensure!(report.passed(), "clean case {case}: {}", report.summary());
    }
    Ok("200 injected violations classified exactly; 0 false positives on 200 clean logs".into())
}

fn secret(rng: &mut ChaCha8Rng) -> String {
    const ALNUM: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZabcdefghjkmnpqrstuvwxyz23456789";
    let len = rng.random_range(10..=16);
    let mut s = String::from("Q");
    s.extend((0..len).map(|_| *ALNUM.choose(rng).unwrap() as char));
    s
}

/// A task text holding a random mix of credentials, plus their bare values.
pub fn pii_case(rng: &mut ChaCha8Rng) -> (String, Vec<String>, String) {
    let ssid = secret(rng);
    let mut secrets = vec![ssid.clone()];
    let mut parts = vec![match rng.random_range(0..3) {
        0 => format!("Join the WiFi ssid \"{ssid}\""),
        1 => format!("Connect to ssid {ssid}"),
        _ => format!("Use SSID: '{ssid}'"),
    }];
    if rng.random_bool(0.8) {
        let pw = secret(rng);
        parts.push(match rng.random_range(0..2) {
            0 => format!("with password {pw}"),
            _ => format!("with passwd = \"{pw}\""),
        });
        secrets.push(pw);
    }
    if rng.random_bool(0.6) {
        let dev = secret(rng);
        parts.push(format!("and tag readings with device id {dev}"));
        secrets.push(dev);
    }
    if rng.random_bool(0.5) {
        let key = secret(rng);
        parts.push(format!("and send them with api key \"{key}\""));
        secrets.push(key);
    }
    if rng.random_bool(0.3) {
        parts.push(format!("then print the ssid {ssid} again"));
    }
    parts.push("Switch the LED on.".into());
    (parts.join(" "), secrets, ssid)
}

pub fn c9_pii() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut requests = 0usize;
    let lexicon = RiskLexicon::default();
    for case in 0..500 {
        let (text, secrets, ssid) = pii_case(&mut rng);
        let model = Arc::new(RoleModel {
            echo_placeholders: true,
            ..Default::default()
        });
        let seen: Arc<Mutex<Vec<ModelRequest>>> = Arc::default();
        let sink = seen.clone();
        let gateway = Gateway::live(model).with_observer(Arc::new(move |r: &ModelRequest| {
            sink.lock().unwrap().push(r.clone());
        }));
        let mut script = FaultScript::default();
        let mut lines = support::log_lines(support::GOOD_CHECK);
        lines.insert(0, ScriptLine::Text(format!("WiFi joined {ssid}")));
        script.flash.push(FlashDirective {
            when_contains: Some("@DBG".into()),
            lines,
            ..Default::default()
        });
        let mut executor = SimulatedExecutor::new(script);
        let hw = support::uno();
        let task = TaskSpec {
            description: text.clone(),
            reference_api_sequence: None,
            expected_functionality_count: None,
        };
        let mut yes = |_: &embedpilot::security::RiskVerdict| Some("yes".to_string());
        let opts = RunOptions {
            k: 2,
            context_budget_tokens: 2000,
            limits: Limits::default(),
            lexicon: lexicon.clone(),
            model_risk_check: true,
            confirm: &mut yes,
        };
        let out = run_pipeline(
            &task,
            &hw,
            &KnowledgeBase::default(),
            &embedpilot::dep_resolver::Resolution::default(),
            &mut executor,
            &gateway,
            opts,
        )
        .map_err(|e| format!("case {case}: {e}"))?;
        let back = unmask(&out.masked_task.description, &out.pii, UnmaskStyle::Verbatim)
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure!(back == text, "case {case}: round trip changed {text:?} into {back:?}");
        for s in &secrets {
            ensure!(!out.masked_task.description.contains(s.as_str()), "case {case}: {s} survived masking");
        }
        let seen = seen.lock().unwrap();
        requests += seen.len();
        for r in seen.iter() {
            let body = r.joined_text();
            for s in &secrets {
                ensure!(!body.contains(s.as_str()), "case {case}: outbound request carried {s}");
            }
        }
        ensure!(out.session.status == SessionStatus::Success, "case {case}: status {}", out.session.status);
        let code = out.final_code.unwrap_or_default();
        for s in &secrets {
            ensure!(code.contains(s.as_str()), "case {case}: final code lacks restored {s}");
        }
    }
    Ok(format!("500 cases round-trip; {requests} intercepted requests carry no secret"))
}

pub fn c10_strip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..300 {
        let n = rng.random_range(0..40);
        let lines: Vec<String> = (0..n)
            .map(|i| match rng.random_range(0..4) {
                0 => format!("  Serial.println(\"{MARKER_TOKEN}|S{i}|START\");"),
                1 => format!("  Serial.print(\"{MARKER_TOKEN}|S{i}|CHECK|x=\"); // {i}"),
                2 => String::new(),
                _ => format!("  int v{i} = {i};"),
            })
            .collect();
        let mut src = lines.join("\n");
        if rng.random_bool(0.5) {
            src.push('\n');
        }
        let once = strip_debug(&src);
        ensure!(strip_debug(&once) == once, "case {case}: strip is not idempotent");
        ensure!(!once.contains(MARKER_TOKEN), "case {case}: marker survived");
        let kept: Vec<&str> = src.split_inclusive('\n').filter(|l| !l.contains(MARKER_TOKEN)).collect();
        ensure!(once == kept.concat(), "case {case}: strip removed a non-marker line");
    }
    let mut fixtures = 0;
    for failures in 0..3 {
        for f in 1..=5 {
            let mut script = FaultScript::default();
            support::compile_faults(&mut script, failures);
            support::flash_faults(&mut script, Some(f));
            let run = support::run_scenario(script, Limits::default());
            ensure!(run.result.status == SessionStatus::Success, "fixture ({failures}, {f}) failed");
            let last = run.executor.flashed_sources().last().cloned().unwrap_or_default();
            let final_code = run.result.final_code.clone().unwrap_or_default();
            ensure!(last == final_code, "fixture ({failures}, {f}): flashed code differs from final code");
            ensure!(!final_code.contains(MARKER_TOKEN), "fixture ({failures}, {f}): markers in final code");
            ensure!(strip_debug(&final_code) == final_code, "fixture ({failures}, {f}): final code not clean");
            fixtures += 1;
        }
    }
    Ok(format!("300 random sources; clean recompile and reflash on {fixtures} success fixtures"))
}

fn api(name: &str, signature: &str, notes: &str) -> ApiEntry {
    ApiEntry {
        api_name: name.into(),
        signature: signature.into(),
        parameters: vec![ApiParam {
            name: "value".into(),
            description: "argument".into(),
        }],
        returns: "void".into(),
        usage_notes: notes.into(),
        source_file: PathBuf::from("src/lib.h"),
    }
}

fn utility(functionality: &str, seq: &[&str]) -> UtilityEntry {
    UtilityEntry {
        functionality: functionality.into(),
        api_sequence: seq.iter().map(|s| s.to_string()).collect(),
        source_example: PathBuf::from("examples/demo/demo.ino"),
    }
}

/// Three components with several examples each.
pub fn fixture_kb() -> KnowledgeBase {
    let mut kb = KnowledgeBase::default();
    kb.upsert(ComponentKnowledge {
        component: "DHT11".into(),
        library_name: "DHT sensor library".into(),
        library_version: "1.4.6".into(),
        api_table: vec![
            api("DHT::begin", "void begin(uint8_t usec = 55)", "call once in setup"),
            api("DHT::readTemperature", "float readTemperature(bool S = false)", "Celsius unless S is true"),
            api("DHT::readHumidity", "float readHumidity(bool force = false)", "relative humidity in percent"),
            api("DHT::computeHeatIndex", "float computeHeatIndex(float t, float h, bool f = true)", "apparent temperature"),
        ],
        utility_table: vec![
            utility("read temperature and humidity and print them to serial", &["DHT::begin", "DHT::readTemperature", "DHT::readHumidity"]),
            utility("compute the heat index from temperature and humidity", &["DHT::computeHeatIndex"]),
        ],
    });
    kb.upsert(ComponentKnowledge {
        component: "SSD1306".into(),
        library_name: "Adafruit SSD1306".into(),
        library_version: "2.5.9".into(),
        api_table: vec![
            api("Adafruit_SSD1306::begin", "bool begin(uint8_t switchvcc, uint8_t i2caddr)", "returns false when allocation fails"),
            api("Adafruit_SSD1306::clearDisplay", "void clearDisplay()", "clears the buffer only"),
            api("Adafruit_SSD1306::display", "void display()", "pushes the buffer to the panel"),
            api("Adafruit_SSD1306::drawBitmap", "void drawBitmap(int16_t x, int16_t y, const uint8_t* bmp, int16_t w, int16_t h, uint16_t color)", "bitmap in program memory"),
            api("Adafruit_SSD1306::startscrollright", "void startscrollright(uint8_t start, uint8_t stop)", "hardware scroll"),
        ],
        utility_table: vec![
            utility("draw a bitmap logo on the oled display", &["Adafruit_SSD1306::begin", "Adafruit_SSD1306::drawBitmap", "Adafruit_SSD1306::display"]),
            utility("scroll text across the screen", &["Adafruit_SSD1306::startscrollright"]),
            utility("clear the oled screen", &["Adafruit_SSD1306::clearDisplay", "Adafruit_SSD1306::display"]),
        ],
    });
    kb.upsert(ComponentKnowledge {
        component: "Servo".into(),
        library_name: "Servo".into(),
        library_version: "1.2.1".into(),
        api_table: vec![
            api("Servo::attach", "uint8_t attach(int pin)", "attach before writing"),
            api("Servo::write", "void write(int value)", "angle in degrees"),
            api("Servo::detach", "void detach()", "stops the pulse train"),
        ],
        utility_table: vec![
            utility("sweep the servo shaft back and forth", &["Servo::attach", "Servo::write"]),
            utility("control servo position with a potentiometer knob", &["Servo::attach", "Servo::write"]),
        ],
    });
    kb
}

pub fn c11_token_economy() -> Check {
    let kb = fixture_kb();
    let cfg = board("avr", &["DHT11", "SSD1306", "Servo"]);
    let cases: [&[&str]; 3] = [
        &["read temperature and humidity from the DHT11"],
        &["read temperature from the DHT11", "sweep the servo"],
        &["clear the oled display", "draw a bitmap logo"],
    ];
    let full = full_context(&kb);
    let mut details = Vec::new();
    for fs in cases {
        let functionalities: Vec<Functionality> = fs.iter().map(|f| Functionality::new(*f)).collect();
        let selected = pick_up(&functionalities, &kb, 2, 2000);
        let task = support::task(&fs.join(" and "));
        let fb = Feedback::default();
        let small = build_task_prompt(&task, &cfg, &selected, &fb, 100_000).map_err(|e| e.to_string())?;
        let big = build_task_prompt(&task, &cfg, &full, &fb, 100_000).map_err(|e| e.to_string())?;
        ensure!(
            small.approx_tokens() < big.approx_tokens(),
            "{fs:?}: selective {} tokens, full {}",
            small.approx_tokens(),
            big.approx_tokens()
        );
        ensure!(selected.match_count() > 0, "{fs:?}: nothing was picked up");
        details.push(format!("{}<{}", small.approx_tokens(), big.approx_tokens()));
    }
    Ok(format!("selective vs full prompt tokens: {}", details.join(", ")))
}

pub const TEN_TASKS: &str = r#"
[[tasks]]
id = "t01"
description = "blink"
module_tags = ["led"]
difficulty = 1
components = ["LED"]
functionalities = 1
reference = ["pinMode(13,OUTPUT)", "digitalWrite(13,HIGH)"]

[[tasks]]
id = "t02"
description = "blink, wrong level"
module_tags = ["led"]
difficulty = 1
components = ["LED"]
functionalities = 1
reference = ["pinMode(13,OUTPUT)", "digitalWrite(13,HIGH)"]

[[tasks]]
id = "t03"
description = "sample"
module_tags = ["dht"]
difficulty = 1
components = ["DHT11"]
functionalities = 1
reference = ["analogRead(A0)", "delay(1000)"]

[[tasks]]
id = "t04"
description = "threshold, never passes flashing"
module_tags = ["led", "dht"]
difficulty = 2
components = ["LED", "DHT11"]
functionalities = 2
reference = ["pinMode(7,OUTPUT)", "analogRead(A0)", "digitalWrite(7,HIGH)"]

[[tasks]]
id = "t05"
description = "threshold, last call wrong"
module_tags = ["led", "dht"]
difficulty = 2
components = ["LED", "DHT11"]
functionalities = 2
reference = ["pinMode(7,OUTPUT)", "analogRead(A0)", "digitalWrite(7,HIGH)"]

[[tasks]]
id = "t06"
description = "servo half"
module_tags = ["servo"]
difficulty = 2
components = ["Servo"]
functionalities = 1
reference = ["analogWrite(9,128)", "delay(15)"]

[[tasks]]
id = "t07"
description = "servo follows sensor"
module_tags = ["servo", "dht"]
difficulty = 3
components = ["Servo", "DHT11"]
functionalities = 2
reference = ["pinMode(9,OUTPUT)", "analogRead(A1)", "analogWrite(9,64)", "delay(20)"]

[[tasks]]
id = "t08"
description = "servo and led, never compiles"
module_tags = ["servo", "led"]
difficulty = 3
components = ["Servo", "LED"]
functionalities = 2
reference = ["analogWrite(9,255)", "digitalWrite(13,HIGH)"]

[[tasks]]
id = "t09"
description = "slow blink"
module_tags = ["led"]
difficulty = 3
components = ["LED"]
functionalities = 3
reference = ["digitalWrite(13,HIGH)", "delay(250)"]

[[tasks]]
id = "t10"
description = "executor breaks"
module_tags = ["dht"]
difficulty = 1
components = ["DHT11"]
functionalities = 1
reference = ["analogRead(A0)"]
"#;

/// Replayed session outcome per task of [`TEN_TASKS`].
pub fn ten_task_outcome(id: &str) -> embedpilot::Result<TaskOutcome> {
    let (status, code) = match id {
        "t01" => (SessionStatus::Success, "void setup() {\n  pinMode(13, OUTPUT);\n  digitalWrite(13, HIGH);\n}\n"),
        "t02" => (SessionStatus::Success, "void setup() {\n  pinMode(13, OUTPUT);\n  digitalWrite(13, LOW);\n}\n"),
        "t03" => (SessionStatus::Success, "void loop() {\n  int v = analogRead(A0);\n  delay(1000);\n}\n"),
        "t04" => (SessionStatus::FlashExhausted, ""),
        "t05" => (SessionStatus::Success, "void loop() {\n  pinMode(7, OUTPUT);\n  if (analogRead(A0) > 500) digitalWrite(7, LOW);\n}\n"),
        "t06" => (SessionStatus::Success, "void loop() {\n  analogWrite(9, 128);\n  delay(15);\n}\n"),
        "t07" => (SessionStatus::Success, "void loop() {\n  pinMode(9, OUTPUT);\n  int r = analogRead(A1);\n  analogWrite(9, 64);\n  delay(10);\n}\n"),
        "t08" => (SessionStatus::CompileExhausted, ""),
        "t09" => (SessionStatus::Success, "void loop() {\n  digitalWrite(13, HIGH);\n  delay(250);\n}\n"),
        _ => return Err(Error::Environment("serial port vanished".into())),
    };
    Ok(TaskOutcome {
        status,
        final_code: (!code.is_empty()).then(|| code.to_string()),
        api_names: vec![],
        compile_trials: vec![1],
        flash_trials: 1,
        usage: TokenUsage::new(100, 50),
    })
}

pub fn c12_metrics() -> Check {
    let reference: Vec<ApiUsage> = (0..20).map(|i| ApiUsage::new("Servo::write", &[&i.to_string()])).collect();
    let mut generated = reference.clone();
    generated[13] = ApiUsage::new("Servo::write", &["999"]);
    let acc = coding_accuracy(&generated, &reference);
    ensure!(acc == Some(Ratio::new(19, 20)), "19/20 fixture gave {acc:?}");
    let as_f64 = acc.map(|r| *r.numer() as f64 / *r.denom() as f64);
    ensure!(as_f64 == Some(0.95), "19/20 is not 0.95 as a float: {as_f64:?}");
    ensure!(!completion(SessionStatus::Success, acc), "partial match counted as complete");
    let full = coding_accuracy(&reference, &reference);
    ensure!(completion(SessionStatus::Success, full), "full match on success not complete");
    for s in [SessionStatus::CompileExhausted, SessionStatus::FlashExhausted, SessionStatus::AbortedByUser, SessionStatus::Aborted] {
        ensure!(!completion(s, full), "status {s} counted as complete");
    }

    let ds = Dataset::parse(TEN_TASKS, Path::new(".")).map_err(|e| e.to_string())?;
    let report = run_benchmark(&ds, |t| ten_task_outcome(&t.id));
    let r = |n: u64, d: u64| Ratio::new(n, d);
    let accs: BTreeMap<&str, Ratio<u64>> = [
        ("t01", r(1, 1)),
        ("t02", r(1, 2)),
        ("t03", r(1, 1)),
        ("t04", r(0, 1)),
        ("t05", r(2, 3)),
        ("t06", r(1, 1)),
        ("t07", r(3, 4)),
        ("t08", r(0, 1)),
        ("t09", r(1, 1)),
        ("t10", r(0, 1)),
    ]
    .into();
    for row in &report.rows {
        ensure!(row.coding_accuracy == accs[row.id.as_str()], "{}: accuracy {}", row.id, row.coding_accuracy);
    }
    let overall = report.overall();
    ensure!(overall.mean_coding_accuracy == r(71, 120), "overall mean {}", overall.mean_coding_accuracy);
    ensure!(overall.completion_rate == r(4, 10), "overall completion {}", overall.completion_rate);
    let by_d = report.by_difficulty();
    let want_d = [(1u8, r(5, 8), r(2, 4)), (2, r(5, 9), r(1, 3)), (3, r(7, 12), r(1, 3))];
    for (d, acc, comp) in want_d {
        ensure!(by_d[&d].mean_coding_accuracy == acc, "difficulty {d}: mean {}", by_d[&d].mean_coding_accuracy);
        ensure!(by_d[&d].completion_rate == comp, "difficulty {d}: completion {}", by_d[&d].completion_rate);
    }
    let by_m = report.by_module();
    let want_m = [("led", r(19, 36), r(2, 6)), ("dht", r(29, 60), r(1, 5)), ("servo", r(7, 12), r(1, 3))];
    for (m, acc, comp) in want_m {
        ensure!(by_m[m].mean_coding_accuracy == acc, "module {m}: mean {}", by_m[m].mean_coding_accuracy);
        ensure!(by_m[m].completion_rate == comp, "module {m}: completion {}", by_m[m].completion_rate);
    }
    let again = run_benchmark(&ds, |t| ten_task_outcome(&t.id));
    ensure!(report.to_tsv() == again.to_tsv(), "TSV differs between identical runs");
    Ok("19/20 = 0.95; 10-task aggregates equal the hand-computed means".into())
}
