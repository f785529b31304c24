use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use embedpilot::dep_resolver::Resolution;
use embedpilot::error::write_atomic;
use embedpilot::eval_harness::Dataset;
use embedpilot::gateway::{read_entries, write_transcript, Gateway, GatewayMode};
use embedpilot::hw_config::{parse_task, ConfigDocument, TaskSpec};
use embedpilot::knowledge::{
    discover_library_files, learn_component, library_dir, save_kb, KnowledgeBase, DEFAULT_CHUNK_CHARS,
};
use embedpilot::memory_pickup::{pick_up, separate_functionalities};
use embedpilot::pipeline::{bench, run_pipeline, PipelineConfig};
use embedpilot::security::{mask_pii_with, RiskVerdict};
use embedpilot::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_ENVIRONMENT: u8 = 5;

#[derive(Parser)]
#[command(name = "embedpilot", version, about = "Automated embedded IoT firmware development")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, short, global = true, default_value = "embedpilot.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a library for every hardware module and write resolution.json.
    Resolve {
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Build the knowledge base from the selected libraries' sources.
    Learn {
        /// Only learn this component.
        #[arg(long)]
        component: Option<String>,
    },
    /// Generate, compile, flash and validate firmware for the task.
    Run {
        /// Task text; defaults to the task in the hardware config.
        #[arg(long)]
        task: Option<String>,
        /// Learn missing knowledge instead of failing.
        #[arg(long)]
        auto_learn: bool,
        /// Decline risky tasks without prompting.
        #[arg(long)]
        assume_no: bool,
    },
    /// Run a benchmark dataset and write the report.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show which knowledge the task would pull into the prompt.
    ExplainContext {
        #[arg(long)]
        task: Option<String>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("EMBEDPILOT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Environment(_) => EXIT_ENVIRONMENT,
                _ => EXIT_USAGE,
            })
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    let pcfg = PipelineConfig::load(&cli.config)?;
    match &cli.command {
        Command::Resolve { top_n } => resolve(&pcfg, *top_n),
        Command::Learn { component } => {
            let gw = pcfg.build_gateway()?;
            let resolution = pcfg.load_resolution()?;
            let result = learn(&pcfg, &resolution, component.as_deref(), &gw, false);
            persist_transcript(&pcfg, &gw)?;
            result.map(|_| 0)
        }
        Command::Run { task, auto_learn, assume_no } => run(&pcfg, task.as_deref(), *auto_learn, *assume_no),
        Command::Bench { dataset, out } => {
            let ds = Dataset::load(dataset)?;
            let gw = pcfg.build_gateway()?;
            let report = bench(&ds, &pcfg, &gw);
            persist_transcript(&pcfg, &gw)?;
            let report = report?;
            let tsv = report.to_tsv();
            write_atomic(out, tsv.as_bytes())?;
            print!("{tsv}");
            Ok(0)
        }
        Command::ExplainContext { task } => explain(&pcfg, task.as_deref()),
    }
}

fn task_spec(doc: &ConfigDocument, task: Option<&str>) -> Result<TaskSpec> {
    match (task, &doc.task) {
        (Some(t), _) => parse_task(t, None),
        (None, Some(t)) => Ok(t.clone()),
        (None, None) => Err(Error::Validation("no task given; pass --task or add [task] to the hardware config".into())),
    }
}

fn resolve(pcfg: &PipelineConfig, top_n: Option<usize>) -> Result<u8> {
    let doc = pcfg.load_document()?;
    let mut pcfg = pcfg.clone();
    if let Some(n) = top_n {
        pcfg.limits.top_n = n;
    }
    let resolution = pcfg.resolve_dependencies(&doc.hardware)?;
    resolution.save(&pcfg.resolution_path())?;
    for (component, a) in &resolution.assignments {
        println!(
            "{component}\t{}\t{}\ttotal={:.4}",
            a.library.name,
            a.library.latest_version().unwrap_or("?"),
            a.score.total
        );
    }
    for component in &resolution.unresolved {
        println!("{component}\t<unresolved>");
    }
    println!("wrote {}", pcfg.resolution_path().display());
    Ok(0)
}

/// Exclusive claim on the knowledge directory while learning.
struct KnowledgeLock(PathBuf);

impl KnowledgeLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".learn.lock");
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                Error::Validation(format!(
                    "{} exists ({e}); another learn may be running, remove it if stale",
                    path.display()
                ))
            })?;
        Ok(KnowledgeLock(path))
    }
}

impl Drop for KnowledgeLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn learn(
    pcfg: &PipelineConfig,
    resolution: &Resolution,
    only: Option<&str>,
    gw: &Gateway,
    missing_only: bool,
) -> Result<KnowledgeBase> {
    let dir = pcfg.resolve(&pcfg.paths.knowledge_dir);
    let _lock = KnowledgeLock::acquire(&dir)?;
    let mut kb = pcfg.load_knowledge()?;
    let libraries = pcfg.resolve(&pcfg.paths.libraries_dir);
    for (component, a) in &resolution.assignments {
        if only.is_some_and(|c| !c.eq_ignore_ascii_case(component)) {
            continue;
        }
        if missing_only && kb.get(component).is_some() {
            continue;
        }
        let root = library_dir(&libraries, &a.library.name).ok_or_else(|| Error::MissingArtifact {
            artifact: format!("sources of library `{}` under {}", a.library.name, libraries.display()),
            hint: format!("arduino-cli lib install \"{}\"", a.library.name),
        })?;
        let files = discover_library_files(&root)?;
        let version = a.library.latest_version().unwrap_or("");
        let (knowledge, report) = learn_component(component, &a.library.name, version, &files, gw, DEFAULT_CHUNK_CHARS)?;
        for w in &report.warnings {
            eprintln!("warning: {component}: {w}");
        }
        println!(
            "{component}: {} APIs, {} utilities from {}",
            knowledge.api_table.len(),
            knowledge.utility_table.len(),
            a.library.name
        );
        kb.upsert(knowledge);
    }
    save_kb(&kb, &dir)?;
    Ok(kb)
}

/// In record mode, appends this run's exchanges to the transcript file.
fn persist_transcript(pcfg: &PipelineConfig, gw: &Gateway) -> Result<()> {
    if gw.mode() != GatewayMode::Record {
        return Ok(());
    }
    let path = pcfg.resolve(&pcfg.paths.transcript);
    let mut entries = if path.exists() { read_entries(&path)? } else { vec![] };
    entries.extend(gw.transcript());
    write_transcript(&path, &entries)
}

fn ask_confirmation(verdict: &RiskVerdict) -> Option<String> {
    eprintln!("This task needs confirmation:");
    for r in &verdict.reasons {
        eprintln!("  - [{}] {}", r.trigger, r.explanation);
    }
    eprint!("Proceed? [y/N] ");
    let _ = std::io::stderr().flush();
    let mut line = String::new();
    match std::io::stdin().lock().read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(line),
    }
}

fn run(pcfg: &PipelineConfig, task: Option<&str>, auto_learn: bool, assume_no: bool) -> Result<u8> {
    let doc = pcfg.load_document()?;
    let spec = task_spec(&doc, task)?;
    let resolution = pcfg.load_resolution()?;
    let gw = pcfg.build_gateway()?;
    let mut kb = pcfg.load_knowledge()?;
    let missing: Vec<&String> = resolution.assignments.keys().filter(|c| kb.get(c).is_none()).collect();
    if !missing.is_empty() {
        if !auto_learn {
            return Err(Error::MissingArtifact {
                artifact: format!(
                    "knowledge for {}",
                    missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                ),
                hint: "embedpilot learn".into(),
            });
        }
        kb = learn(pcfg, &resolution, None, &gw, true)?;
    }
    let mut executor = pcfg.build_executor(None)?;
    let install = executor.install_libraries(&resolution);
    for (lib, err) in &install.errors {
        eprintln!("warning: installing {lib} failed: {err}");
    }
    let mut decline = |_: &RiskVerdict| None;
    let mut prompt = ask_confirmation;
    let confirm: &mut dyn FnMut(&RiskVerdict) -> Option<String> = if assume_no { &mut decline } else { &mut prompt };
    let result = run_pipeline(&spec, &doc.hardware, &kb, &resolution, executor.as_mut(), &gw, pcfg.run_options(confirm));
    persist_transcript(pcfg, &gw)?;
    let outcome = result?;
    let out_dir = pcfg.resolve(&pcfg.paths.output_dir);
    write_atomic(&out_dir.join("session.json"), outcome.session.to_json().as_bytes())?;
    if let Some(code) = &outcome.final_code {
        write_atomic(&out_dir.join("sketch").join("sketch.ino"), code.as_bytes())?;
    }
    let s = &outcome.session;
    println!(
        "status={} compile_trials={:?} flash_trials={} gateway_calls={} tokens_in={} tokens_out={}",
        s.status, s.compile_trials, s.flash_trials, s.gateway_calls, s.usage.input_tokens, s.usage.output_tokens
    );
    if let Some(reason) = &s.abort_reason {
        println!("reason: {reason}");
    }
    Ok(s.status.exit_code() as u8)
}

fn explain(pcfg: &PipelineConfig, task: Option<&str>) -> Result<u8> {
    let doc = pcfg.load_document()?;
    let spec = task_spec(&doc, task)?;
    let kb = pcfg.load_knowledge()?;
    let gw = pcfg.build_gateway()?;
    let declared: Vec<_> = doc.hardware.secrets.iter().map(|s| (s.value.clone(), s.category)).collect();
    let (masked, _) = mask_pii_with(&spec.description, &declared);
    let masked = TaskSpec { description: masked, ..spec };
    let result = separate_functionalities(&masked, &doc.hardware, &gw);
    persist_transcript(pcfg, &gw)?;
    let separation = result?;
    if separation.fell_back {
        println!("(functionality separation fell back to the whole task)");
    }
    let ctx = pick_up(
        &separation.functionalities,
        &kb,
        pcfg.limits.k,
        pcfg.limits.context_budget_tokens,
    );
    for (f, matches) in &ctx.matched {
        println!("functionality: {}", f.text);
        if matches.is_empty() {
            println!("  (no match)");
        }
        for m in matches {
            println!(
                "  {:.6}\t#{}\t{}\t[{}]",
                m.similarity,
                m.table_index,
                m.entry.functionality,
                m.entry.api_sequence.join(", ")
            );
        }
    }
    println!("apis: {}", ctx.api_details.iter().map(|a| a.api_name.as_str()).collect::<Vec<_>>().join(", "));
    println!("context tokens: ~{}", ctx.approx_tokens());
    for w in &ctx.warnings {
        println!("warning: {w}");
    }
    Ok(0)
}
