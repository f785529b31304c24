//! Per-library knowledge: an API table learned from header files and a
//! utility table of `<functionality, API sequence>` entries learned from
//! example sketches. Extraction semantics are delegated to the model; this
//! module owns discovery, chunking, the strict reply formats and the store.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{write_atomic, Error, Result};
use crate::gateway::{Gateway, Message};
use crate::prompting::templates;

pub const KB_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_CHARS: usize = 12_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiParam {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiEntry {
    pub api_name: String,
    pub signature: String,
    pub parameters: Vec<ApiParam>,
    pub returns: String,
    pub usage_notes: String,
    pub source_file: PathBuf,
}

impl ApiEntry {
    /// Final path segment of the name, e.g. `begin` for `DHT::begin`.
    pub fn short_name(&self) -> &str {
        short_name(&self.api_name)
    }
}

pub fn short_name(api_name: &str) -> &str {
    let trimmed = api_name.trim().trim_end_matches("()");
    trimmed
        .rsplit(['.', ':'])
        .next()
        .unwrap_or(trimmed)
}

/// Finds `name` in `table`, by exact name first, then by short name.
pub fn find_api<'a>(table: &'a [ApiEntry], name: &str) -> Option<&'a ApiEntry> {
    let name = name.trim();
    table
        .iter()
        .find(|e| e.api_name == name)
        .or_else(|| {
            let short = short_name(name);
            table.iter().find(|e| e.short_name() == short)
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityEntry {
    pub functionality: String,
    pub api_sequence: Vec<String>,
    pub source_example: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentKnowledge {
    pub component: String,
    pub library_name: String,
    pub library_version: String,
    pub api_table: Vec<ApiEntry>,
    pub utility_table: Vec<UtilityEntry>,
}

impl ComponentKnowledge {
    fn validate(&self) -> Result<()> {
        for e in &self.api_table {
            if e.api_name.trim().is_empty() || e.signature.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "component `{}`: API entries need a name and a signature",
                    self.component
                )));
            }
        }
        for u in &self.utility_table {
            if u.api_sequence.is_empty() {
                return Err(Error::Validation(format!(
                    "component `{}`: utility entry `{}` has an empty API sequence",
                    self.component, u.functionality
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub components: Vec<ComponentKnowledge>,
}

impl KnowledgeBase {
    pub fn get(&self, component: &str) -> Option<&ComponentKnowledge> {
        self.components
            .iter()
            .find(|c| c.component.eq_ignore_ascii_case(component))
    }

    /// All utility entries, component by component in store order.
    pub fn utility_table(&self) -> Vec<UtilityEntry> {
        self.components
            .iter()
            .flat_map(|c| c.utility_table.iter().cloned())
            .collect()
    }

    pub fn api_table(&self) -> Vec<ApiEntry> {
        self.components
            .iter()
            .flat_map(|c| c.api_table.iter().cloned())
            .collect()
    }

    pub fn upsert(&mut self, knowledge: ComponentKnowledge) {
        match self
            .components
            .iter_mut()
            .find(|c| c.component.eq_ignore_ascii_case(&knowledge.component))
        {
            Some(slot) => *slot = knowledge,
            None => self.components.push(knowledge),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredComponent {
    schema_version: u32,
    #[serde(flatten)]
    knowledge: ComponentKnowledge,
}

pub fn component_slug(component: &str) -> String {
    let slug: String = component
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    if slug.is_empty() {
        "component".into()
    } else {
        slug
    }
}

/// Writes one `<component>.json` file per component under `dir`.
pub fn save_kb(kb: &KnowledgeBase, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &kb.components {
        let stored = StoredComponent {
            schema_version: KB_SCHEMA_VERSION,
            knowledge: c.clone(),
        };
        let json = serde_json::to_string_pretty(&stored).expect("knowledge serializes");
        write_atomic(&dir.join(format!("{}.json", component_slug(&c.component))), json.as_bytes())?;
    }
    Ok(())
}

pub fn load_kb(dir: &Path) -> Result<KnowledgeBase> {
    let mut kb = KnowledgeBase::default();
    if !dir.exists() {
        return Ok(kb);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::parse(path.display().to_string(), "missing schema_version"))?
            as u32;
        if found != KB_SCHEMA_VERSION {
            return Err(Error::KnowledgeVersion {
                found,
                supported: KB_SCHEMA_VERSION,
            });
        }
        let stored: StoredComponent =
            serde_json::from_value(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
        stored.knowledge.validate()?;
        kb.components.push(stored.knowledge);
    }
    Ok(kb)
}

/// A library file handed to extraction; `path` is relative to the
/// library root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub content: String,
}

#[derive(Debug, Default)]
pub struct LibraryFiles {
    pub headers: Vec<SourceFile>,
    pub examples: Vec<SourceFile>,
}

/// Headers are `.h`/`.hpp`; examples are `.ino`. Sorted by path.
pub fn discover_library_files(root: &Path) -> Result<LibraryFiles> {
    let mut files = LibraryFiles::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::parse(root.display().to_string(), e))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry
            .path()
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase());
        let bucket = match ext.as_deref() {
            Some("h") | Some("hpp") => &mut files.headers,
            Some("ino") => &mut files.examples,
            _ => continue,
        };
        let content = std::fs::read_to_string(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .to_path_buf();
        bucket.push(SourceFile { path: rel, content });
    }
    Ok(files)
}

/// Library directory as installed by the toolchain: the index name, or
/// the name with spaces replaced by underscores.
pub fn library_dir(libraries_root: &Path, library_name: &str) -> Option<PathBuf> {
    [library_name.to_string(), library_name.replace(' ', "_")]
        .into_iter()
        .map(|n| libraries_root.join(n))
        .find(|p| p.is_dir())
}

/// Splits `source` into pieces of roughly `max_chars`, cutting only after
/// a top-level line that ends a declaration or definition.
pub fn chunk_source(source: &str, max_chars: usize) -> Vec<String> {
    if source.len() <= max_chars {
        return vec![source.to_string()];
    }
    let mut chunks = Vec::new();
    let mut current = String::new();
    let mut depth: i64 = 0;
    for line in source.split_inclusive('\n') {
        current.push_str(line);
        depth += line.matches('{').count() as i64 - line.matches('}').count() as i64;
        let trimmed = line.trim();
        let boundary = depth <= 0 && (trimmed.is_empty() || trimmed.ends_with(';') || trimmed.ends_with('}'));
        if (current.len() >= max_chars && boundary) || current.len() >= max_chars * 2 {
            chunks.push(std::mem::take(&mut current));
            depth = depth.max(0);
        }
    }
    if !current.trim().is_empty() || chunks.is_empty() {
        chunks.push(current);
    }
    chunks
}

type Block = Vec<(String, String)>;

/// Parses `KEY: value` blocks terminated by `END`. Lines outside blocks
/// and code fences are ignored. `Ok(vec![])` means the reply was `NONE`.
fn parse_blocks(reply: &str, opener: &str) -> Option<Vec<Block>> {
    let lines: Vec<&str> = reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .collect();
    if lines.len() == 1 && lines[0].eq_ignore_ascii_case("NONE") {
        return Some(vec![]);
    }
    let mut blocks = Vec::new();
    let mut current: Option<Block> = None;
    for line in lines {
        if line == "END" {
            blocks.push(current.take()?);
            continue;
        }
        match split_key(line) {
            Some((key, value)) if key == opener => {
                if current.is_some() {
                    return None;
                }
                current = Some(vec![(key, value)]);
            }
            Some((key, value)) if current.is_some() => {
                current.as_mut().expect("checked").push((key, value));
            }
            _ => {
                if let Some(block) = current.as_mut() {
                    // continuation of a multi-line value
                    let last = block.last_mut().expect("blocks start with the opener");
                    last.1.push('\n');
                    last.1.push_str(line);
                }
            }
        }
    }
    if current.is_some() || blocks.is_empty() {
        return None;
    }
    Some(blocks)
}

fn split_key(line: &str) -> Option<(String, String)> {
    let (key, value) = line.split_once(':')?;
    let key = key.trim();
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_uppercase() || c == '_') {
        return None;
    }
    Some((key.to_string(), value.trim().to_string()))
}

fn api_entries_from_blocks(blocks: Vec<Block>, source: &Path) -> Option<Vec<ApiEntry>> {
    let mut out = Vec::new();
    for block in blocks {
        let mut entry = ApiEntry {
            api_name: String::new(),
            signature: String::new(),
            parameters: vec![],
            returns: String::new(),
            usage_notes: String::new(),
            source_file: source.to_path_buf(),
        };
        for (key, value) in block {
            match key.as_str() {
                "API" => entry.api_name = value,
                "SIGNATURE" => entry.signature = value,
                "PARAM" => {
                    let (name, description) = value
                        .split_once(" - ")
                        .map(|(n, d)| (n.trim().to_string(), d.trim().to_string()))
                        .unwrap_or((value.trim().to_string(), String::new()));
                    entry.parameters.push(ApiParam { name, description });
                }
                "RETURNS" => entry.returns = value,
                "USAGE" => entry.usage_notes = value,
                _ => {}
            }
        }
        if entry.api_name.is_empty() || entry.signature.is_empty() {
            return None;
        }
        out.push(entry);
    }
    Some(out)
}

/// Result of an extraction pass: values plus non-fatal diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction<T> {
    pub value: T,
    pub warnings: Vec<String>,
    pub skipped: Vec<PathBuf>,
}

/// Sends `user`, parses with `parse`; on a parse failure re-asks once with
/// the format reminder appended. `None` means both replies were malformed.
pub(crate) fn ask_structured<T>(
    gateway: &Gateway,
    system: &str,
    user: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>> {
    let first = gateway.complete(&gateway.request(vec![Message::system(system), Message::user(user)]))?;
    if let Some(v) = parse(&first.text) {
        return Ok(Some(v));
    }
    let reask = format!("{user}\n\n{}", templates::FORMAT_REMINDER.body());
    let second = gateway.complete(&gateway.request(vec![Message::system(system), Message::user(reask)]))?;
    Ok(parse(&second.text))
}

fn file_message(library: &str, file: &SourceFile, body: &str, part: Option<(usize, usize)>) -> String {
    let part = part
        .map(|(i, n)| format!(" (part {i} of {n})"))
        .unwrap_or_default();
    format!(
        "LIBRARY: {library}\nFILE: {}{part}\n--- BEGIN FILE ---\n{body}\n--- END FILE ---",
        file.path.display()
    )
}

pub fn extract_api_table(
    library: &str,
    headers: &[SourceFile],
    examples: &[SourceFile],
    gateway: &Gateway,
    chunk_chars: usize,
) -> Result<Extraction<Vec<ApiEntry>>> {
    let mut out: Extraction<Vec<ApiEntry>> = Extraction::default();
    let system = templates::API_EXTRACTION.body();
    for header in headers {
        let chunks = chunk_source(&header.content, chunk_chars.max(1));
        let n = chunks.len();
        let mut file_ok = true;
        let mut from_file: Vec<ApiEntry> = Vec::new();
        for (i, chunk) in chunks.iter().enumerate() {
            let part = (n > 1).then_some((i + 1, n));
            let user = file_message(library, header, chunk, part);
            let parsed = ask_structured(gateway, system, &user, |reply| {
                parse_blocks(reply, "API").and_then(|b| api_entries_from_blocks(b, &header.path))
            })?;
            match parsed {
                Some(entries) => from_file.extend(entries),
                None => {
                    file_ok = false;
                    break;
                }
            }
        }
        if !file_ok {
            let msg = format!("skipping {}: model output unparseable after re-ask", header.path.display());
            tracing::warn!("{msg}");
            out.warnings.push(msg);
            out.skipped.push(header.path.clone());
            continue;
        }
        for entry in from_file {
            merge_api(&mut out.value, entry);
        }
    }

    if out.value.is_empty() {
        return Ok(out);
    }
    let names: Vec<String> = out.value.iter().map(|e| e.api_name.clone()).collect();
    let system = templates::EXPERIENCE_EXTRACTION.body();
    for example in examples {
        let user = format!(
            "APIS:\n{}\n\n{}",
            names.iter().map(|n| format!("- {n}")).collect::<Vec<_>>().join("\n"),
            file_message(library, example, &example.content, None)
        );
        let parsed = ask_structured(gateway, system, &user, |reply| parse_blocks(reply, "API"))?;
        let Some(blocks) = parsed else {
            let msg = format!(
                "no usage notes from {}: model output unparseable after re-ask",
                example.path.display()
            );
            tracing::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        };
        for block in blocks {
            let name = block.iter().find(|(k, _)| k == "API").map(|(_, v)| v.clone());
            let usage = block.iter().find(|(k, _)| k == "USAGE").map(|(_, v)| v.clone());
            let (Some(name), Some(usage)) = (name, usage) else { continue };
            if let Some(entry) = out.value.iter_mut().find(|e| e.api_name == name) {
                if !entry.usage_notes.is_empty() {
                    entry.usage_notes.push('\n');
                }
                entry
                    .usage_notes
                    .push_str(&format!("{}: {usage}", example.path.display()));
            }
        }
    }
    Ok(out)
}

fn merge_api(table: &mut Vec<ApiEntry>, entry: ApiEntry) {
    match table.iter_mut().find(|e| e.api_name == entry.api_name) {
        None => table.push(entry),
        Some(existing) => {
            if existing.parameters.is_empty() {
                existing.parameters = entry.parameters;
            }
            if existing.returns.is_empty() {
                existing.returns = entry.returns;
            }
            if existing.usage_notes.is_empty() {
                existing.usage_notes = entry.usage_notes;
            }
        }
    }
}

fn parse_utility(reply: &str, source: &Path) -> Option<UtilityEntry> {
    let mut functionality = None;
    let mut apis = None;
    for line in reply.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix("FUNCTIONALITY:") {
            functionality = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("APIS:") {
            apis = Some(
                rest.split(',')
                    .map(|s| s.trim().trim_end_matches("()").to_string())
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>(),
            );
        }
    }
    let functionality = functionality.filter(|f| !f.is_empty())?;
    let api_sequence = apis.filter(|a| !a.is_empty())?;
    Some(UtilityEntry {
        functionality,
        api_sequence,
        source_example: source.to_path_buf(),
    })
}

pub fn extract_utility_table(
    library: &str,
    examples: &[SourceFile],
    api_table: &[ApiEntry],
    gateway: &Gateway,
) -> Result<Extraction<Vec<UtilityEntry>>> {
    let mut out: Extraction<Vec<UtilityEntry>> = Extraction::default();
    let system = templates::UTILITY_EXTRACTION.body();
    let known = api_table
        .iter()
        .map(|e| e.api_name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    for example in examples {
        let user = format!(
            "KNOWN APIS: {known}\n\n{}",
            file_message(library, example, &example.content, None)
        );
        match ask_structured(gateway, system, &user, |r| parse_utility(r, &example.path))? {
            Some(entry) => {
                let missing: Vec<&str> = entry
                    .api_sequence
                    .iter()
                    .filter(|n| find_api(api_table, n).is_none())
                    .map(String::as_str)
                    .collect();
                if !missing.is_empty() {
                    let msg = format!(
                        "{}: APIs not in the API table: {}",
                        example.path.display(),
                        missing.join(", ")
                    );
                    tracing::warn!("{msg}");
                    out.warnings.push(msg);
                }
                out.value.push(entry);
            }
            None => {
                let msg = format!("skipping {}: model output unparseable after re-ask", example.path.display());
                tracing::warn!("{msg}");
                out.warnings.push(msg);
                out.skipped.push(example.path.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnReport {
    pub warnings: Vec<String>,
    pub skipped: Vec<PathBuf>,
}

/// Runs both extraction passes over one library's files.
pub fn learn_component(
    component: &str,
    library_name: &str,
    library_version: &str,
    files: &LibraryFiles,
    gateway: &Gateway,
    chunk_chars: usize,
) -> Result<(ComponentKnowledge, LearnReport)> {
    let apis = extract_api_table(library_name, &files.headers, &files.examples, gateway, chunk_chars)?;
    let utils = extract_utility_table(library_name, &files.examples, &apis.value, gateway)?;
    let mut report = LearnReport::default();
    report.warnings.extend(apis.warnings);
    report.warnings.extend(utils.warnings);
    report.skipped.extend(apis.skipped);
    report.skipped.extend(utils.skipped);
    Ok((
        ComponentKnowledge {
            component: component.to_string(),
            library_name: library_name.to_string(),
            library_version: library_version.to_string(),
            api_table: apis.value,
            utility_table: utils.value,
        },
        report,
    ))
}
