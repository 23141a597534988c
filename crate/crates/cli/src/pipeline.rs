//! Declarative pipeline files: a versioned TOML document describing a
//! source, an ordered list of stages and a sink.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use boxmr::{BackendChoice, KeyFunction, PullPolicy, Separator, SourceKind};
use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use toml::Spanned;

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub version: u32,
    pub source: SourceSpec,
    #[serde(default, skip_serializing_if = "ExecutorSpec::is_default")]
    pub executor: ExecutorSpec,
    #[serde(default, skip_serializing_if = "PoolSpec::is_default")]
    pub pool: PoolSpec,
    #[serde(default)]
    pub stages: Vec<StageOp>,
    pub sink: SinkSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// File or directory; the object prefix for `object_prefix`.
    pub path: String,
    #[serde(default = "newline", skip_serializing_if = "is_newline")]
    pub separator: String,
    /// Defaults to the pool's total slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
    /// Object store root (`object_prefix` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorSpec {
    #[serde(default)]
    pub backend: BackendChoice,
    #[serde(default = "default_engine")]
    pub engine: String,
    #[serde(default)]
    pub pull: PullPolicy,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpus: Option<u32>,
}

impl Default for ExecutorSpec {
    fn default() -> Self {
        ExecutorSpec {
            backend: BackendChoice::Auto,
            engine: default_engine(),
            pull: PullPolicy::IfNotPresent,
            retries: default_retries(),
            timeout_s: None,
            cpus: None,
        }
    }
}

impl ExecutorSpec {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Slots per worker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<usize>,
}

impl PoolSpec {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageOp {
    Map {
        image: String,
        command: String,
        input: MountSpec,
        output: MountSpec,
    },
    Reduce {
        image: String,
        command: String,
        input: MountSpec,
        output: MountSpec,
        #[serde(default = "default_depth")]
        depth: usize,
    },
    RepartitionBy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        partitions: Option<usize>,
        key: KeyRule,
    },
}

impl StageOp {
    pub fn name(&self) -> &'static str {
        match self {
            StageOp::Map { .. } => "map",
            StageOp::Reduce { .. } => "reduce",
            StageOp::RepartitionBy { .. } => "repartition_by",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountSpecKind {
    TextFile,
    BinaryFiles,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountSpec {
    pub kind: MountSpecKind,
    pub path: String,
    /// Text mounts only; defaults to a newline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separator: Option<String>,
}

impl MountSpec {
    pub fn text(path: impl Into<String>) -> Self {
        MountSpec {
            kind: MountSpecKind::TextFile,
            path: path.into(),
            separator: None,
        }
    }

    pub fn to_mount(&self) -> Result<boxmr::MountPoint, boxmr::ConfigError> {
        match self.kind {
            MountSpecKind::TextFile => {
                let sep = match &self.separator {
                    Some(s) => Separator::new(s.clone().into_bytes())?,
                    None => Separator::newline(),
                };
                boxmr::MountPoint::text_file_with(self.path.clone(), sep)
            }
            MountSpecKind::BinaryFiles => boxmr::MountPoint::binary_files(self.path.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KeyRule {
    /// 1-based field of a delimited record.
    FieldDelimited { delimiter: String, field: usize },
    /// The first `bytes` bytes; shorter records are their own key.
    PrefixBytes { bytes: usize },
    /// First capture group, or the whole match when the pattern has none.
    RegexCapture { pattern: String },
}

impl KeyRule {
    pub fn compile(&self) -> Result<CompiledKey, String> {
        let regex = match self {
            KeyRule::RegexCapture { pattern } => Some(Regex::new(pattern).map_err(|e| e.to_string())?),
            _ => None,
        };
        Ok(CompiledKey {
            rule: self.clone(),
            regex,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CompiledKey {
    rule: KeyRule,
    regex: Option<Regex>,
}

impl KeyFunction for CompiledKey {
    fn key(&self, record: &[u8]) -> Result<Vec<u8>, String> {
        match (&self.rule, &self.regex) {
            (KeyRule::FieldDelimited { delimiter, field }, _) => {
                let delim = delimiter.as_bytes();
                let mut rest = record;
                let mut index = 1;
                loop {
                    let end = memmem(rest, delim);
                    if index == *field {
                        return Ok(rest[..end.unwrap_or(rest.len())].to_vec());
                    }
                    match end {
                        Some(end) => rest = &rest[end + delim.len()..],
                        None => return Err(format!("record has {index} fields, field {field} requested")),
                    }
                    index += 1;
                }
            }
            (KeyRule::PrefixBytes { bytes }, _) => Ok(record[..record.len().min(*bytes)].to_vec()),
            (KeyRule::RegexCapture { pattern }, Some(re)) => {
                let caps = re
                    .captures(record)
                    .ok_or_else(|| format!("pattern {pattern:?} does not match record"))?;
                let m = caps.get(1).or_else(|| caps.get(0)).expect("group 0 always matches");
                Ok(m.as_bytes().to_vec())
            }
            (KeyRule::RegexCapture { .. }, None) => unreachable!("regex compiled with the rule"),
        }
    }
}

fn memmem(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkKind {
    TextFile,
    BinaryDir,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkSpec {
    pub kind: SinkKind,
    pub path: String,
    /// Text sinks only; defaults to a newline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separator: Option<String>,
}

fn newline() -> String {
    "\n".into()
}

fn is_newline(s: &str) -> bool {
    s == "\n"
}

fn default_engine() -> String {
    "docker".into()
}

fn default_retries() -> usize {
    1
}

fn default_depth() -> usize {
    2
}

/// One problem in a pipeline file, located by field path and position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: ", self.line, self.column)?;
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("cannot read pipeline file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", render(.0))]
    Invalid(Vec<Diagnostic>),
}

fn render(diags: &[Diagnostic]) -> String {
    let lines: Vec<String> = diags.iter().map(ToString::to_string).collect();
    format!(
        "invalid pipeline ({} problem(s)):\n  {}",
        diags.len(),
        lines.join("\n  ")
    )
}

impl PipelineError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            PipelineError::Invalid(d) => d,
            PipelineError::Io { .. } => &[],
        }
    }
}

fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

type Fields = BTreeMap<String, Spanned<toml::Value>>;

/// Spans of the tables and fields that validation can point at.
#[derive(Default, Deserialize)]
struct Skeleton {
    version: Option<Spanned<toml::Value>>,
    source: Option<Spanned<Fields>>,
    executor: Option<Spanned<Fields>>,
    pool: Option<Spanned<Fields>>,
    #[serde(default)]
    stages: Vec<Spanned<Fields>>,
    sink: Option<Spanned<Fields>>,
}

impl Skeleton {
    /// Span of `section[.index].field`, falling back to the enclosing table.
    fn locate(&self, section: &str, index: Option<usize>, field: Option<&str>) -> Range<usize> {
        let table = match (section, index) {
            ("version", _) => return self.version.as_ref().map_or(0..0, Spanned::span),
            ("source", _) => self.source.as_ref(),
            ("executor", _) => self.executor.as_ref(),
            ("pool", _) => self.pool.as_ref(),
            ("sink", _) => self.sink.as_ref(),
            ("stages", Some(i)) => self.stages.get(i),
            _ => None,
        };
        let Some(table) = table else { return 0..0 };
        field
            .and_then(|f| table.get_ref().get(f))
            .map_or_else(|| table.span(), Spanned::span)
    }
}

struct Collector<'a> {
    text: &'a str,
    skeleton: &'a Skeleton,
    diags: Vec<Diagnostic>,
}

impl Collector<'_> {
    fn push(&mut self, section: &str, index: Option<usize>, field: Option<&str>, message: impl Into<String>) {
        let span = self.skeleton.locate(section, index, field);
        let (line, column) = position(self.text, span.start);
        let mut path = section.to_string();
        if let Some(i) = index {
            path.push_str(&format!("[{i}]"));
        }
        if let Some(f) = field {
            path.push('.');
            path.push_str(f);
        }
        self.diags.push(Diagnostic {
            field: path,
            line,
            column,
            message: message.into(),
        });
    }
}

/// Parses and validates pipeline text. Returns every problem found.
pub fn parse_str(text: &str) -> Result<PipelineSpec, PipelineError> {
    let spec: PipelineSpec = match toml::from_str(text) {
        Ok(spec) => spec,
        Err(e) => {
            let (line, column) = position(text, e.span().map_or(0, |s| s.start));
            return Err(PipelineError::Invalid(vec![Diagnostic {
                field: String::new(),
                line,
                column,
                message: e.message().trim().to_string(),
            }]));
        }
    };
    let skeleton: Skeleton = toml::from_str(text).unwrap_or_default();
    let mut c = Collector {
        text,
        skeleton: &skeleton,
        diags: Vec::new(),
    };
    validate(&spec, &mut c);
    if c.diags.is_empty() {
        Ok(spec)
    } else {
        Err(PipelineError::Invalid(c.diags))
    }
}

/// Reads, validates and resolves relative paths against the file's directory.
pub fn parse_pipeline(path: &Path) -> Result<PipelineSpec, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut spec = parse_str(&text)?;
    spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(spec)
}

/// Canonical serialization; `parse_str(&emit(s)) == s` for valid specs.
pub fn emit(spec: &PipelineSpec) -> String {
    toml::to_string(spec).expect("pipeline specs always serialize")
}

impl PipelineSpec {
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut String| {
            if !p.is_empty() && Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        };
        if self.source.kind == SourceKind::ObjectPrefix {
            if let Some(store) = self.source.store.as_mut() {
                resolve(store);
            }
        } else {
            resolve(&mut self.source.path);
        }
        resolve(&mut self.sink.path);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let skeleton = Skeleton::default();
        let mut c = Collector {
            text: "",
            skeleton: &skeleton,
            diags: Vec::new(),
        };
        validate(self, &mut c);
        if c.diags.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Invalid(c.diags))
        }
    }
}

fn validate(spec: &PipelineSpec, c: &mut Collector<'_>) {
    if spec.version != VERSION {
        c.push(
            "version",
            None,
            None,
            format!("unsupported version {} (expected {VERSION})", spec.version),
        );
    }

    let src = &spec.source;
    if src.path.is_empty() {
        c.push("source", None, Some("path"), "must not be empty");
    }
    if src.separator.is_empty() {
        c.push("source", None, Some("separator"), "must not be empty");
    }
    if src.partitions == Some(0) {
        c.push("source", None, Some("partitions"), "must be at least 1");
    }
    match (src.kind, &src.store) {
        (SourceKind::ObjectPrefix, None) => {
            c.push("source", None, Some("store"), "object_prefix sources need a store root")
        }
        (SourceKind::ObjectPrefix, Some(_)) | (_, None) => {}
        (_, Some(_)) => c.push("source", None, Some("store"), "only object_prefix sources take a store"),
    }

    let ex = &spec.executor;
    if ex.engine.is_empty() {
        c.push("executor", None, Some("engine"), "must not be empty");
    }
    if ex.timeout_s == Some(0) {
        c.push("executor", None, Some("timeout_s"), "must be at least 1");
    }
    if ex.cpus == Some(0) {
        c.push("executor", None, Some("cpus"), "must be at least 1");
    }
    if spec.pool.workers == Some(0) {
        c.push("pool", None, Some("workers"), "must be at least 1");
    }
    if spec.pool.slots == Some(0) {
        c.push("pool", None, Some("slots"), "must be at least 1");
    }

    if spec.stages.is_empty() {
        c.push("stages", None, None, "at least one stage is required");
    }
    for (i, stage) in spec.stages.iter().enumerate() {
        match stage {
            StageOp::Map {
                image,
                command,
                input,
                output,
            }
            | StageOp::Reduce {
                image,
                command,
                input,
                output,
                ..
            } => {
                if image.trim().is_empty() {
                    c.push("stages", Some(i), Some("image"), "must not be empty");
                }
                if command.trim().is_empty() {
                    c.push("stages", Some(i), Some("command"), "must not be empty");
                }
                check_mount(c, i, "input", input);
                check_mount(c, i, "output", output);
                if input.path == output.path {
                    c.push(
                        "stages",
                        Some(i),
                        Some("output"),
                        format!("duplicate mount path {:?} used for input and output", output.path),
                    );
                }
                if let StageOp::Reduce { depth: 0, .. } = stage {
                    c.push("stages", Some(i), Some("depth"), "reduce depth must be at least 1");
                }
            }
            StageOp::RepartitionBy { partitions, key } => {
                if *partitions == Some(0) {
                    c.push("stages", Some(i), Some("partitions"), "must be at least 1");
                }
                match key {
                    KeyRule::FieldDelimited { delimiter, field } => {
                        if delimiter.is_empty() {
                            c.push("stages", Some(i), Some("key"), "delimiter must not be empty");
                        }
                        if *field == 0 {
                            c.push("stages", Some(i), Some("key"), "field numbers start at 1");
                        }
                    }
                    KeyRule::PrefixBytes { bytes: 0 } => {
                        c.push("stages", Some(i), Some("key"), "prefix length must be at least 1")
                    }
                    KeyRule::PrefixBytes { .. } => {}
                    KeyRule::RegexCapture { pattern } => {
                        if let Err(e) = Regex::new(pattern) {
                            c.push("stages", Some(i), Some("key"), format!("invalid pattern: {e}"));
                        }
                    }
                }
            }
        }
    }

    if spec.sink.path.is_empty() {
        c.push("sink", None, Some("path"), "must not be empty");
    }
    match (spec.sink.kind, &spec.sink.separator) {
        (SinkKind::BinaryDir, Some(_)) => c.push("sink", None, Some("separator"), "binary sinks take no separator"),
        (SinkKind::TextFile, Some(s)) if s.is_empty() => c.push("sink", None, Some("separator"), "must not be empty"),
        _ => {}
    }
}

fn check_mount(c: &mut Collector<'_>, stage: usize, field: &str, m: &MountSpec) {
    if !m.path.starts_with('/') || m.path.len() < 2 {
        c.push(
            "stages",
            Some(stage),
            Some(field),
            format!("mount path {:?} must be absolute and not /", m.path),
        );
    }
    match (m.kind, &m.separator) {
        (MountSpecKind::BinaryFiles, Some(_)) => {
            c.push("stages", Some(stage), Some(field), "binary mounts take no separator")
        }
        (MountSpecKind::TextFile, Some(s)) if s.is_empty() => {
            c.push("stages", Some(stage), Some(field), "separator must not be empty")
        }
        _ => {}
    }
}
