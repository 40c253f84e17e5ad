//! Artefact collection: source-record mapping and the statement store.
//!
//! Collectors push batches of either ready-made statement drafts or raw
//! source records plus a [`MappingSpec`]. Records are normalised into drafts,
//! canonicalised, deduplicated by content id and appended to a single
//! line-delimited log per audit.
//!
//! Log layout: one JSON object per line. Statement lines carry
//! `{seq, id, subject, predicate, object, run_id?, component_id, recorded_at, kind}`;
//! every committed batch ends with a `{"commit": {...}}` line holding its
//! receipt. Statement lines not followed by a commit line belong to a batch
//! that never committed and are discarded on recovery.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::engine::{AuditWorkflow, WorkflowState};
use crate::model::{
    canonicalize_statement, validate_predicate, ArtefactKind, ArtefactStatement, ModelError, ObjectType, ObjectValue,
    StatementDraft, Timestamp,
};
use crate::query::{compile_pattern, CompiledPattern, QueryError, StatementPattern};

pub const DEFAULT_MAX_BATCH: usize = 10_000;

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("workflow is in state {0}, artefacts are only accepted while collecting")]
    WorkflowNotCollecting(WorkflowState),
    #[error("batch of {size} items exceeds the limit of {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("batch key {0:?} was already used for a different payload")]
    IdempotencyConflict(String),
    #[error("storage failure, batch not committed: {0}")]
    StorageFailure(#[source] io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("required field {0:?} is missing")]
    MissingRequiredField(String),
    #[error("value at {path:?} cannot be coerced to {object_type}")]
    TypeCoercionError { path: String, object_type: ObjectType },
    #[error("subject template field {0:?} is unresolved")]
    TemplateFieldUnresolved(String),
    #[error("malformed source record: {0}")]
    MalformedRecord(String),
    #[error("invalid mapping spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Statement(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Mapping specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    NestedRecord,
    DelimitedTable,
    TripleFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingRule {
    /// Dot path with `[*]`/`[n]` segments for nested records, a column name
    /// for tables, and a predicate (or `*`) for triple files.
    pub source_path: String,
    pub predicate: String,
    pub object_type: ObjectType,
    #[serde(default)]
    pub required: bool,
}

/// How raw records of one source are turned into statement drafts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    pub mapping_id: String,
    pub source_format: SourceFormat,
    pub subject_template: String,
    pub rules: Vec<MappingRule>,
    pub default_component_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_at_path: Option<String>,
}

impl MappingSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self, MappingError> {
        let spec: MappingSpec = serde_json::from_slice(bytes).map_err(|e| MappingError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let invalid = |m: String| Err(MappingError::InvalidSpec(format!("{}: {m}", self.mapping_id)));
        if self.mapping_id.is_empty() {
            return invalid("mapping_id must be non-empty".into());
        }
        if self.rules.is_empty() {
            return invalid("rules must be non-empty".into());
        }
        if self.subject_template.is_empty() {
            return invalid("subject_template must be non-empty".into());
        }
        if self.default_component_id.is_empty() {
            return invalid("default_component_id must be non-empty".into());
        }
        if let Some(field) = unbalanced_placeholder(&self.subject_template) {
            return invalid(format!("unbalanced placeholder in subject template near {field:?}"));
        }
        for rule in &self.rules {
            if self.source_format == SourceFormat::TripleFile && rule.source_path == "*" {
                continue;
            }
            validate_predicate(&rule.predicate).map_err(MappingError::from)?;
            if rule.source_path.is_empty() {
                return invalid("rule source_path must be non-empty".into());
            }
        }
        Ok(())
    }
}

fn unbalanced_placeholder(template: &str) -> Option<&str> {
    let mut depth = 0;
    for (i, c) in template.char_indices() {
        match c {
            '{' if depth == 0 => depth = 1,
            '}' if depth == 1 => depth = 0,
            '{' | '}' => return Some(&template[i..]),
            _ => {}
        }
    }
    (depth != 0).then_some(template)
}

/// Provenance supplied by the collector for a whole batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_at: Option<Timestamp>,
}

#[derive(Debug)]
enum PathSegment<'a> {
    Field(&'a str),
    Index(usize),
    All,
}

fn parse_path(path: &str) -> Result<Vec<PathSegment<'_>>, MappingError> {
    let mut segments = Vec::new();
    for part in path.split('.') {
        let (name, mut rest) = match part.find('[') {
            Some(i) => part.split_at(i),
            None => (part, ""),
        };
        if !name.is_empty() {
            segments.push(PathSegment::Field(name));
        }
        while !rest.is_empty() {
            let close = rest.find(']').ok_or_else(|| MappingError::InvalidSpec(format!("bad path {path:?}")))?;
            let inner = &rest[1..close];
            segments.push(match inner {
                "*" => PathSegment::All,
                n => PathSegment::Index(n.parse().map_err(|_| MappingError::InvalidSpec(format!("bad path {path:?}")))?),
            });
            rest = &rest[close + 1..];
        }
    }
    Ok(segments)
}

/// Resolves a path to the (possibly expanded) non-null values it names.
fn resolve<'v>(record: &'v Value, path: &str, format: SourceFormat) -> Result<Vec<&'v Value>, MappingError> {
    if format != SourceFormat::NestedRecord {
        return Ok(match record.get(path) {
            Some(Value::Null) | None => Vec::new(),
            Some(Value::String(s)) if s.is_empty() => Vec::new(),
            Some(v) => vec![v],
        });
    }
    let mut current = vec![record];
    for segment in parse_path(path)? {
        current = current
            .into_iter()
            .flat_map(|v| -> Vec<&Value> {
                match (&segment, v) {
                    (PathSegment::Field(f), Value::Object(map)) => map.get(*f).into_iter().collect(),
                    (PathSegment::Index(i), Value::Array(items)) => items.get(*i).into_iter().collect(),
                    (PathSegment::All, Value::Array(items)) => items.iter().collect(),
                    _ => Vec::new(),
                }
            })
            .collect();
    }
    current.retain(|v| !v.is_null());
    Ok(current)
}

fn scalar_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn coerce(value: &Value, object_type: ObjectType, path: &str) -> Result<ObjectValue, MappingError> {
    let fail = || MappingError::TypeCoercionError { path: path.to_owned(), object_type };
    match (object_type, value) {
        (ObjectType::Timestamp, Value::Number(n)) => {
            n.as_i64().and_then(Timestamp::from_millis).map(ObjectValue::Timestamp).ok_or_else(fail)
        }
        (ObjectType::Boolean, Value::Number(_)) => Err(fail()),
        (ObjectType::Decimal, Value::Number(n)) => {
            n.as_f64().filter(|f| f.is_finite()).map(ObjectValue::Decimal).ok_or_else(fail)
        }
        _ => {
            let text = scalar_text(value).ok_or_else(fail)?;
            ObjectValue::parse(object_type, &text).map_err(|_| fail())
        }
    }
}

/// Lexical type sniffing for untyped triple objects:
/// boolean, integer, decimal, timestamp, then string.
pub fn sniff_object(lexical: &str) -> ObjectValue {
    [ObjectType::Boolean, ObjectType::Integer, ObjectType::Decimal, ObjectType::Timestamp]
        .into_iter()
        .find_map(|t| ObjectValue::parse(t, lexical).ok())
        .unwrap_or_else(|| ObjectValue::String(lexical.to_owned()))
}

fn render_subject(template: &str, record: &Value, format: SourceFormat) -> Result<String, MappingError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').map(|c| c + open).ok_or_else(|| {
            MappingError::InvalidSpec(format!("unbalanced placeholder in {template:?}"))
        })?;
        let field = &rest[open + 1..close];
        let value = resolve(record, field, format)?
            .into_iter()
            .next()
            .and_then(scalar_text)
            .ok_or_else(|| MappingError::TemplateFieldUnresolved(field.to_owned()))?;
        out.push_str(&value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn record_text(record: &Value, path: Option<&str>, format: SourceFormat) -> Result<Option<String>, MappingError> {
    match path {
        None => Ok(None),
        Some(p) => Ok(resolve(record, p, format)?.into_iter().next().and_then(scalar_text).filter(|s| !s.is_empty())),
    }
}

/// Maps one raw source record to statement drafts.
///
/// `recorded_at` precedence is context, then the record's own time field,
/// then `ingest_time`.
pub fn apply_mapping(
    record: &Value,
    spec: &MappingSpec,
    context: &MappingContext,
    ingest_time: Timestamp,
) -> Result<Vec<StatementDraft>, MappingError> {
    if !record.is_object() {
        return Err(MappingError::MalformedRecord("records must be JSON objects".into()));
    }
    let format = spec.source_format;

    let recorded_at = match context.recorded_at {
        Some(t) => t,
        None => match spec.recorded_at_path.as_deref() {
            Some(path) => match resolve(record, path, format)?.into_iter().next() {
                Some(v) => match coerce(v, ObjectType::Timestamp, path)? {
                    ObjectValue::Timestamp(t) => t,
                    _ => unreachable!(),
                },
                None => ingest_time,
            },
            None => ingest_time,
        },
    };
    let mut run_id = match &context.run_id {
        Some(r) => Some(r.clone()),
        None => record_text(record, spec.run_id_path.as_deref(), format)?,
    };
    let component_id = match &context.component_id {
        Some(c) => c.clone(),
        None => record_text(record, spec.component_path.as_deref(), format)?
            .unwrap_or_else(|| spec.default_component_id.clone()),
    };

    if format == SourceFormat::TripleFile {
        let field = |name: &str| -> Result<String, MappingError> {
            record
                .get(name)
                .and_then(Value::as_str)
                .filter(|s| !s.is_empty() || name == "object")
                .map(str::to_owned)
                .ok_or_else(|| MappingError::MalformedRecord(format!("triple record lacks {name:?}")))
        };
        let predicate = field("predicate")?;
        let object_text = field("object")?;
        if run_id.is_none() {
            run_id = record.get("graph").and_then(Value::as_str).filter(|g| !g.is_empty()).map(str::to_owned);
        }
        let Some(rule) = spec.rules.iter().find(|r| r.source_path == predicate || r.source_path == "*") else {
            return Ok(Vec::new());
        };
        let (predicate, object) = if rule.source_path == "*" {
            (predicate, sniff_object(&object_text))
        } else {
            let object = ObjectValue::parse(rule.object_type, &object_text).map_err(|_| {
                MappingError::TypeCoercionError { path: rule.source_path.clone(), object_type: rule.object_type }
            })?;
            (rule.predicate.clone(), object)
        };
        let draft = StatementDraft {
            subject: render_subject(&spec.subject_template, record, format)?,
            predicate,
            object,
            run_id,
            component_id,
            recorded_at,
        };
        draft.validate()?;
        return Ok(vec![draft]);
    }

    let subject = render_subject(&spec.subject_template, record, format)?;
    let mut drafts = Vec::new();
    for rule in &spec.rules {
        let values = resolve(record, &rule.source_path, format)?;
        if values.is_empty() {
            if rule.required {
                return Err(MappingError::MissingRequiredField(rule.source_path.clone()));
            }
            continue;
        }
        for value in values {
            let draft = StatementDraft {
                subject: subject.clone(),
                predicate: rule.predicate.clone(),
                object: coerce(value, rule.object_type, &rule.source_path)?,
                run_id: run_id.clone(),
                component_id: component_id.clone(),
                recorded_at,
            };
            draft.validate()?;
            drafts.push(draft);
        }
    }
    Ok(drafts)
}

/// Maps a list of records into batch items; a record that fails to map
/// becomes a single rejected item.
pub fn map_records(
    records: &[Value],
    spec: &MappingSpec,
    context: &MappingContext,
    ingest_time: Timestamp,
) -> Vec<BatchItem> {
    let mut items = Vec::new();
    for (i, record) in records.iter().enumerate() {
        match apply_mapping(record, spec, context, ingest_time) {
            Ok(drafts) => items.extend(drafts.into_iter().map(BatchItem::Draft)),
            Err(e) => items.push(BatchItem::Invalid(format!("record {i}: {e}"))),
        }
    }
    items
}

/// Parses a header-first CSV document into one JSON object per row.
pub fn parse_delimited_table(text: &str) -> Result<Vec<Value>, MappingError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| MappingError::MalformedRecord(e.to_string()))?.clone();
    reader
        .records()
        .map(|row| {
            let row = row.map_err(|e| MappingError::MalformedRecord(e.to_string()))?;
            Ok(Value::Object(headers.iter().zip(row.iter()).map(|(h, v)| (h.to_owned(), Value::from(v))).collect()))
        })
        .collect()
}

/// Parses a tab-separated triple file: `subject<TAB>predicate<TAB>object[<TAB>graph]`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_triple_file(text: &str) -> Result<Vec<Value>, MappingError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(MappingError::MalformedRecord(format!("line {}: expected 3 or 4 columns", n + 1)));
            }
            let mut obj = serde_json::Map::new();
            obj.insert("subject".into(), cols[0].into());
            obj.insert("predicate".into(), cols[1].into());
            obj.insert("object".into(), cols[2].into());
            if let Some(g) = cols.get(3) {
                obj.insert("graph".into(), (*g).into());
            }
            Ok(Value::Object(obj))
        })
        .collect()
}

/// Parses JSON lines (one object per line) or a single JSON array.
pub fn parse_nested_records(text: &str) -> Result<Vec<Value>, MappingError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| MappingError::MalformedRecord(e.to_string()));
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MappingError::MalformedRecord(e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Batches and receipts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchItem {
    Draft(StatementDraft),
    /// An item that failed before canonicalisation, with the reason.
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct IngestBatch {
    pub batch_key: String,
    pub items: Vec<BatchItem>,
    /// Digest of the request payload; a reused key with a different
    /// fingerprint is an idempotency conflict.
    pub fingerprint: String,
}

impl IngestBatch {
    pub fn new(batch_key: impl Into<String>, items: Vec<BatchItem>) -> Self {
        let fingerprint = fingerprint(&serde_json::to_vec(&items).expect("batch items serialize"));
        Self { batch_key: batch_key.into(), items, fingerprint }
    }

    pub fn with_fingerprint(batch_key: impl Into<String>, items: Vec<BatchItem>, fingerprint: String) -> Self {
        Self { batch_key: batch_key.into(), items, fingerprint }
    }
}

pub fn fingerprint(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub batch_key: String,
    pub accepted: usize,
    pub deduplicated: usize,
    pub rejected: Vec<Rejection>,
    /// Last sequence number assigned in the store after this batch.
    pub store_sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitRecord {
    fingerprint: String,
    committed_at: Timestamp,
    receipt: IngestReceipt,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitLine {
    commit: CommitRecord,
}

/// Statement line layout in the log.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatementLine {
    seq: u64,
    id: String,
    subject: String,
    predicate: String,
    object: ObjectValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_id: Option<String>,
    component_id: String,
    recorded_at: Timestamp,
    kind: ArtefactKind,
}

/// A statement together with its position in the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredStatement {
    pub seq: u64,
    pub statement: ArtefactStatement,
}

impl StoredStatement {
    /// Serializes to the log line format (without trailing newline).
    pub fn to_line(&self) -> String {
        let s = &self.statement;
        let line = StatementLine {
            seq: self.seq,
            id: s.id().to_owned(),
            subject: s.subject().to_owned(),
            predicate: s.predicate().to_owned(),
            object: s.object().clone(),
            run_id: s.run_id().map(str::to_owned),
            component_id: s.component_id().to_owned(),
            recorded_at: s.recorded_at(),
            kind: s.kind(),
        };
        serde_json::to_string(&line).expect("statement line serializes")
    }

    /// Parses a log line, verifying the content id.
    pub fn from_line(line: &str) -> Result<Self, String> {
        let parsed: StatementLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let fields = crate::model::StatementFields {
            id: parsed.id,
            subject: parsed.subject,
            predicate: parsed.predicate,
            object: parsed.object,
            run_id: parsed.run_id,
            component_id: parsed.component_id,
            recorded_at: parsed.recorded_at,
            kind: parsed.kind,
        };
        let statement = ArtefactStatement::try_from(fields).map_err(|e| e.to_string())?;
        Ok(StoredStatement { seq: parsed.seq, statement })
    }
}

// ---------------------------------------------------------------------------
// Log sinks
// ---------------------------------------------------------------------------

/// Durable destination for committed log bytes. An `append` either persists
/// all bytes or fails leaving the sink unchanged.
pub trait LogSink: Send + Sync {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
}

struct FileSink {
    file: File,
    len: u64,
    sync: bool,
}

impl LogSink for FileSink {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let result = self.file.write_all(bytes).and_then(|()| if self.sync { self.file.sync_data() } else { Ok(()) });
        match result {
            Ok(()) => {
                self.len += bytes.len() as u64;
                Ok(())
            }
            Err(e) => {
                // roll back a partial write
                let _ = self.file.set_len(self.len);
                Err(e)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// fsync after every committed batch.
    #[default]
    Sync,
    /// Leave flushing to the operating system.
    Buffered,
}

/// What recovery had to discard.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub torn_tail: bool,
    pub uncommitted_statements: usize,
    pub committed_batches: usize,
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CommitInfo {
    last_seq: u64,
    committed_at: Timestamp,
}

/// Append-only statement log with in-memory indices.
///
/// Sequence numbers start at 1 and are contiguous, so the entry with
/// sequence `n` lives at position `n - 1`.
pub struct StatementStore {
    entries: Vec<StoredStatement>,
    ids: HashMap<String, u64>,
    by_predicate: HashMap<String, Vec<usize>>,
    by_run: HashMap<String, Vec<usize>>,
    by_component: HashMap<String, Vec<usize>>,
    by_predicate_day: HashMap<(String, i64), Vec<usize>>,
    receipts: HashMap<String, CommitRecord>,
    commits: Vec<CommitInfo>,
    sink: Option<Box<dyn LogSink>>,
    path: Option<PathBuf>,
    max_batch: usize,
}

impl std::fmt::Debug for StatementStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StatementStore")
            .field("path", &self.path)
            .field("watermark", &self.watermark())
            .field("batches", &self.commits.len())
            .finish()
    }
}

impl Default for StatementStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl StatementStore {
    pub fn in_memory() -> Self {
        StatementStore {
            entries: Vec::new(),
            ids: HashMap::new(),
            by_predicate: HashMap::new(),
            by_run: HashMap::new(),
            by_component: HashMap::new(),
            by_predicate_day: HashMap::new(),
            receipts: HashMap::new(),
            commits: Vec::new(),
            sink: None,
            path: None,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }

    /// Store that persists committed batches through `sink`.
    pub fn with_sink(sink: Box<dyn LogSink>) -> Self {
        StatementStore { sink: Some(sink), ..Self::in_memory() }
    }

    pub fn set_max_batch(&mut self, max_batch: usize) {
        self.max_batch = max_batch;
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Opens (or creates) the log at `path`, recovering its committed prefix.
    pub fn open(path: impl AsRef<Path>, durability: Durability) -> Result<(Self, RecoveryReport), IngestError> {
        let path = path.as_ref();
        if !path.exists() {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            File::create(path)?;
        }
        let (mut store, report, committed_len) = Self::replay_file(path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        if file.metadata()?.len() != committed_len {
            file.set_len(committed_len)?;
        }
        store.sink = Some(Box::new(FileSink { file, len: committed_len, sync: durability == Durability::Sync }));
        store.path = Some(path.to_owned());
        Ok((store, report))
    }

    /// Rebuilds a store from a log file without opening it for writing.
    pub fn recover(path: impl AsRef<Path>) -> Result<(Self, RecoveryReport), IngestError> {
        let (store, report, _) = Self::replay_file(path.as_ref())?;
        Ok((store, report))
    }

    fn replay_file(path: &Path) -> Result<(Self, RecoveryReport, u64), IngestError> {
        let bytes = std::fs::read(path)?;
        let mut store = Self::in_memory();
        let mut report = RecoveryReport::default();
        let mut pending: Vec<StoredStatement> = Vec::new();
        let mut committed_len = 0u64;
        let mut offset = 0usize;
        let mut line_no = 0usize;

        while offset < bytes.len() {
            line_no += 1;
            let Some(newline) = bytes[offset..].iter().position(|b| *b == b'\n') else {
                report.torn_tail = true;
                warn!(path = %path.display(), line = line_no, "discarding torn final log line");
                break;
            };
            let raw = &bytes[offset..offset + newline];
            offset += newline + 1;
            let corrupt = |reason: String| IngestError::CorruptLog { line: line_no, reason };
            let line = std::str::from_utf8(raw).map_err(|e| corrupt(e.to_string()))?;

            if line.starts_with("{\"commit\"") {
                let commit: CommitLine = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
                let record = commit.commit;
                let expected_seq = store.watermark() + pending.len() as u64;
                if record.receipt.store_sequence != expected_seq {
                    return Err(corrupt(format!(
                        "commit claims sequence {} but log holds {expected_seq}",
                        record.receipt.store_sequence
                    )));
                }
                if record.receipt.accepted != pending.len() {
                    return Err(corrupt("commit accepted count disagrees with preceding lines".into()));
                }
                store.apply_commit(std::mem::take(&mut pending), record);
                report.committed_batches += 1;
                committed_len = offset as u64;
            } else {
                let stored = StoredStatement::from_line(line).map_err(corrupt)?;
                let expected = store.watermark() + pending.len() as u64 + 1;
                if stored.seq != expected {
                    return Err(corrupt(format!("sequence {} where {expected} was expected", stored.seq)));
                }
                if store.ids.contains_key(stored.statement.id())
                    || pending.iter().any(|p| p.statement.id() == stored.statement.id())
                {
                    return Err(corrupt(format!("duplicate statement id {}", stored.statement.id())));
                }
                pending.push(stored);
            }
        }
        if !pending.is_empty() {
            report.uncommitted_statements = pending.len();
            warn!(path = %path.display(), count = pending.len(), "discarding statements of an uncommitted batch");
        }
        Ok((store, report, committed_len))
    }

    /// Highest committed sequence number (0 for an empty store).
    pub fn watermark(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn statements(&self) -> &[StoredStatement] {
        &self.entries
    }

    pub fn contains_id(&self, statement_id: &str) -> bool {
        self.ids.contains_key(statement_id)
    }

    pub fn receipt(&self, batch_key: &str) -> Option<&IngestReceipt> {
        self.receipts.get(batch_key).map(|c| &c.receipt)
    }

    pub fn batch_count(&self) -> usize {
        self.commits.len()
    }

    /// Commit time of the last batch whose statements are all within `watermark`.
    pub fn commit_time_at(&self, watermark: u64) -> Option<Timestamp> {
        self.commits.iter().take_while(|c| c.last_seq <= watermark).last().map(|c| c.committed_at)
    }

    /// Commits a batch atomically: either every accepted statement and the
    /// receipt reach the log, or nothing changes.
    pub fn ingest(&mut self, batch: IngestBatch, now: Timestamp) -> Result<IngestReceipt, IngestError> {
        if batch.batch_key.is_empty() {
            return Err(IngestError::InvalidBatch("batch key must be non-empty".into()));
        }
        if let Some(previous) = self.receipts.get(&batch.batch_key) {
            if previous.fingerprint != batch.fingerprint {
                return Err(IngestError::IdempotencyConflict(batch.batch_key));
            }
            return Ok(previous.receipt.clone());
        }
        if batch.items.len() > self.max_batch {
            return Err(IngestError::BatchTooLarge { size: batch.items.len(), max: self.max_batch });
        }

        let mut accepted: Vec<StoredStatement> = Vec::new();
        let mut batch_ids: HashMap<String, ()> = HashMap::new();
        let mut deduplicated = 0;
        let mut rejected = Vec::new();
        let mut next_seq = self.watermark() + 1;
        for (index, item) in batch.items.into_iter().enumerate() {
            let draft = match item {
                BatchItem::Draft(d) => d,
                BatchItem::Invalid(reason) => {
                    rejected.push(Rejection { index, reason });
                    continue;
                }
            };
            match canonicalize_statement(draft) {
                Err(e) => rejected.push(Rejection { index, reason: e.to_string() }),
                Ok(statement) => {
                    if self.ids.contains_key(statement.id()) || batch_ids.contains_key(statement.id()) {
                        deduplicated += 1;
                    } else {
                        batch_ids.insert(statement.id().to_owned(), ());
                        accepted.push(StoredStatement { seq: next_seq, statement });
                        next_seq += 1;
                    }
                }
            }
        }

        let receipt = IngestReceipt {
            batch_key: batch.batch_key.clone(),
            accepted: accepted.len(),
            deduplicated,
            rejected,
            store_sequence: next_seq - 1,
        };
        let record = CommitRecord { fingerprint: batch.fingerprint, committed_at: now, receipt: receipt.clone() };

        if let Some(sink) = self.sink.as_mut() {
            let mut buf = String::new();
            for stored in &accepted {
                buf.push_str(&stored.to_line());
                buf.push('\n');
            }
            buf.push_str(&serde_json::to_string(&CommitLine { commit: record.clone() }).expect("commit serializes"));
            buf.push('\n');
            sink.append(buf.as_bytes()).map_err(IngestError::StorageFailure)?;
        }
        self.apply_commit(accepted, record);
        Ok(receipt)
    }

    fn apply_commit(&mut self, statements: Vec<StoredStatement>, record: CommitRecord) {
        for stored in statements {
            let pos = self.entries.len();
            let st = &stored.statement;
            self.ids.insert(st.id().to_owned(), stored.seq);
            self.by_predicate.entry(st.predicate().to_owned()).or_default().push(pos);
            if let Some(run) = st.run_id() {
                self.by_run.entry(run.to_owned()).or_default().push(pos);
            }
            self.by_component.entry(st.component_id().to_owned()).or_default().push(pos);
            let day = st.recorded_at().as_millis().div_euclid(DAY_MS);
            self.by_predicate_day.entry((st.predicate().to_owned(), day)).or_default().push(pos);
            self.entries.push(stored);
        }
        self.commits.push(CommitInfo { last_seq: record.receipt.store_sequence, committed_at: record.committed_at });
        self.receipts.insert(record.receipt.batch_key.clone(), record);
    }

    /// Index-assisted candidates for a pattern within `as_of`; always a
    /// superset of the matching statements, in sequence order.
    pub(crate) fn candidates(&self, pattern: &CompiledPattern, as_of: u64) -> Vec<&StoredStatement> {
        self.candidates_in(pattern, as_of, None)
    }

    fn candidates_in(
        &self,
        pattern: &CompiledPattern,
        as_of: u64,
        range: Option<(Timestamp, Timestamp)>,
    ) -> Vec<&StoredStatement> {
        let limit = usize::try_from(as_of).unwrap_or(usize::MAX).min(self.entries.len());
        let empty: &[usize] = &[];
        let mut lists: Vec<&[usize]> = Vec::new();
        if let Some(p) = pattern.fixed_predicate() {
            lists.push(self.by_predicate.get(p).map_or(empty, Vec::as_slice));
        }
        if let Some(r) = pattern.fixed_run() {
            lists.push(self.by_run.get(r).map_or(empty, Vec::as_slice));
        }
        if let Some(c) = pattern.fixed_component() {
            lists.push(self.by_component.get(c).map_or(empty, Vec::as_slice));
        }

        // Day buckets narrow predicate scans over a bounded time range.
        if let (Some(p), Some((from, to))) = (pattern.fixed_predicate(), range) {
            let first = from.as_millis().div_euclid(DAY_MS);
            let last = (to.as_millis() - 1).div_euclid(DAY_MS);
            if to > from && last - first < 366 {
                let mut positions: Vec<usize> = (first..=last)
                    .filter_map(|day| self.by_predicate_day.get(&(p.to_owned(), day)))
                    .flatten()
                    .copied()
                    .filter(|pos| *pos < limit)
                    .collect();
                positions.sort_unstable();
                return positions.into_iter().map(|pos| &self.entries[pos]).collect();
            }
        }

        match lists.into_iter().min_by_key(|l| l.len()) {
            Some(list) => {
                let end = list.partition_point(|pos| *pos < limit);
                list[..end].iter().map(|pos| &self.entries[*pos]).collect()
            }
            None => self.entries[..limit].iter().collect(),
        }
    }

    /// Statements matching `pattern` and the half-open `time_range`, in
    /// sequence order, as of the current watermark.
    pub fn scan(
        &self,
        pattern: &StatementPattern,
        time_range: Option<(Timestamp, Timestamp)>,
    ) -> Result<impl Iterator<Item = &StoredStatement>, QueryError> {
        self.scan_as_of(pattern, time_range, self.watermark())
    }

    pub fn scan_as_of(
        &self,
        pattern: &StatementPattern,
        time_range: Option<(Timestamp, Timestamp)>,
        as_of: u64,
    ) -> Result<impl Iterator<Item = &StoredStatement>, QueryError> {
        let compiled = compile_pattern(pattern)?;
        let mut scratch = Vec::new();
        let candidates = self.candidates_in(&compiled, as_of, time_range);
        Ok(candidates.into_iter().filter(move |s| {
            in_range(s.statement.recorded_at(), time_range) && compiled.bind(&s.statement, &mut scratch)
        }))
    }

    /// Scan that ignores every index; the reference for index consistency.
    pub fn scan_unindexed(
        &self,
        pattern: &StatementPattern,
        time_range: Option<(Timestamp, Timestamp)>,
    ) -> Result<Vec<&StoredStatement>, QueryError> {
        let compiled = compile_pattern(pattern)?;
        let mut scratch = Vec::new();
        Ok(self
            .entries
            .iter()
            .filter(|s| in_range(s.statement.recorded_at(), time_range) && compiled.bind(&s.statement, &mut scratch))
            .collect())
    }

    /// Verifies that every index is exactly consistent with the log.
    pub fn check_indices(&self) -> Result<(), String> {
        let mut expected = StatementStore::in_memory();
        for stored in &self.entries {
            if stored.seq != expected.watermark() + 1 {
                return Err(format!("non-contiguous sequence {}", stored.seq));
            }
            if expected.ids.contains_key(stored.statement.id()) {
                return Err(format!("duplicate id {}", stored.statement.id()));
            }
            let record = CommitRecord {
                fingerprint: String::new(),
                committed_at: Timestamp::UNIX_EPOCH,
                receipt: IngestReceipt {
                    batch_key: format!("check-{}", stored.seq),
                    accepted: 1,
                    deduplicated: 0,
                    rejected: Vec::new(),
                    store_sequence: stored.seq,
                },
            };
            expected.apply_commit(vec![stored.clone()], record);
        }
        let sorted = |m: &HashMap<String, Vec<usize>>| -> BTreeMap<String, Vec<usize>> {
            m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        if sorted(&expected.by_predicate) != sorted(&self.by_predicate) {
            return Err("predicate index diverges from log".into());
        }
        if sorted(&expected.by_run) != sorted(&self.by_run) {
            return Err("run index diverges from log".into());
        }
        if sorted(&expected.by_component) != sorted(&self.by_component) {
            return Err("component index diverges from log".into());
        }
        if expected.by_predicate_day != self.by_predicate_day {
            return Err("time-bucket index diverges from log".into());
        }
        if expected.ids != self.ids {
            return Err("id index diverges from log".into());
        }
        Ok(())
    }
}

fn in_range(t: Timestamp, range: Option<(Timestamp, Timestamp)>) -> bool {
    range.is_none_or(|(from, to)| from <= t && t < to)
}

/// Ingests a batch on behalf of a workflow, which must be collecting.
pub fn ingest(
    workflow: &AuditWorkflow,
    store: &mut StatementStore,
    batch: IngestBatch,
    now: Timestamp,
) -> Result<IngestReceipt, IngestError> {
    if workflow.state() != WorkflowState::Collecting {
        return Err(IngestError::WorkflowNotCollecting(workflow.state()));
    }
    store.ingest(batch, now)
}
