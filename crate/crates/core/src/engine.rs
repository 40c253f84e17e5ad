//! Audit scoping, setup and the workflow state machine.
//!
//! A workflow is event-sourced: every mutating operation validates its
//! input, emits one [`EventRecord`] and applies it. Replaying the records of
//! an audit from scratch goes through the same `apply` path, so a replayed
//! workflow is identical to the live one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::knowledge::{AuditQuestion, Catalog, QuestionTarget};
use crate::model::{validate_system_description, AuditGoal, AuditorIdentity, SystemDescription, Timestamp, Violation};
use crate::query::StatementPattern;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("operation {operation} is not allowed in state {state}")]
    IllegalState { state: WorkflowState, operation: String },
    #[error("unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("question selection is empty")]
    EmptySelection,
    #[error("component {0:?} is not part of the system description")]
    UnknownComponent(String),
    #[error("binding id {0:?} is already registered")]
    DuplicateBindingId(String),
    #[error("coverage ratio {ratio} is below 1.0 and no override was given")]
    CoverageIncomplete { ratio: f64 },
    #[error("catalog contains no questions")]
    EmptyCatalog,
    #[error("invalid system description: {}", join_violations(.0))]
    InvalidSystem(Vec<Violation>),
    #[error("catalog {found} does not match the workflow's catalog {expected}")]
    CatalogMismatch { expected: String, found: String },
    #[error("invalid binding: {0}")]
    InvalidBinding(String),
    #[error("invalid event log: {0}")]
    InvalidEventLog(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowState {
    Draft,
    Scoped,
    Setup,
    Collecting,
    Reporting,
    Closed,
}

impl WorkflowState {
    pub const ALL: [WorkflowState; 6] = [
        WorkflowState::Draft,
        WorkflowState::Scoped,
        WorkflowState::Setup,
        WorkflowState::Collecting,
        WorkflowState::Reporting,
        WorkflowState::Closed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkflowState::Draft => "draft",
            WorkflowState::Scoped => "scoped",
            WorkflowState::Setup => "setup",
            WorkflowState::Collecting => "collecting",
            WorkflowState::Reporting => "reporting",
            WorkflowState::Closed => "closed",
        }
    }
}

impl fmt::Display for WorkflowState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkflowState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkflowState::ALL.into_iter().find(|w| w.as_str() == s).ok_or_else(|| format!("unknown state {s:?}"))
    }
}

/// The six edges of the audit lifecycle, including the continuous
/// reporting→collecting loop.
pub fn is_legal_edge(from: WorkflowState, to: WorkflowState) -> bool {
    use WorkflowState::*;
    matches!(
        (from, to),
        (Draft, Scoped)
            | (Scoped, Setup)
            | (Setup, Collecting)
            | (Collecting, Reporting)
            | (Reporting, Closed)
            | (Reporting, Collecting)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub state: WorkflowState,
    pub timestamp: Timestamp,
    pub actor: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub coverage_override: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogRef {
    pub catalog_id: String,
    pub version: String,
}

impl CatalogRef {
    pub fn of(catalog: &Catalog) -> Self {
        CatalogRef { catalog_id: catalog.catalog_id.clone(), version: catalog.version.clone() }
    }
}

impl fmt::Display for CatalogRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.catalog_id, self.version)
    }
}

/// Output of scoping: the selected questions and the artefact patterns they need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditDataModel {
    pub question_ids: Vec<String>,
    pub required_patterns: Vec<StatementPattern>,
    /// Patterns per question, copied from the catalog at selection time.
    pub question_patterns: BTreeMap<String, Vec<StatementPattern>>,
    pub derived_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingFormat {
    NestedRecord,
    DelimitedTable,
    TripleFile,
    HttpPush,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectorBinding {
    pub binding_id: String,
    pub component_id: String,
    pub source_format: BindingFormat,
    pub mapping_ref: String,
    pub provides_patterns: Vec<StatementPattern>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionCoverage {
    pub covered: bool,
    pub missing_patterns: Vec<StatementPattern>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_question: BTreeMap<String, QuestionCoverage>,
    pub overall_ratio: f64,
}

impl CoverageReport {
    pub fn is_complete(&self) -> bool {
        self.per_question.values().all(|q| q.covered)
    }
}

/// Computes coverage of the given questions by the given bindings.
pub fn compute_coverage(
    question_patterns: &BTreeMap<String, Vec<StatementPattern>>,
    bindings: &[CollectorBinding],
) -> CoverageReport {
    let provided: Vec<&StatementPattern> = bindings.iter().flat_map(|b| &b.provides_patterns).collect();
    let per_question: BTreeMap<String, QuestionCoverage> = question_patterns
        .iter()
        .map(|(qid, patterns)| {
            let missing: Vec<StatementPattern> =
                patterns.iter().filter(|req| !provided.iter().any(|p| p.subsumes(req))).cloned().collect();
            (qid.clone(), QuestionCoverage { covered: missing.is_empty(), missing_patterns: missing })
        })
        .collect();
    let covered = per_question.values().filter(|q| q.covered).count();
    let overall_ratio = if per_question.is_empty() { 1.0 } else { covered as f64 / per_question.len() as f64 };
    CoverageReport { per_question, overall_ratio }
}

// ---------------------------------------------------------------------------
// Recommendations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringWeights {
    pub goal: f64,
    pub component: f64,
    pub phase: f64,
    pub threshold: f64,
}

impl Default for ScoringWeights {
    fn default() -> Self {
        ScoringWeights { goal: 0.5, component: 0.3, phase: 0.2, threshold: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub question: AuditQuestion,
    pub score: f64,
    pub reasons: Vec<String>,
    pub related_risks: Vec<String>,
}

/// Match components `(g, c, p)` of a question against a system and goal.
pub fn match_components(system: &SystemDescription, goal: AuditGoal, q: &AuditQuestion) -> (f64, f64, f64) {
    let g = if q.goals.contains(&goal) { 1.0 } else { 0.0 };
    let c = match q.target {
        QuestionTarget::WholeSystem => 1.0,
        QuestionTarget::Kind(kind) => {
            if system.has_kind(kind) {
                1.0
            } else {
                0.0
            }
        }
    };
    let p = if q.phases.is_empty() {
        0.0
    } else {
        q.phases.intersection(&system.phases_in_scope).count() as f64 / q.phases.len() as f64
    };
    (g, c, p)
}

pub fn recommend_questions(
    system: &SystemDescription,
    goal: AuditGoal,
    catalog: &Catalog,
    weights: &ScoringWeights,
) -> Result<Vec<Recommendation>, EngineError> {
    let violations = validate_system_description(system);
    if !violations.is_empty() {
        return Err(EngineError::InvalidSystem(violations));
    }
    if catalog.questions.is_empty() {
        return Err(EngineError::EmptyCatalog);
    }
    let mut out = Vec::new();
    for q in &catalog.questions {
        let (g, c, p) = match_components(system, goal, q);
        let score = weights.goal * g + weights.component * c + weights.phase * p;
        if score < weights.threshold {
            continue;
        }
        let mut reasons = Vec::new();
        if g > 0.0 {
            reasons.push(format!("addresses goal {goal}"));
        }
        if c > 0.0 {
            reasons.push(match q.target {
                QuestionTarget::WholeSystem => "targets the whole system".to_owned(),
                QuestionTarget::Kind(k) => format!("system has a {} component", k.as_str()),
            });
        }
        if p > 0.0 {
            let shared = q.phases.intersection(&system.phases_in_scope).count();
            reasons.push(format!("{shared} of {} lifecycle phases in scope", q.phases.len()));
        }
        out.push(Recommendation {
            question: q.clone(),
            score,
            reasons,
            related_risks: catalog.risks_for(&q.question_id),
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.question.question_id.cmp(&b.question.question_id)));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum WorkflowEvent {
    Created {
        system: SystemDescription,
        goal: AuditGoal,
        catalog_ref: CatalogRef,
        created_by: AuditorIdentity,
    },
    QuestionsSelected(AuditDataModel),
    BindingRegistered(CollectorBinding),
    StateChanged {
        target: WorkflowState,
        #[serde(default)]
        coverage_override: bool,
    },
}

/// One line of a workflow event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub audit_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub event: WorkflowEvent,
    pub timestamp: Timestamp,
    pub actor: String,
}

// ---------------------------------------------------------------------------
// Workflow
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditWorkflow {
    audit_id: String,
    system: SystemDescription,
    goal: AuditGoal,
    catalog_ref: CatalogRef,
    state: WorkflowState,
    selected: Option<AuditDataModel>,
    bindings: Vec<CollectorBinding>,
    created_by: AuditorIdentity,
    created_at: Timestamp,
    history: Vec<HistoryEntry>,
    #[serde(skip)]
    events: Vec<EventRecord>,
}

impl AuditWorkflow {
    /// Starts a draft audit of a validated system description.
    pub fn create(
        audit_id: impl Into<String>,
        system: SystemDescription,
        goal: AuditGoal,
        catalog: &Catalog,
        created_by: AuditorIdentity,
        at: Timestamp,
    ) -> Result<Self, EngineError> {
        let audit_id = audit_id.into();
        if audit_id.is_empty() {
            return Err(EngineError::InvalidEventLog("audit id must be non-empty".into()));
        }
        let violations = validate_system_description(&system);
        if !violations.is_empty() {
            return Err(EngineError::InvalidSystem(violations));
        }
        let actor = created_by.id.clone();
        let record = EventRecord {
            audit_id,
            seq: 1,
            event: WorkflowEvent::Created { system, goal, catalog_ref: CatalogRef::of(catalog), created_by },
            timestamp: at,
            actor,
        };
        Self::from_created(record)
    }

    fn from_created(record: EventRecord) -> Result<Self, EngineError> {
        let WorkflowEvent::Created { system, goal, catalog_ref, created_by } = &record.event else {
            return Err(EngineError::InvalidEventLog("first event must be created".into()));
        };
        if record.seq != 1 {
            return Err(EngineError::InvalidEventLog("first event must have seq 1".into()));
        }
        let violations = validate_system_description(system);
        if !violations.is_empty() {
            return Err(EngineError::InvalidSystem(violations));
        }
        Ok(AuditWorkflow {
            audit_id: record.audit_id.clone(),
            system: system.clone(),
            goal: *goal,
            catalog_ref: catalog_ref.clone(),
            state: WorkflowState::Draft,
            selected: None,
            bindings: Vec::new(),
            created_by: created_by.clone(),
            created_at: record.timestamp,
            history: vec![HistoryEntry {
                state: WorkflowState::Draft,
                timestamp: record.timestamp,
                actor: record.actor.clone(),
                coverage_override: false,
            }],
            events: vec![record],
        })
    }

    /// Rebuilds a workflow from its event log.
    pub fn replay(events: &[EventRecord]) -> Result<Self, EngineError> {
        let (first, rest) =
            events.split_first().ok_or_else(|| EngineError::InvalidEventLog("event log is empty".into()))?;
        let mut wf = Self::from_created(first.clone())?;
        for record in rest {
            if record.audit_id != wf.audit_id {
                return Err(EngineError::InvalidEventLog(format!("event for foreign audit {}", record.audit_id)));
            }
            wf.apply(record.clone())?;
        }
        Ok(wf)
    }

    pub fn audit_id(&self) -> &str {
        &self.audit_id
    }

    pub fn system(&self) -> &SystemDescription {
        &self.system
    }

    pub fn goal(&self) -> AuditGoal {
        self.goal
    }

    pub fn catalog_ref(&self) -> &CatalogRef {
        &self.catalog_ref
    }

    pub fn state(&self) -> WorkflowState {
        self.state
    }

    pub fn selected(&self) -> Option<&AuditDataModel> {
        self.selected.as_ref()
    }

    pub fn bindings(&self) -> &[CollectorBinding] {
        &self.bindings
    }

    pub fn created_by(&self) -> &AuditorIdentity {
        &self.created_by
    }

    pub fn created_at(&self) -> Timestamp {
        self.created_at
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn is_selected(&self, question_id: &str) -> bool {
        self.selected.as_ref().is_some_and(|m| m.question_ids.iter().any(|q| q == question_id))
    }

    fn illegal(&self, operation: impl Into<String>) -> EngineError {
        EngineError::IllegalState { state: self.state, operation: operation.into() }
    }

    fn emit(&mut self, event: WorkflowEvent, actor: &str, at: Timestamp) -> Result<&EventRecord, EngineError> {
        let record = EventRecord {
            audit_id: self.audit_id.clone(),
            seq: self.events.len() as u64 + 1,
            event,
            timestamp: at,
            actor: actor.to_owned(),
        };
        self.apply(record)?;
        Ok(self.events.last().expect("event just applied"))
    }

    /// Validates an event against the current state and applies it.
    fn apply(&mut self, record: EventRecord) -> Result<(), EngineError> {
        let expected = self.events.len() as u64 + 1;
        if record.seq != expected {
            return Err(EngineError::InvalidEventLog(format!("seq {} where {expected} was expected", record.seq)));
        }
        let mut history = None;
        match &record.event {
            WorkflowEvent::Created { .. } => return Err(EngineError::InvalidEventLog("duplicate created event".into())),
            WorkflowEvent::QuestionsSelected(model) => {
                if self.state != WorkflowState::Draft {
                    return Err(self.illegal("select_questions"));
                }
                if model.question_ids.is_empty() {
                    return Err(EngineError::EmptySelection);
                }
                self.selected = Some(model.clone());
                self.state = WorkflowState::Scoped;
                history = Some(false);
            }
            WorkflowEvent::BindingRegistered(binding) => {
                if !matches!(self.state, WorkflowState::Scoped | WorkflowState::Setup) {
                    return Err(self.illegal("register_binding"));
                }
                self.check_binding(binding)?;
                self.bindings.push(binding.clone());
                if self.state == WorkflowState::Scoped {
                    self.state = WorkflowState::Setup;
                    history = Some(false);
                }
            }
            WorkflowEvent::StateChanged { target, coverage_override } => {
                let target = *target;
                if !is_legal_edge(self.state, target) || target == WorkflowState::Scoped {
                    return Err(self.illegal(format!("transition to {target}")));
                }
                if self.state == WorkflowState::Setup && target == WorkflowState::Collecting && !coverage_override {
                    let report = self.coverage_report();
                    if !report.is_complete() {
                        return Err(EngineError::CoverageIncomplete { ratio: report.overall_ratio });
                    }
                }
                self.state = target;
                history = Some(*coverage_override);
            }
        }
        if let Some(coverage_override) = history {
            self.history.push(HistoryEntry {
                state: self.state,
                timestamp: record.timestamp,
                actor: record.actor.clone(),
                coverage_override,
            });
        }
        self.events.push(record);
        Ok(())
    }

    fn check_binding(&self, binding: &CollectorBinding) -> Result<(), EngineError> {
        if binding.binding_id.is_empty() {
            return Err(EngineError::InvalidBinding("binding_id must be non-empty".into()));
        }
        if self.system.component(&binding.component_id).is_none() {
            return Err(EngineError::UnknownComponent(binding.component_id.clone()));
        }
        if binding.provides_patterns.is_empty() {
            return Err(EngineError::InvalidBinding("provides_patterns must be non-empty".into()));
        }
        for p in &binding.provides_patterns {
            p.validate().map_err(|e| EngineError::InvalidBinding(e.to_string()))?;
        }
        if self.bindings.iter().any(|b| b.binding_id == binding.binding_id) {
            return Err(EngineError::DuplicateBindingId(binding.binding_id.clone()));
        }
        Ok(())
    }

    /// Selects questions into the audit data model; draft → scoped.
    pub fn select_questions(
        &mut self,
        catalog: &Catalog,
        question_ids: &[String],
        actor: &str,
        at: Timestamp,
    ) -> Result<&AuditDataModel, EngineError> {
        if self.state != WorkflowState::Draft {
            return Err(self.illegal("select_questions"));
        }
        if CatalogRef::of(catalog) != self.catalog_ref {
            return Err(EngineError::CatalogMismatch {
                expected: self.catalog_ref.to_string(),
                found: CatalogRef::of(catalog).to_string(),
            });
        }
        if question_ids.is_empty() {
            return Err(EngineError::EmptySelection);
        }
        let mut ids: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut required: Vec<StatementPattern> = Vec::new();
        let mut question_patterns = BTreeMap::new();
        for qid in question_ids {
            let q = catalog.question(qid).ok_or_else(|| EngineError::UnknownQuestion(qid.clone()))?;
            if !seen.insert(qid.clone()) {
                continue;
            }
            ids.push(qid.clone());
            for p in &q.required_patterns {
                if !required.contains(p) {
                    required.push(p.clone());
                }
            }
            question_patterns.insert(qid.clone(), q.required_patterns.clone());
        }
        let model = AuditDataModel { question_ids: ids, required_patterns: required, question_patterns, derived_at: at };
        self.emit(WorkflowEvent::QuestionsSelected(model), actor, at)?;
        Ok(self.selected.as_ref().expect("selection applied"))
    }

    /// Adds a collector binding; scoped → setup on the first one.
    pub fn register_binding(&mut self, binding: CollectorBinding, actor: &str, at: Timestamp) -> Result<(), EngineError> {
        if !matches!(self.state, WorkflowState::Scoped | WorkflowState::Setup) {
            return Err(self.illegal("register_binding"));
        }
        self.check_binding(&binding)?;
        self.emit(WorkflowEvent::BindingRegistered(binding), actor, at).map(|_| ())
    }

    fn coverage_report(&self) -> CoverageReport {
        let empty = BTreeMap::new();
        let patterns = self.selected.as_ref().map_or(&empty, |m| &m.question_patterns);
        compute_coverage(patterns, &self.bindings)
    }

    pub fn check_coverage(&self) -> Result<CoverageReport, EngineError> {
        if self.state < WorkflowState::Scoped {
            return Err(self.illegal("check_coverage"));
        }
        Ok(self.coverage_report())
    }

    /// Moves along a lifecycle edge. `coverage_override` lets
    /// setup → collecting proceed with incomplete coverage and is recorded.
    pub fn transition(
        &mut self,
        target: WorkflowState,
        coverage_override: bool,
        actor: &str,
        at: Timestamp,
    ) -> Result<(), EngineError> {
        self.emit(WorkflowEvent::StateChanged { target, coverage_override }, actor, at).map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Event log files
// ---------------------------------------------------------------------------

/// Append-only event log of one audit.
pub struct EventLog {
    file: File,
    sync: bool,
}

impl EventLog {
    /// Opens the log for appending, cutting off a torn final line.
    pub fn open(path: impl AsRef<Path>, sync: bool) -> io::Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
        let bytes = std::fs::read(path)?;
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete != bytes.len() {
            warn!(path = %path.display(), "discarding torn final event line");
            file.set_len(complete as u64)?;
        }
        Ok(EventLog { file, sync })
    }

    pub fn append(&mut self, record: &EventRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// Reads an event log; an unterminated final line is ignored.
pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, EngineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EngineError::InvalidEventLog(e.to_string()))?;
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    if complete != text.len() {
        warn!(path = %path.display(), "ignoring torn final event line");
    }
    text[..complete]
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| EngineError::InvalidEventLog(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
