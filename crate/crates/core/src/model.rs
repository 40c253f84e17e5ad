//! Shared domain vocabulary: statements, system descriptions, auditors,
//! goals and run contexts.
//!
//! Every piece of audit evidence is reduced to an [`ArtefactStatement`], a
//! subject/predicate/object triple carrying its provenance (component, run,
//! time). Statement ids are content hashes, so two collectors that observe
//! the same fact produce the same id and the store can deduplicate them.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Field separator used in the canonical byte serialization of a statement.
const UNIT_SEPARATOR: u8 = 0x1F;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid predicate {0:?}: expected namespace:local with exactly one colon")]
    InvalidPredicate(String),
    #[error("lexical form {lexical:?} is not a valid {object_type}")]
    InvalidObjectType { object_type: ObjectType, lexical: String },
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),
    #[error("unknown object type tag {0:?}")]
    UnknownObjectType(String),
    #[error("statement id {found} does not match canonical id {expected}")]
    IdMismatch { expected: String, found: String },
    #[error("artefact kind {declared} contradicts run_id presence")]
    KindMismatch { declared: ArtefactKind },
    #[error("unknown audit goal {0:?}")]
    UnknownGoal(String),
    #[error("unknown lifecycle phase {0:?}")]
    UnknownPhase(String),
    #[error("run context {run_id}: {reason}")]
    InvalidRunContext { run_id: String, reason: &'static str },
}

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

/// UTC instant with millisecond precision, stored as epoch milliseconds.
///
/// Rendered as ISO-8601 (`2024-01-01T00:00:00.000Z`) at every interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const UNIX_EPOCH: Timestamp = Timestamp(0);

    /// Returns `None` when the instant is outside the representable calendar range.
    pub fn from_millis(millis: i64) -> Option<Self> {
        DateTime::<Utc>::from_timestamp_millis(millis).map(|_| Timestamp(millis))
    }

    pub fn as_millis(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let parsed = DateTime::parse_from_rfc3339(text)
            .map_err(|_| ModelError::InvalidTimestamp(text.to_owned()))?;
        if parsed.timestamp_subsec_nanos() % 1_000_000 != 0 {
            return Err(ModelError::InvalidTimestamp(text.to_owned()));
        }
        Ok(Timestamp(parsed.timestamp_millis()))
    }

    pub fn to_iso(self) -> String {
        DateTime::<Utc>::from_timestamp_millis(self.0)
            .expect("timestamp constructed within calendar range")
            .to_rfc3339_opts(SecondsFormat::Millis, true)
    }

    /// Adds a signed offset, returning `None` if the result leaves the calendar range.
    pub fn checked_add_millis(self, delta: i64) -> Option<Self> {
        self.0.checked_add(delta).and_then(Self::from_millis)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl FromStr for Timestamp {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Auditors, goals, phases
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relationship {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    First,
    Second,
    Third,
}

/// A stakeholder authorised to examine an AI system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditorIdentity {
    pub id: String,
    pub display_name: String,
    pub relationship: Relationship,
    pub party: Party,
}

impl AuditorIdentity {
    pub fn is_external(&self) -> bool {
        self.relationship == Relationship::External
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditGoal {
    Transparency,
    Accountability,
    Fairness,
    Robustness,
    Compliance,
    Privacy,
}

impl AuditGoal {
    pub const ALL: [AuditGoal; 6] = [
        AuditGoal::Transparency,
        AuditGoal::Accountability,
        AuditGoal::Fairness,
        AuditGoal::Robustness,
        AuditGoal::Compliance,
        AuditGoal::Privacy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditGoal::Transparency => "transparency",
            AuditGoal::Accountability => "accountability",
            AuditGoal::Fairness => "fairness",
            AuditGoal::Robustness => "robustness",
            AuditGoal::Compliance => "compliance",
            AuditGoal::Privacy => "privacy",
        }
    }
}

impl fmt::Display for AuditGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuditGoal {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AuditGoal::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| ModelError::UnknownGoal(s.to_owned()))
    }
}

/// AI lifecycle phase. Variant order is the lifecycle order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecyclePhase {
    Design,
    Development,
    Training,
    Exploitation,
    Decommissioning,
}

impl LifecyclePhase {
    pub const ALL: [LifecyclePhase; 5] = [
        LifecyclePhase::Design,
        LifecyclePhase::Development,
        LifecyclePhase::Training,
        LifecyclePhase::Exploitation,
        LifecyclePhase::Decommissioning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LifecyclePhase::Design => "design",
            LifecyclePhase::Development => "development",
            LifecyclePhase::Training => "training",
            LifecyclePhase::Exploitation => "exploitation",
            LifecyclePhase::Decommissioning => "decommissioning",
        }
    }
}

impl FromStr for LifecyclePhase {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LifecyclePhase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ModelError::UnknownPhase(s.to_owned()))
    }
}

// ---------------------------------------------------------------------------
// System description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Ui,
    MlModel,
    NonMlService,
    Ontology,
    ConsentCheck,
    DataStore,
    Transform,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 7] = [
        ComponentKind::Ui,
        ComponentKind::MlModel,
        ComponentKind::NonMlService,
        ComponentKind::Ontology,
        ComponentKind::ConsentCheck,
        ComponentKind::DataStore,
        ComponentKind::Transform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Ui => "ui",
            ComponentKind::MlModel => "ml_model",
            ComponentKind::NonMlService => "non_ml_service",
            ComponentKind::Ontology => "ontology",
            ComponentKind::ConsentCheck => "consent_check",
            ComponentKind::DataStore => "data_store",
            ComponentKind::Transform => "transform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub id: String,
    pub name: String,
    pub kind: ComponentKind,
    pub phase_coverage: BTreeSet<LifecyclePhase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFlow {
    pub from: String,
    pub to: String,
    pub payload_label: String,
}

/// Declared model of the audited AI system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDescription {
    pub system_id: String,
    pub components: Vec<Component>,
    pub data_flows: Vec<DataFlow>,
    pub phases_in_scope: BTreeSet<LifecyclePhase>,
}

impl SystemDescription {
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn component(&self, id: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn has_kind(&self, kind: ComponentKind) -> bool {
        self.components.iter().any(|c| c.kind == kind)
    }
}

/// One broken invariant of a [`SystemDescription`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: &str, message: impl Into<String>) -> Self {
        Self { field: field.into(), rule: rule.to_owned(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule, self.message)
    }
}

/// Checks every structural invariant of a system description.
///
/// Returns an empty list iff the description is valid.
pub fn validate_system_description(desc: &SystemDescription) -> Vec<Violation> {
    let mut violations = Vec::new();

    if desc.system_id.is_empty() {
        violations.push(Violation::new("system_id", "empty id", "system_id must be non-empty"));
    }
    if desc.components.is_empty() {
        violations.push(Violation::new("components", "no components", "a system needs at least one component"));
    }

    let mut seen = HashSet::new();
    for (i, component) in desc.components.iter().enumerate() {
        if component.id.is_empty() {
            violations.push(Violation::new(format!("components[{i}].id"), "empty id", "component id must be non-empty"));
        } else if !seen.insert(component.id.as_str()) {
            violations.push(Violation::new(
                format!("components[{i}].id"),
                "duplicate component id",
                format!("component id {:?} appears more than once", component.id),
            ));
        }
        if component.phase_coverage.is_empty() {
            violations.push(Violation::new(
                format!("components[{i}].phase_coverage"),
                "empty phase coverage",
                format!("component {:?} covers no lifecycle phase", component.id),
            ));
        }
    }

    for (i, flow) in desc.data_flows.iter().enumerate() {
        for (end, id) in [("from", &flow.from), ("to", &flow.to)] {
            if !seen.contains(id.as_str()) {
                violations.push(Violation::new(
                    format!("data_flows[{i}].{end}"),
                    "dangling flow endpoint",
                    format!("component {id:?} is not declared"),
                ));
            }
        }
        if flow.from == flow.to {
            violations.push(Violation::new(
                format!("data_flows[{i}]"),
                "self-loop",
                format!("flow from {:?} to itself", flow.from),
            ));
        }
    }

    let covered: BTreeSet<LifecyclePhase> =
        desc.components.iter().flat_map(|c| c.phase_coverage.iter().copied()).collect();
    for phase in desc.phases_in_scope.difference(&covered) {
        violations.push(Violation::new(
            "phases_in_scope",
            "phase not covered",
            format!("phase {} is in scope but no component covers it", phase.as_str()),
        ));
    }

    violations
}

// ---------------------------------------------------------------------------
// Object values
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectType {
    String,
    Integer,
    Decimal,
    Boolean,
    Timestamp,
    Entity,
}

impl ObjectType {
    pub const ALL: [ObjectType; 6] = [
        ObjectType::String,
        ObjectType::Integer,
        ObjectType::Decimal,
        ObjectType::Boolean,
        ObjectType::Timestamp,
        ObjectType::Entity,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ObjectType::String => "string",
            ObjectType::Integer => "integer",
            ObjectType::Decimal => "decimal",
            ObjectType::Boolean => "boolean",
            ObjectType::Timestamp => "timestamp",
            ObjectType::Entity => "entity",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, ObjectType::Integer | ObjectType::Decimal)
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ObjectType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectType::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| ModelError::UnknownObjectType(s.to_owned()))
    }
}

/// Closed tagged union of statement object values.
///
/// Equality, ordering and hashing are total: decimals compare by
/// `f64::total_cmp`, and values of different types order by type tag.
#[derive(Debug, Clone)]
pub enum ObjectValue {
    String(String),
    Integer(i64),
    Decimal(f64),
    Boolean(bool),
    Timestamp(Timestamp),
    Entity(String),
}

impl ObjectValue {
    pub fn object_type(&self) -> ObjectType {
        match self {
            ObjectValue::String(_) => ObjectType::String,
            ObjectValue::Integer(_) => ObjectType::Integer,
            ObjectValue::Decimal(_) => ObjectType::Decimal,
            ObjectValue::Boolean(_) => ObjectType::Boolean,
            ObjectValue::Timestamp(_) => ObjectType::Timestamp,
            ObjectValue::Entity(_) => ObjectType::Entity,
        }
    }

    /// Canonical lexical form; `parse(t, v.lexical())` returns `v` again.
    pub fn lexical(&self) -> String {
        match self {
            ObjectValue::String(s) | ObjectValue::Entity(s) => s.clone(),
            ObjectValue::Integer(i) => i.to_string(),
            ObjectValue::Decimal(d) => d.to_string(),
            ObjectValue::Boolean(b) => b.to_string(),
            ObjectValue::Timestamp(t) => t.to_iso(),
        }
    }

    pub fn parse(object_type: ObjectType, lexical: &str) -> Result<Self, ModelError> {
        let invalid = || ModelError::InvalidObjectType { object_type, lexical: lexical.to_owned() };
        match object_type {
            ObjectType::String => Ok(ObjectValue::String(lexical.to_owned())),
            ObjectType::Entity => {
                if lexical.is_empty() {
                    Err(invalid())
                } else {
                    Ok(ObjectValue::Entity(lexical.to_owned()))
                }
            }
            ObjectType::Integer => lexical.parse().map(ObjectValue::Integer).map_err(|_| invalid()),
            ObjectType::Decimal => {
                let looks_numeric = lexical
                    .bytes()
                    .all(|b| b.is_ascii_digit() || matches!(b, b'-' | b'+' | b'.' | b'e' | b'E'))
                    && lexical.bytes().any(|b| b.is_ascii_digit());
                match lexical.parse::<f64>() {
                    Ok(d) if looks_numeric && d.is_finite() => Ok(ObjectValue::Decimal(d)),
                    _ => Err(invalid()),
                }
            }
            ObjectType::Boolean => match lexical {
                "true" => Ok(ObjectValue::Boolean(true)),
                "false" => Ok(ObjectValue::Boolean(false)),
                _ => Err(invalid()),
            },
            ObjectType::Timestamp => Timestamp::parse(lexical).map(ObjectValue::Timestamp).map_err(|_| invalid()),
        }
    }

    /// Numeric view used by comparisons and aggregates.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ObjectValue::Integer(i) => Some(*i as f64),
            ObjectValue::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ObjectValue::String(s) | ObjectValue::Entity(s) => Some(s),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        self.object_type() as u8
    }
}

impl PartialEq for ObjectValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ObjectValue {}

impl PartialOrd for ObjectValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ObjectValue {
    fn cmp(&self, other: &Self) -> Ordering {
        use ObjectValue::*;
        match (self, other) {
            (String(a), String(b)) | (Entity(a), Entity(b)) => a.cmp(b),
            (Integer(a), Integer(b)) => a.cmp(b),
            (Decimal(a), Decimal(b)) => a.total_cmp(b),
            (Boolean(a), Boolean(b)) => a.cmp(b),
            (Timestamp(a), Timestamp(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for ObjectValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            ObjectValue::String(s) | ObjectValue::Entity(s) => s.hash(state),
            ObjectValue::Integer(i) => i.hash(state),
            ObjectValue::Decimal(d) => d.to_bits().hash(state),
            ObjectValue::Boolean(b) => b.hash(state),
            ObjectValue::Timestamp(t) => t.hash(state),
        }
    }
}

impl fmt::Display for ObjectValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.object_type(), self.lexical())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    #[serde(rename = "type")]
    object_type: ObjectType,
    value: String,
}

impl Serialize for ObjectValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RawObject { object_type: self.object_type(), value: self.lexical() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ObjectValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawObject::deserialize(deserializer)?;
        ObjectValue::parse(raw.object_type, &raw.value).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Statements
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactKind {
    Static,
    Dynamic,
}

impl fmt::Display for ArtefactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArtefactKind::Static => "static",
            ArtefactKind::Dynamic => "dynamic",
        })
    }
}

/// Runtime traces carry a run id; documentation does not.
pub fn classify_artefact_kind(run_id: Option<&str>) -> ArtefactKind {
    match run_id {
        Some(_) => ArtefactKind::Dynamic,
        None => ArtefactKind::Static,
    }
}

/// Checks the `namespace:local` predicate shape.
pub fn validate_predicate(predicate: &str) -> Result<(), ModelError> {
    let mut parts = predicate.split(':');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(ns), Some(local), None) if !ns.is_empty() && !local.is_empty() => Ok(()),
        _ => Err(ModelError::InvalidPredicate(predicate.to_owned())),
    }
}

fn empty_as_none<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<String>, D::Error> {
    let value = Option::<String>::deserialize(deserializer)?;
    Ok(value.filter(|s| !s.is_empty()))
}

/// A statement before its content id has been computed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatementDraft {
    pub subject: String,
    pub predicate: String,
    pub object: ObjectValue,
    #[serde(default, deserialize_with = "empty_as_none", skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub component_id: String,
    pub recorded_at: Timestamp,
}

impl StatementDraft {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.subject.is_empty() {
            return Err(ModelError::MissingField("subject"));
        }
        if self.component_id.is_empty() {
            return Err(ModelError::MissingField("component_id"));
        }
        validate_predicate(&self.predicate)?;
        if let ObjectValue::Entity(e) = &self.object {
            if e.is_empty() {
                return Err(ModelError::InvalidObjectType {
                    object_type: ObjectType::Entity,
                    lexical: String::new(),
                });
            }
        }
        if let ObjectValue::Decimal(d) = &self.object {
            if !d.is_finite() {
                return Err(ModelError::InvalidObjectType {
                    object_type: ObjectType::Decimal,
                    lexical: d.to_string(),
                });
            }
        }
        Ok(())
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let object_type = self.object.object_type();
        let lexical = self.object.lexical();
        let millis = self.recorded_at.as_millis().to_string();
        let fields: [&[u8]; 7] = [
            self.subject.as_bytes(),
            self.predicate.as_bytes(),
            object_type.tag().as_bytes(),
            lexical.as_bytes(),
            self.run_id.as_deref().unwrap_or("").as_bytes(),
            self.component_id.as_bytes(),
            millis.as_bytes(),
        ];
        let mut out = Vec::with_capacity(fields.iter().map(|f| f.len() + 1).sum());
        for (i, field) in fields.iter().enumerate() {
            if i > 0 {
                out.push(UNIT_SEPARATOR);
            }
            out.extend_from_slice(field);
        }
        out
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_id(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

/// Canonical, content-addressed unit of auditable evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtefactStatement {
    statement_id: String,
    draft: StatementDraft,
    artefact_kind: ArtefactKind,
}

/// Validates a draft and assigns its content id.
pub fn canonicalize_statement(mut draft: StatementDraft) -> Result<ArtefactStatement, ModelError> {
    if draft.run_id.as_deref() == Some("") {
        draft.run_id = None;
    }
    draft.validate()?;
    let statement_id = draft.content_id();
    let artefact_kind = classify_artefact_kind(draft.run_id.as_deref());
    Ok(ArtefactStatement { statement_id, draft, artefact_kind })
}

impl ArtefactStatement {
    pub fn id(&self) -> &str {
        &self.statement_id
    }
    pub fn subject(&self) -> &str {
        &self.draft.subject
    }
    pub fn predicate(&self) -> &str {
        &self.draft.predicate
    }
    pub fn object(&self) -> &ObjectValue {
        &self.draft.object
    }
    pub fn run_id(&self) -> Option<&str> {
        self.draft.run_id.as_deref()
    }
    pub fn component_id(&self) -> &str {
        &self.draft.component_id
    }
    pub fn recorded_at(&self) -> Timestamp {
        self.draft.recorded_at
    }
    pub fn kind(&self) -> ArtefactKind {
        self.artefact_kind
    }
    pub fn draft(&self) -> &StatementDraft {
        &self.draft
    }
}

/// External field layout of a statement (without the store sequence).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct StatementFields {
    pub id: String,
    pub subject: String,
    pub predicate: String,
    pub object: ObjectValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub component_id: String,
    pub recorded_at: Timestamp,
    pub kind: ArtefactKind,
}

impl From<&ArtefactStatement> for StatementFields {
    fn from(s: &ArtefactStatement) -> Self {
        StatementFields {
            id: s.statement_id.clone(),
            subject: s.draft.subject.clone(),
            predicate: s.draft.predicate.clone(),
            object: s.draft.object.clone(),
            run_id: s.draft.run_id.clone(),
            component_id: s.draft.component_id.clone(),
            recorded_at: s.draft.recorded_at,
            kind: s.artefact_kind,
        }
    }
}

impl TryFrom<StatementFields> for ArtefactStatement {
    type Error = ModelError;

    fn try_from(f: StatementFields) -> Result<Self, Self::Error> {
        let statement = canonicalize_statement(StatementDraft {
            subject: f.subject,
            predicate: f.predicate,
            object: f.object,
            run_id: f.run_id,
            component_id: f.component_id,
            recorded_at: f.recorded_at,
        })?;
        if statement.statement_id != f.id {
            return Err(ModelError::IdMismatch { expected: statement.statement_id, found: f.id });
        }
        if statement.artefact_kind != f.kind {
            return Err(ModelError::KindMismatch { declared: f.kind });
        }
        Ok(statement)
    }
}

impl Serialize for ArtefactStatement {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StatementFields::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ArtefactStatement {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let fields = StatementFields::deserialize(deserializer)?;
        ArtefactStatement::try_from(fields).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
    Unknown,
}

/// One execution of the audited system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunContext {
    pub run_id: String,
    pub system_id: String,
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
    pub status: RunStatus,
}

impl RunContext {
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason| ModelError::InvalidRunContext { run_id: self.run_id.clone(), reason };
        if self.run_id.is_empty() {
            return Err(ModelError::MissingField("run_id"));
        }
        match self.ended_at {
            None if !matches!(self.status, RunStatus::Running | RunStatus::Unknown) => {
                Err(invalid("a run without end time must be running or unknown"))
            }
            Some(end) if end < self.started_at => Err(invalid("ended_at precedes started_at")),
            _ => Ok(()),
        }
    }
}
