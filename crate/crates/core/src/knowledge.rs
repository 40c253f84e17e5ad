//! Knowledge view: versioned catalogs of audit questions, risks,
//! documentation standards, tools and query templates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{validate_predicate, ArtefactKind, AuditGoal, ComponentKind, LifecyclePhase};
use crate::query::{AnswerType, QueryTemplate, StatementPattern};

const DEFAULT_CATALOG: &str = include_str!("../catalog/default.json");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KnowledgeError {
    #[error("catalog parse error: {0}")]
    ParseError(String),
    #[error("dangling reference {0:?}")]
    DanglingReference(String),
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("invalid catalog entry {id:?}: {reason}")]
    InvalidEntry { id: String, reason: String },
}

/// What a question is about: the whole system or one kind of component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuestionTarget {
    WholeSystem,
    Kind(ComponentKind),
}

impl QuestionTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionTarget::WholeSystem => "whole_system",
            QuestionTarget::Kind(k) => k.as_str(),
        }
    }
}

impl fmt::Display for QuestionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "whole_system" {
            return Ok(QuestionTarget::WholeSystem);
        }
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .map(QuestionTarget::Kind)
            .ok_or_else(|| format!("unknown question target {s:?}"))
    }
}

impl Serialize for QuestionTarget {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for QuestionTarget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditQuestion {
    pub question_id: String,
    pub text: String,
    pub goals: BTreeSet<AuditGoal>,
    pub target: QuestionTarget,
    pub phases: BTreeSet<LifecyclePhase>,
    pub required_patterns: Vec<StatementPattern>,
    pub template_id: String,
    pub answer_type: AnswerType,
    /// Predicates used by this question that no documentation standard
    /// declares; listing them here silences the lint.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adhoc_predicates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskEntry {
    pub risk_id: String,
    pub description: String,
    pub goals: BTreeSet<AuditGoal>,
    pub mitigating_question_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentationStandardEntry {
    pub standard_id: String,
    pub name: String,
    pub artefact_kind: ArtefactKind,
    pub field_predicates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolCategory {
    Collector,
    Metric,
    Analyzer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolMetricEntry {
    pub entry_id: String,
    pub name: String,
    pub category: ToolCategory,
    pub applicable_goals: BTreeSet<AuditGoal>,
}

/// Immutable, versioned knowledge catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    pub catalog_id: String,
    pub version: String,
    pub questions: Vec<AuditQuestion>,
    pub risks: Vec<RiskEntry>,
    pub standards: Vec<DocumentationStandardEntry>,
    pub tools: Vec<ToolMetricEntry>,
    pub templates: Vec<QueryTemplate>,
}

impl Catalog {
    pub fn question(&self, question_id: &str) -> Option<&AuditQuestion> {
        self.questions.iter().find(|q| q.question_id == question_id)
    }

    pub fn template(&self, template_id: &str) -> Option<&QueryTemplate> {
        self.templates.iter().find(|t| t.template_id == template_id)
    }

    /// Risks listing `question_id` among their mitigating questions, by id.
    pub fn risks_for(&self, question_id: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .risks
            .iter()
            .filter(|r| r.mitigating_question_ids.iter().any(|q| q == question_id))
            .map(|r| r.risk_id.clone())
            .collect();
        ids.sort();
        ids
    }
}

/// Orders versions by dot-separated segments, numerically where both
/// segments are integers and lexically otherwise.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut left = a.split('.');
    let mut right = b.split('.');
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => {
                let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
                    (Ok(x), Ok(y)) => x.cmp(&y),
                    _ => x.cmp(y),
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

fn check_unique<'a>(kind: &'static str, ids: impl Iterator<Item = &'a str>) -> Result<(), KnowledgeError> {
    let mut seen = HashSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(KnowledgeError::InvalidEntry { id: String::new(), reason: format!("empty {kind} id") });
        }
        if !seen.insert(id) {
            return Err(KnowledgeError::DuplicateId { kind, id: id.to_owned() });
        }
    }
    Ok(())
}

/// Checks every catalog invariant.
pub fn validate_catalog(catalog: &Catalog) -> Result<(), KnowledgeError> {
    let invalid = |id: &str, reason: String| KnowledgeError::InvalidEntry { id: id.to_owned(), reason };
    if catalog.catalog_id.is_empty() {
        return Err(invalid("", "catalog_id must be non-empty".into()));
    }
    if catalog.version.is_empty() {
        return Err(invalid(&catalog.catalog_id, "version must be non-empty".into()));
    }
    check_unique("question", catalog.questions.iter().map(|q| q.question_id.as_str()))?;
    check_unique("risk", catalog.risks.iter().map(|r| r.risk_id.as_str()))?;
    check_unique("standard", catalog.standards.iter().map(|s| s.standard_id.as_str()))?;
    check_unique("tool", catalog.tools.iter().map(|t| t.entry_id.as_str()))?;
    check_unique("template", catalog.templates.iter().map(|t| t.template_id.as_str()))?;

    for template in &catalog.templates {
        template.validate().map_err(|e| invalid(&template.template_id, e.to_string()))?;
    }
    for q in &catalog.questions {
        if q.goals.is_empty() {
            return Err(invalid(&q.question_id, "goals must be non-empty".into()));
        }
        if q.required_patterns.is_empty() {
            return Err(invalid(&q.question_id, "required_patterns must be non-empty".into()));
        }
        for p in &q.required_patterns {
            p.validate().map_err(|e| invalid(&q.question_id, e.to_string()))?;
        }
        for p in &q.adhoc_predicates {
            validate_predicate(p).map_err(|e| invalid(&q.question_id, e.to_string()))?;
        }
        let template =
            catalog.template(&q.template_id).ok_or_else(|| KnowledgeError::DanglingReference(q.template_id.clone()))?;
        if template.answer_type != q.answer_type {
            return Err(invalid(
                &q.question_id,
                format!("answer type differs from template {}", template.template_id),
            ));
        }
    }
    for r in &catalog.risks {
        for qid in &r.mitigating_question_ids {
            if catalog.question(qid).is_none() {
                return Err(KnowledgeError::DanglingReference(qid.clone()));
            }
        }
    }
    for s in &catalog.standards {
        if s.field_predicates.is_empty() {
            return Err(invalid(&s.standard_id, "field_predicates must be non-empty".into()));
        }
        for p in &s.field_predicates {
            validate_predicate(p).map_err(|e| invalid(&s.standard_id, e.to_string()))?;
        }
    }
    Ok(())
}

pub fn load_catalog(document: &[u8]) -> Result<Catalog, KnowledgeError> {
    let catalog: Catalog = serde_json::from_slice(document).map_err(|e| KnowledgeError::ParseError(e.to_string()))?;
    validate_catalog(&catalog)?;
    Ok(catalog)
}

/// Canonical form: pretty JSON, object keys in lexicographic order,
/// trailing newline.
pub fn serialize_catalog(catalog: &Catalog) -> Vec<u8> {
    let value = serde_json::to_value(catalog).expect("catalog serializes");
    let mut out = serde_json::to_vec_pretty(&value).expect("json value serializes");
    out.push(b'\n');
    out
}

/// The bundled catalog.
pub fn default_catalog() -> Catalog {
    load_catalog(DEFAULT_CATALOG.as_bytes()).expect("bundled catalog is valid")
}

pub fn default_catalog_bytes() -> &'static [u8] {
    DEFAULT_CATALOG.as_bytes()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<BTreeSet<AuditGoal>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_kinds: Option<BTreeSet<ComponentKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<BTreeSet<LifecyclePhase>>,
}

impl QuestionFilter {
    pub fn matches(&self, q: &AuditQuestion) -> bool {
        let goals = self.goals.as_ref().is_none_or(|g| !g.is_disjoint(&q.goals));
        let target = self.target_kinds.as_ref().is_none_or(|kinds| match q.target {
            QuestionTarget::WholeSystem => true,
            QuestionTarget::Kind(k) => kinds.contains(&k),
        });
        let phases = self.phases.as_ref().is_none_or(|p| !p.is_disjoint(&q.phases));
        goals && target && phases
    }
}

/// Questions matching every given filter dimension, sorted by id.
pub fn find_questions<'c>(catalog: &'c Catalog, filter: &QuestionFilter) -> Vec<&'c AuditQuestion> {
    let mut out: Vec<&AuditQuestion> = catalog.questions.iter().filter(|q| filter.matches(q)).collect();
    out.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    out
}

pub fn resolve_template<'c>(catalog: &'c Catalog, template_id: &str) -> Result<&'c QueryTemplate, KnowledgeError> {
    catalog.template(template_id).ok_or_else(|| KnowledgeError::DanglingReference(template_id.to_owned()))
}

/// Heuristic completeness warnings: predicates required by questions that
/// no documentation standard declares and that are not marked ad hoc.
pub fn lint_catalog(catalog: &Catalog) -> Vec<String> {
    let declared: BTreeSet<&str> =
        catalog.standards.iter().flat_map(|s| s.field_predicates.iter().map(String::as_str)).collect();
    let mut warnings = Vec::new();
    let mut questions: Vec<&AuditQuestion> = catalog.questions.iter().collect();
    questions.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    for q in questions {
        let mut reported = BTreeMap::new();
        for p in q.required_patterns.iter().filter_map(|p| p.predicate.as_deref()) {
            if !declared.contains(p) && !q.adhoc_predicates.iter().any(|a| a == p) {
                reported.insert(p, ());
            }
        }
        for p in reported.keys() {
            warnings.push(format!(
                "question {}: predicate {p} is not declared by any documentation standard",
                q.question_id
            ));
        }
    }
    warnings
}
