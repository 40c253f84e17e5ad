//! Question answering and audit reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{compute_coverage, AuditWorkflow, CatalogRef, CoverageReport, EngineError, WorkflowState};
use crate::ingest::StatementStore;
use crate::knowledge::Catalog;
use crate::model::{AuditGoal, LifecyclePhase, ObjectValue, Timestamp};
use crate::query::{evaluate, AggregateValue, AnswerType, PassWhen, QueryAst, QueryError, ResultRow};

pub const REPORT_FORMAT_VERSION: u32 = 1;

pub type Params = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("operation {operation} is not allowed in state {state}")]
    IllegalState { state: WorkflowState, operation: &'static str },
    #[error("question {0:?} is not selected in this audit")]
    UnknownQuestion(String),
    #[error("missing template parameters: {}", describe_missing(.0))]
    MissingParam(BTreeMap<String, Vec<String>>),
    #[error("catalog {found} does not match the workflow's catalog {expected}")]
    CatalogMismatch { expected: String, found: String },
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn describe_missing(missing: &BTreeMap<String, Vec<String>>) -> String {
    missing.iter().map(|(q, p)| format!("{q}: {}", p.join(", "))).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub template_id: String,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Params,
    pub query: QueryAst,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_query: Option<QueryAst>,
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub computed_at: Timestamp,
    pub watermark: u64,
}

fn query_is_true(rows: &[ResultRow]) -> bool {
    match rows {
        [] => false,
        [row] => match &row.value {
            AggregateValue::Scalar(ObjectValue::Boolean(b)) => *b,
            AggregateValue::Scalar(_) => true,
            AggregateValue::Set(items) => !items.is_empty(),
        },
        _ => true,
    }
}

/// Three-valued verdict: no evidence in the domain is `no_data`, never `fail`.
fn classify(rows: &[ResultRow], domain_rows: Option<&[ResultRow]>, pass_when: PassWhen) -> Verdict {
    let has_domain = match domain_rows {
        Some(d) => query_is_true(d),
        None => !rows.is_empty() && rows.iter().any(|r| !matches!(&r.value, AggregateValue::Set(s) if s.is_empty())),
    };
    if !has_domain {
        return Verdict::NoData;
    }
    let truth = query_is_true(rows);
    let pass = match pass_when {
        PassWhen::True => truth,
        PassWhen::False => !truth,
    };
    if pass {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn check_catalog(wf: &AuditWorkflow, catalog: &Catalog) -> Result<(), ReportError> {
    let found = CatalogRef::of(catalog);
    if &found != wf.catalog_ref() {
        return Err(ReportError::CatalogMismatch { expected: wf.catalog_ref().to_string(), found: found.to_string() });
    }
    Ok(())
}

fn check_answerable(wf: &AuditWorkflow, operation: &'static str) -> Result<(), ReportError> {
    if !matches!(wf.state(), WorkflowState::Collecting | WorkflowState::Reporting) {
        return Err(ReportError::IllegalState { state: wf.state(), operation });
    }
    Ok(())
}

fn answer_at(
    catalog: &Catalog,
    question_id: &str,
    params: &Params,
    store: &StatementStore,
    watermark: u64,
    at: Timestamp,
) -> Result<AnswerRecord, ReportError> {
    let question = catalog.question(question_id).ok_or_else(|| ReportError::UnknownQuestion(question_id.to_owned()))?;
    let template = catalog
        .template(&question.template_id)
        .ok_or_else(|| ReportError::UnknownQuestion(question_id.to_owned()))?;
    let missing = template.missing_params(params);
    if !missing.is_empty() {
        return Err(ReportError::MissingParam([(question_id.to_owned(), missing)].into()));
    }
    let used: Params = params.iter().filter(|(k, _)| template.parameters.iter().any(|p| &p.name == *k)).map(|(k, v)| (k.clone(), v.clone())).collect();
    let (ast, domain) = template.instantiate(&used)?;
    let result = evaluate(&ast, store, Some(watermark))?;
    let verdict = match template.answer_type {
        AnswerType::Boolean => {
            let domain_rows = domain.as_ref().map(|d| evaluate(d, store, Some(watermark))).transpose()?;
            Some(classify(&result.rows, domain_rows.as_ref().map(|r| r.rows.as_slice()), template.pass_when))
        }
        _ => None,
    };
    Ok(AnswerRecord {
        question_id: question_id.to_owned(),
        template_id: template.template_id.clone(),
        answer_type: template.answer_type,
        params: used,
        query: ast,
        domain_query: domain,
        columns: result.columns,
        rows: result.rows,
        verdict,
        computed_at: at,
        watermark: result.watermark,
    })
}

/// Answers one selected question at `as_of` (default: current watermark).
pub fn answer_question(
    wf: &AuditWorkflow,
    catalog: &Catalog,
    question_id: &str,
    params: &Params,
    store: &StatementStore,
    as_of: Option<u64>,
    at: Timestamp,
) -> Result<AnswerRecord, ReportError> {
    check_answerable(wf, "answer_question")?;
    check_catalog(wf, catalog)?;
    if !wf.is_selected(question_id) {
        return Err(ReportError::UnknownQuestion(question_id.to_owned()));
    }
    let watermark = as_of.unwrap_or_else(|| store.watermark());
    answer_at(catalog, question_id, params, store, watermark, at)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system_id: String,
    pub goal: AuditGoal,
    pub components_by_kind: BTreeMap<String, usize>,
    pub data_flows: usize,
    pub phases_in_scope: Vec<LifecyclePhase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub format_version: u32,
    pub audit_id: String,
    pub catalog_ref: CatalogRef,
    pub system: SystemSummary,
    pub coverage: CoverageReport,
    pub answers: Vec<AnswerRecord>,
    pub watermark: u64,
    /// Commit time of the last batch within the watermark, so that
    /// regenerating at the same watermark is byte-identical.
    pub generated_at: Timestamp,
}

impl AuditReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    /// Plain-text summary.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Audit report {} (format {})", self.audit_id, self.format_version);
        let _ = writeln!(s, "catalog:      {}", self.catalog_ref);
        let _ = writeln!(s, "system:       {} (goal {})", self.system.system_id, self.system.goal);
        let _ = writeln!(s, "watermark:    {}", self.watermark);
        let _ = writeln!(s, "generated at: {}", self.generated_at);
        let _ = writeln!(s, "coverage:     {:.3}", self.coverage.overall_ratio);
        for answer in &self.answers {
            let _ = writeln!(s);
            let _ = write!(s, "[{}] {}", answer.question_id, answer.template_id);
            if let Some(v) = answer.verdict {
                let _ = write!(s, " verdict={}", serde_json::to_value(v).expect("verdict").as_str().unwrap_or_default());
            }
            let _ = writeln!(s);
            if !answer.params.is_empty() {
                let params: Vec<String> = answer.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ = writeln!(s, "  params: {}", params.join(", "));
            }
            if answer.rows.is_empty() {
                let _ = writeln!(s, "  (no rows)");
            }
            for row in &answer.rows {
                let key: Vec<String> = row.key.iter().map(ToString::to_string).collect();
                let value = match &row.value {
                    AggregateValue::Scalar(v) => v.to_string(),
                    AggregateValue::Set(items) => {
                        format!("{{{}}}", items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
                    }
                };
                if key.is_empty() {
                    let _ = writeln!(s, "  {value}");
                } else {
                    let _ = writeln!(s, "  {} -> {value}", key.join(" | "));
                }
            }
        }
        s
    }
}

/// Answers every selected question at a single watermark and moves the
/// workflow from collecting to reporting.
#[allow(clippy::too_many_arguments)]
pub fn generate_report(
    wf: &mut AuditWorkflow,
    catalog: &Catalog,
    store: &StatementStore,
    params_per_question: &BTreeMap<String, Params>,
    as_of: Option<u64>,
    actor: &str,
    now: Timestamp,
) -> Result<AuditReport, ReportError> {
    check_answerable(wf, "generate_report")?;
    check_catalog(wf, catalog)?;
    let model = wf.selected().expect("selection present after scoping").clone();
    let empty = Params::new();

    let mut missing = BTreeMap::new();
    for qid in &model.question_ids {
        let question = catalog.question(qid).ok_or_else(|| ReportError::UnknownQuestion(qid.clone()))?;
        let template = catalog.template(&question.template_id).ok_or_else(|| ReportError::UnknownQuestion(qid.clone()))?;
        let lacking = template.missing_params(params_per_question.get(qid).unwrap_or(&empty));
        if !lacking.is_empty() {
            missing.insert(qid.clone(), lacking);
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::MissingParam(missing));
    }

    let watermark = as_of.unwrap_or_else(|| store.watermark());
    if watermark > store.watermark() {
        return Err(QueryError::WatermarkAhead { requested: watermark, watermark: store.watermark() }.into());
    }
    let generated_at = store.commit_time_at(watermark).unwrap_or(wf.created_at());
    let mut question_ids = model.question_ids.clone();
    question_ids.sort();
    let answers = question_ids
        .iter()
        .map(|qid| answer_at(catalog, qid, params_per_question.get(qid).unwrap_or(&empty), store, watermark, generated_at))
        .collect::<Result<Vec<_>, _>>()?;

    let system = wf.system();
    let mut components_by_kind = BTreeMap::new();
    for c in &system.components {
        *components_by_kind.entry(c.kind.as_str().to_owned()).or_insert(0) += 1;
    }
    let report = AuditReport {
        format_version: REPORT_FORMAT_VERSION,
        audit_id: wf.audit_id().to_owned(),
        catalog_ref: wf.catalog_ref().clone(),
        system: SystemSummary {
            system_id: system.system_id.clone(),
            goal: wf.goal(),
            components_by_kind,
            data_flows: system.data_flows.len(),
            phases_in_scope: system.phases_in_scope.iter().copied().collect(),
        },
        coverage: compute_coverage(&model.question_patterns, wf.bindings()),
        answers,
        watermark,
        generated_at,
    };
    if wf.state() == WorkflowState::Collecting {
        wf.transition(WorkflowState::Reporting, false, actor, now)?;
    }
    Ok(report)
}
