//! End-to-end drivers for the two simulated use cases.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use auditbox::app::{AnswerRequest, App, Clock, CreateAudit, Operation, ReportRequest, Selection, StateChange};
use auditbox::config::{Config, Principal};
use auditbox::sim::{simulate, GroundTruth, SimOutput, SimulatorConfig};
use auditbox_core::engine::{CoverageReport, Recommendation, WorkflowState};
use auditbox_core::ingest::IngestReceipt;
use auditbox_core::model::{ObjectValue, Timestamp};
use auditbox_core::query::AggregateValue;
use auditbox_core::report::{AnswerRecord, AuditReport, Verdict};
use serde::de::DeserializeOwned;
use serde_json::Value;

pub struct Uc1Outcome {
    pub averages: usize,
    pub max_rel_err: f64,
    pub runs_matched: usize,
    pub runs: usize,
    pub elapsed: Duration,
}

pub struct Uc2Outcome {
    pub consent_matched: usize,
    pub runs: usize,
    pub studies_matched: usize,
    pub studies: usize,
}

fn typed<T: DeserializeOwned>(v: Value) -> Result<T, String> {
    serde_json::from_value(v).map_err(|e| e.to_string())
}

fn exec(app: &App, op: Operation) -> Result<Value, String> {
    let name = op.name();
    app.execute(&Principal::local(), op).map_err(|e| format!("{name}: {} {}", e.code, e.message))
}

pub fn open_app(dir: &std::path::Path) -> App {
    let config = Config { data_dir: dir.to_owned(), ..Config::default() };
    App::open(config, Clock::System).expect("app opens")
}

/// Creates, scopes, binds and starts an audit, then ingests every simulator batch.
pub fn collect(app: &App, audit_id: &str, out: &SimOutput) -> Result<(), String> {
    let create = CreateAudit { audit_id: Some(audit_id.into()), system: out.system.clone(), goal: out.manifest.goal };
    exec(app, Operation::CreateAudit(create))?;
    let recs: Vec<Recommendation> = typed(exec(app, Operation::Recommendations { audit_id: audit_id.into() })?)?;
    let recommended: BTreeSet<&str> = recs.iter().map(|r| r.question.question_id.as_str()).collect();
    for q in &out.manifest.questions {
        if !recommended.contains(q.as_str()) {
            return Err(format!("{q} was not recommended"));
        }
    }
    let selection = Selection { question_ids: out.manifest.questions.clone() };
    exec(app, Operation::SelectQuestions { audit_id: audit_id.into(), body: selection })?;
    for binding in &out.bindings {
        exec(app, Operation::RegisterBinding { audit_id: audit_id.into(), binding: binding.clone() })?;
    }
    let coverage: CoverageReport = typed(exec(app, Operation::Coverage { audit_id: audit_id.into() })?)?;
    if coverage.overall_ratio != 1.0 {
        return Err(format!("coverage {} after binding every collector", coverage.overall_ratio));
    }
    let start = StateChange { target: WorkflowState::Collecting, coverage_override: false };
    exec(app, Operation::Transition { audit_id: audit_id.into(), body: start })?;
    for (batch_key, body) in out.batches().map_err(|e| e.to_string())? {
        let receipt: IngestReceipt =
            typed(exec(app, Operation::Ingest { audit_id: audit_id.into(), batch_key: batch_key.clone(), body })?)?;
        if !receipt.rejected.is_empty() {
            return Err(format!("batch {batch_key} rejected {:?}", receipt.rejected[0]));
        }
    }
    Ok(())
}

fn answer(app: &App, audit_id: &str, question: &str, params: &[(&str, &str)]) -> Result<AnswerRecord, String> {
    let body = AnswerRequest {
        question_id: question.into(),
        params: params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        as_of: None,
    };
    typed(exec(app, Operation::Answer { audit_id: audit_id.into(), body })?)
}

pub fn run_uc1(dir: &std::path::Path, config: &SimulatorConfig) -> Result<Uc1Outcome, String> {
    let started = Instant::now();
    let out = simulate(config).map_err(|e| e.to_string())?;
    let GroundTruth::Uc1(truth) = &out.ground_truth else { return Err("expected uc1 ground truth".into()) };
    let app = open_app(dir);
    collect(&app, "uc1", &out)?;
    let stop = StateChange { target: WorkflowState::Reporting, coverage_override: false };
    exec(&app, Operation::Transition { audit_id: "uc1".into(), body: stop })?;

    let first_run = truth.run_success.keys().next().expect("at least one run").clone();
    let mut params = BTreeMap::new();
    params.insert("uc1-q2".to_owned(), BTreeMap::from([("run_id".to_owned(), first_run.clone())]));
    let body = ReportRequest { params_per_question: params, as_of: None };
    let report: AuditReport = typed(exec(&app, Operation::Report { audit_id: "uc1".into(), body })?)?;

    let averages = report
        .answers
        .iter()
        .find(|a| a.question_id == "uc1-q1")
        .ok_or("report lacks uc1-q1")?;
    let mut got: BTreeMap<(String, Timestamp), f64> = BTreeMap::new();
    for row in &averages.rows {
        match (row.key.as_slice(), &row.value) {
            (
                [ObjectValue::String(t), ObjectValue::Timestamp(day)],
                AggregateValue::Scalar(ObjectValue::Decimal(avg)),
            ) => {
                got.insert((t.clone(), *day), *avg);
            }
            _ => return Err(format!("unexpected uc1-q1 row {row:?}")),
        }
    }
    if got.len() != truth.avg_confidence.len() {
        return Err(format!("{} average groups, ground truth has {}", got.len(), truth.avg_confidence.len()));
    }
    let mut max_rel_err: f64 = 0.0;
    for want in &truth.avg_confidence {
        let have = got
            .get(&(want.entity_type.clone(), want.day))
            .ok_or_else(|| format!("missing average for {} on {}", want.entity_type, want.day))?;
        max_rel_err = max_rel_err.max((have - want.avg).abs() / want.avg.abs().max(f64::MIN_POSITIVE));
    }

    let report_verdict = report.answers.iter().find(|a| a.question_id == "uc1-q2").and_then(|a| a.verdict);
    let expected = |ok: bool| if ok { Verdict::Pass } else { Verdict::Fail };
    if report_verdict != Some(expected(truth.run_success[&first_run])) {
        return Err(format!("report verdict for {first_run} is {report_verdict:?}"));
    }
    let mut runs_matched = 0;
    for (run, ok) in &truth.run_success {
        if answer(&app, "uc1", "uc1-q2", &[("run_id", run)])?.verdict == Some(expected(*ok)) {
            runs_matched += 1;
        }
    }
    Ok(Uc1Outcome {
        averages: truth.avg_confidence.len(),
        max_rel_err,
        runs_matched,
        runs: truth.run_success.len(),
        elapsed: started.elapsed(),
    })
}

pub fn run_uc2(dir: &std::path::Path, config: &SimulatorConfig) -> Result<Uc2Outcome, String> {
    let out = simulate(config).map_err(|e| e.to_string())?;
    let GroundTruth::Uc2(truth) = &out.ground_truth else { return Err("expected uc2 ground truth".into()) };
    let app = open_app(dir);
    collect(&app, "uc2", &out)?;

    let mut consent_matched = 0;
    for (run, evaluated) in &truth.consent_evaluated {
        let want = if *evaluated { Verdict::Pass } else { Verdict::Fail };
        if answer(&app, "uc2", "uc2-q1", &[("run_id", run)])?.verdict == Some(want) {
            consent_matched += 1;
        }
    }
    let mut studies_matched = 0;
    for (study, libraries) in &truth.study_libraries {
        let record = answer(&app, "uc2", "uc2-q2", &[("study", study)])?;
        let got: Option<Vec<String>> = match record.rows.as_slice() {
            [row] => match &row.value {
                AggregateValue::Set(items) => items
                    .iter()
                    .map(|v| match v {
                        ObjectValue::String(s) => Some(s.clone()),
                        _ => None,
                    })
                    .collect(),
                _ => None,
            },
            _ => None,
        };
        if got.as_ref() == Some(libraries) {
            studies_matched += 1;
        }
    }
    Ok(Uc2Outcome {
        consent_matched,
        runs: truth.consent_evaluated.len(),
        studies_matched,
        studies: truth.study_libraries.len(),
    })
}
