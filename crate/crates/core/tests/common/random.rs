//! Seeded generators for random statement stores and queries.

#![allow(dead_code)]

use std::cmp::Ordering;

use auditbox_core::ingest::{BatchItem, IngestBatch, StatementStore};
use auditbox_core::model::{ObjectType, ObjectValue, StatementDraft, Timestamp};
use auditbox_core::query::{
    evaluate, Aggregate, AggregateFunction, AggregateValue, BucketWidth, CmpOp, Filter, Literal, ObjectTerm, Operand, OrderBy,
    QueryAst, QueryResult, StatementPattern, Term, TimeBucket,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{reference_evaluate, value_matches, RefRow};

/// 2024-01-01T00:00:00Z
pub const BASE_MS: i64 = 1_704_067_200_000;
const HOUR_MS: i64 = 3_600_000;

const PREDICATES: [&str; 5] = ["ex:p0", "ex:p1", "ex:p2", "ex:p3", "ex:p4"];
const WORDS: [&str; 5] = ["alpha", "beta", "gamma", "alp", "delta"];

fn random_object<R: Rng>(rng: &mut R, predicate: usize, n_subjects: usize) -> ObjectValue {
    match predicate {
        0 => ObjectValue::Decimal(rng.gen_range(-1_000_000..=1_000_000) as f64 / 1000.0),
        1 => ObjectValue::Integer(rng.gen_range(-50..=50)),
        2 => ObjectValue::String(WORDS.choose(rng).unwrap().to_string()),
        3 => ObjectValue::Entity(format!("s:{}", rng.gen_range(0..n_subjects))),
        _ => match rng.gen_range(0..5) {
            0 => ObjectValue::Boolean(rng.gen()),
            1 => ObjectValue::Timestamp(Timestamp::from_millis(BASE_MS + rng.gen_range(0..240) * HOUR_MS).unwrap()),
            2 => ObjectValue::Integer(rng.gen_range(0..10)),
            3 => ObjectValue::Decimal(rng.gen_range(0..10_000) as f64 / 100.0),
            _ => ObjectValue::String(WORDS.choose(rng).unwrap().to_string()),
        },
    }
}

pub fn random_draft<R: Rng>(rng: &mut R, n_subjects: usize) -> StatementDraft {
    let p = rng.gen_range(0..PREDICATES.len());
    StatementDraft {
        subject: format!("s:{}", rng.gen_range(0..n_subjects)),
        predicate: PREDICATES[p].to_owned(),
        object: random_object(rng, p, n_subjects),
        run_id: if rng.gen_bool(0.8) { Some(format!("r{}", rng.gen_range(0..5))) } else { None },
        component_id: format!("c{}", rng.gen_range(0..4)),
        recorded_at: Timestamp::from_millis(BASE_MS + rng.gen_range(0..240) * HOUR_MS + rng.gen_range(0..1000))
            .unwrap(),
    }
}

/// Store of up to `max_statements` drafts ingested in several batches.
pub fn random_store<R: Rng>(rng: &mut R, max_statements: usize) -> StatementStore {
    let n = rng.gen_range(0..=max_statements);
    let n_subjects = (n / 8).max(3);
    let mut store = StatementStore::in_memory();
    let mut remaining = n;
    let mut batch = 0;
    while remaining > 0 {
        let size = rng.gen_range(1..=remaining.min(500));
        let items = (0..size).map(|_| BatchItem::Draft(random_draft(rng, n_subjects))).collect();
        let at = Timestamp::from_millis(BASE_MS + batch).unwrap();
        store.ingest(IngestBatch::new(format!("batch-{batch}"), items), at).unwrap();
        remaining -= size;
        batch += 1;
    }
    store
}

fn random_literal<R: Rng>(rng: &mut R) -> Literal {
    let p = rng.gen_range(0..PREDICATES.len());
    let value = random_object(rng, p, 8);
    Literal::from(&value)
}

/// Random query over the vocabulary used by [`random_store`].
pub fn random_query<R: Rng>(rng: &mut R) -> QueryAst {
    let n_patterns = rng.gen_range(1..=3);
    let mut patterns = Vec::new();
    let mut vars: Vec<String> = Vec::new();
    let mut numeric_vars: Vec<String> = Vec::new();
    let mut time_var = None;
    for i in 0..n_patterns {
        let p = rng.gen_range(0..PREDICATES.len());
        let mut pattern = StatementPattern::default();
        if rng.gen_bool(0.9) {
            pattern.predicate = Some(PREDICATES[p].to_owned());
        } else {
            pattern.component_id = Some(Term::Eq(format!("c{}", rng.gen_range(0..4))));
        }
        // later patterns always join on a subject variable or pin the subject,
        // so joins stay bounded
        let has_s2 = vars.iter().any(|v| v == "s2");
        pattern.subject = Some(match (i, rng.gen_range(0..10)) {
            (_, 0..=6) => Term::Var("s".into()),
            (0, 7) => Term::Prefix("s:1".into()),
            (_, 7 | 8) if has_s2 => Term::Var("s2".into()),
            _ => Term::Eq(format!("s:{}", rng.gen_range(0..4))),
        });
        if let Some(Term::Var(v)) = &pattern.subject {
            vars.push(v.clone());
        }
        match rng.gen_range(0..10) {
            0 if rng.gen_bool(0.5) => pattern.object = Some(ObjectTerm::Eq(Literal::from(&random_object(rng, p, 8)))),
            1 if p == 3 => pattern.object = Some(ObjectTerm::Var("s2".into())),
            2..=9 => {
                let v = format!("o{i}");
                pattern.object = Some(ObjectTerm::Var(v.clone()));
                if pattern.predicate.is_some() && (p <= 1 || rng.gen_bool(0.2)) {
                    numeric_vars.push(v);
                }
            }
            _ => {}
        }
        if let Some(ObjectTerm::Var(v)) = &pattern.object {
            vars.push(v.clone());
        }
        if rng.gen_bool(0.15) && pattern.object.is_none() {
            pattern.object_type = Some(*ObjectType::ALL.choose(rng).unwrap());
        }
        match rng.gen_range(0..10) {
            0 => pattern.run_id = Some(Term::Eq(format!("r{}", rng.gen_range(0..5)))),
            1 | 2 => {
                pattern.run_id = Some(Term::Var("r".into()));
                vars.push("r".into());
            }
            _ => {}
        }
        if pattern.predicate.is_some() && rng.gen_bool(0.15) {
            pattern.component_id = Some(Term::Var("c".into()));
            vars.push("c".into());
        }
        if rng.gen_bool(0.4) {
            let t = if rng.gen_bool(0.7) { "t".to_string() } else { format!("t{i}") };
            pattern.recorded_at = Some(t.clone());
            vars.push(t.clone());
            time_var = Some(t);
        }
        patterns.push(pattern);
    }
    vars.sort();
    vars.dedup();

    let mut filters = Vec::new();
    for _ in 0..*[0, 0, 1, 1, 2].choose(rng).unwrap() {
        if vars.is_empty() {
            break;
        }
        let op = *[CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::StartsWith]
            .choose(rng)
            .unwrap();
        let left = Operand::Var(vars.choose(rng).unwrap().clone());
        let right = if rng.gen_bool(0.2) {
            Operand::Var(vars.choose(rng).unwrap().clone())
        } else if op == CmpOp::StartsWith {
            Operand::Literal(Literal::new(ObjectType::String, *["al", "s:1", "g", ""].choose(rng).unwrap()))
        } else {
            Operand::Literal(random_literal(rng))
        };
        filters.push(Filter { left, op, right });
    }

    let function = *[
        AggregateFunction::Count,
        AggregateFunction::CountDistinct,
        AggregateFunction::Avg,
        AggregateFunction::Min,
        AggregateFunction::Max,
        AggregateFunction::Sum,
        AggregateFunction::Exists,
        AggregateFunction::CollectSet,
    ]
    .choose(rng)
    .unwrap();
    let mut function = function;
    let needs_numeric =
        matches!(function, AggregateFunction::Avg | AggregateFunction::Sum | AggregateFunction::Min | AggregateFunction::Max);
    if needs_numeric && numeric_vars.is_empty() && rng.gen_bool(0.8) {
        function = AggregateFunction::CountDistinct;
    }
    let var = if needs_numeric && !numeric_vars.is_empty() && rng.gen_bool(0.9) {
        Some(numeric_vars.choose(rng).unwrap().clone())
    } else if vars.is_empty() || (function == AggregateFunction::Count && rng.gen_bool(0.5)) {
        None
    } else {
        Some(vars.choose(rng).unwrap().clone())
    };
    let function = if var.is_none() && !matches!(function, AggregateFunction::Exists) {
        AggregateFunction::Count
    } else {
        function
    };

    let mut group_by: Vec<String> = Vec::new();
    for _ in 0..rng.gen_range(0..=2) {
        if let Some(v) = vars.choose(rng) {
            if !group_by.contains(v) {
                group_by.push(v.clone());
            }
        }
    }
    let time_bucket = match &time_var {
        Some(t) if rng.gen_bool(0.3) => Some(TimeBucket {
            var: t.clone(),
            width: ["1d", "6h", "1h", "90m"].choose(rng).unwrap().parse::<BucketWidth>().unwrap(),
        }),
        _ => None,
    };
    let mut ast = QueryAst { patterns, filters, group_by, aggregate: Aggregate { function, var }, time_bucket, order_by: None, limit: None };

    let columns = ast.columns();
    let inexact = matches!(function, AggregateFunction::Avg | AggregateFunction::Sum);
    if rng.gen_bool(0.4) {
        let by = if columns.is_empty() || rng.gen_bool(0.5) { "value".to_string() } else { columns.choose(rng).unwrap().clone() };
        let by_value = by == "value";
        ast.order_by = Some(OrderBy { by, descending: rng.gen() });
        if rng.gen_bool(0.5) && !(by_value && inexact) {
            ast.limit = Some(rng.gen_range(1..=5));
        }
    } else if rng.gen_bool(0.2) {
        ast.limit = Some(rng.gen_range(1..=5));
    }
    ast
}

/// Compares an evaluator result with oracle rows: keys exactly, values
/// exactly for discrete aggregates and within `rel_tol` for AVG/SUM. Rows
/// ordered by an inexact value are compared as sets, and the evaluator's own
/// order is checked separately.
pub fn compare_with_reference(ast: &QueryAst, got: &QueryResult, want: &[RefRow], rel_tol: f64) -> Result<(), String> {
    let function = ast.aggregate.function;
    let inexact = matches!(function, AggregateFunction::Avg | AggregateFunction::Sum);
    let tol = if inexact { rel_tol } else { 0.0 };
    if got.rows.len() != want.len() {
        return Err(format!("row count {} != oracle {}", got.rows.len(), want.len()));
    }
    let by_value = ast.order_by.as_ref().is_some_and(|o| o.by == "value");
    let mut got_rows: Vec<_> = got.rows.iter().collect();
    let mut want_rows: Vec<_> = want.iter().collect();
    if by_value && inexact {
        let descending = ast.order_by.as_ref().unwrap().descending;
        for w in got.rows.windows(2) {
            let ord = w[0].value.cmp(&w[1].value);
            if (descending && ord == Ordering::Less) || (!descending && ord == Ordering::Greater) {
                return Err("evaluator rows not ordered by value".into());
            }
        }
        got_rows.sort_by(|a, b| a.key.cmp(&b.key));
        want_rows.sort_by(|a, b| a.key.cmp(&b.key));
    }
    for (g, w) in got_rows.iter().zip(&want_rows) {
        if g.key != w.key {
            return Err(format!("key {:?} != oracle {:?}", g.key, w.key));
        }
        if !value_matches(&g.value, &w.value, tol) {
            return Err(format!("value {:?} != oracle {:?} at key {:?}", g.value, w.value, g.key));
        }
    }
    Ok(())
}

pub fn is_scalar_true(value: &AggregateValue) -> bool {
    matches!(value, AggregateValue::Scalar(ObjectValue::Boolean(true)))
}

/// Evaluates one random query over one random store, pinned to a random
/// watermark, and compares it with the reference evaluator.
pub fn check_query(seed: u64, max_statements: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(&mut rng, max_statements);
    let query = random_query(&mut rng);
    let as_of = if store.watermark() > 0 && rng.gen_bool(0.3) {
        rng.gen_range(0..=store.watermark())
    } else {
        store.watermark()
    };
    let got = evaluate(&query, &store, Some(as_of));
    let want = reference_evaluate(&query, store.statements(), as_of);
    let q = || serde_json::to_string(&query).unwrap();
    match (got, want) {
        (Ok(got), Ok(want)) => compare_with_reference(&query, &got, &want, 1e-9).map_err(|e| format!("{e}\nquery: {}", q())),
        (Err(_), Err(_)) => Ok(()),
        (Ok(_), Err(e)) => Err(format!("oracle failed ({e}) but evaluator succeeded: {}", q())),
        (Err(e), Ok(_)) => Err(format!("evaluator failed ({e}) but oracle succeeded: {}", q())),
    }
}
