//! Naive reference query evaluator used as a test oracle.
//!
//! Nested loops over the full statement list in sequence order, no indices,
//! no hash joins. Sums are computed exactly from the decimal lexical forms
//! and converted to `f64` only at the end.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use auditbox_core::ingest::StoredStatement;
use auditbox_core::model::ObjectValue;
use auditbox_core::query::{
    AggregateFunction, AggregateValue, CmpOp, ObjectTerm, Operand, QueryAst, StatementPattern, Term,
};

/// Oracle output row; numeric aggregates are plain `f64`.
#[derive(Debug, Clone, PartialEq)]
pub enum RefValue {
    Count(i64),
    Number(f64),
    Bool(bool),
    Set(Vec<ObjectValue>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefRow {
    pub key: Vec<ObjectValue>,
    pub value: RefValue,
}

type Binding = BTreeMap<String, ObjectValue>;

fn bind(binding: &mut Binding, var: &str, value: ObjectValue) -> bool {
    match binding.get(var) {
        Some(existing) => same_value(existing, &value),
        None => {
            binding.insert(var.to_owned(), value);
            true
        }
    }
}

/// Join equality: same type and same value.
fn same_value(a: &ObjectValue, b: &ObjectValue) -> bool {
    match (a, b) {
        (ObjectValue::Decimal(x), ObjectValue::Decimal(y)) => x.to_bits() == y.to_bits(),
        _ => a.object_type() == b.object_type() && a.lexical() == b.lexical(),
    }
}

fn term_ok(term: &Option<Term>, value: Option<&str>, make: fn(String) -> ObjectValue, b: &mut Binding) -> bool {
    match term {
        None => true,
        Some(t) => {
            let Some(v) = value else { return false };
            match t {
                Term::Eq(x) => x == v,
                Term::Prefix(p) => v.starts_with(p.as_str()),
                Term::Var(name) => bind(b, name, make(v.to_owned())),
            }
        }
    }
}

fn extend(pattern: &StatementPattern, stored: &StoredStatement, base: &Binding) -> Option<Binding> {
    let st = &stored.statement;
    if let Some(p) = &pattern.predicate {
        if p != st.predicate() {
            return None;
        }
    }
    if let Some(t) = pattern.object_type {
        if st.object().object_type() != t {
            return None;
        }
    }
    let mut b = base.clone();
    if !term_ok(&pattern.subject, Some(st.subject()), ObjectValue::Entity, &mut b) {
        return None;
    }
    match &pattern.object {
        None => {}
        Some(ObjectTerm::Eq(lit)) => {
            let v = ObjectValue::parse(lit.object_type, &lit.value).ok()?;
            if !same_value(&v, st.object()) {
                return None;
            }
        }
        Some(ObjectTerm::Var(name)) if !bind(&mut b, name, st.object().clone()) => return None,
        Some(ObjectTerm::Var(_)) => {}
    }
    if !term_ok(&pattern.component_id, Some(st.component_id()), ObjectValue::String, &mut b) {
        return None;
    }
    if !term_ok(&pattern.run_id, st.run_id(), ObjectValue::String, &mut b) {
        return None;
    }
    if let Some(name) = &pattern.recorded_at {
        if !bind(&mut b, name, ObjectValue::Timestamp(st.recorded_at())) {
            return None;
        }
    }
    Some(b)
}

fn numeric(v: &ObjectValue) -> Option<f64> {
    match v {
        ObjectValue::Integer(i) => Some(*i as f64),
        ObjectValue::Decimal(d) => Some(*d),
        _ => None,
    }
}

fn compare(a: &ObjectValue, b: &ObjectValue) -> Option<Ordering> {
    if let (Some(x), Some(y)) = (numeric(a), numeric(b)) {
        return x.partial_cmp(&y);
    }
    match (a, b) {
        (ObjectValue::String(x), ObjectValue::String(y)) | (ObjectValue::Entity(x), ObjectValue::Entity(y)) => {
            Some(x.cmp(y))
        }
        (ObjectValue::Boolean(x), ObjectValue::Boolean(y)) => Some(x.cmp(y)),
        (ObjectValue::Timestamp(x), ObjectValue::Timestamp(y)) => Some(x.as_millis().cmp(&y.as_millis())),
        _ => None,
    }
}

fn filter_holds(op: CmpOp, a: &ObjectValue, b: &ObjectValue) -> bool {
    if op == CmpOp::StartsWith {
        let text = |v: &ObjectValue| match v {
            ObjectValue::String(s) | ObjectValue::Entity(s) => Some(s.clone()),
            _ => None,
        };
        return matches!((text(a), text(b)), (Some(x), Some(y)) if x.starts_with(&y));
    }
    match compare(a, b) {
        None => op == CmpOp::Ne,
        Some(o) => match op {
            CmpOp::Eq => o == Ordering::Equal,
            CmpOp::Ne => o != Ordering::Equal,
            CmpOp::Lt => o == Ordering::Less,
            CmpOp::Le => o != Ordering::Greater,
            CmpOp::Gt => o == Ordering::Greater,
            CmpOp::Ge => o != Ordering::Less,
            CmpOp::StartsWith => unreachable!(),
        },
    }
}

/// Exact sum of numeric lexical forms, scaled by 10^SCALE.
const SCALE: u32 = 9;

fn scaled(v: &ObjectValue) -> Option<i128> {
    let text = match v {
        ObjectValue::Integer(i) => return Some(*i as i128 * 10i128.pow(SCALE)),
        ObjectValue::Decimal(_) => v.lexical(),
        _ => return None,
    };
    if text.contains(['e', 'E']) {
        return None;
    }
    let (neg, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if frac.len() > SCALE as usize {
        return None;
    }
    let mut value: i128 = int.parse().ok()?;
    value *= 10i128.pow(SCALE);
    if !frac.is_empty() {
        value += frac.parse::<i128>().ok()? * 10i128.pow(SCALE - frac.len() as u32);
    }
    Some(if neg { -value } else { value })
}

fn exact_sum(values: &[&ObjectValue]) -> f64 {
    match values.iter().map(|v| scaled(v)).collect::<Option<Vec<i128>>>() {
        Some(parts) => parts.iter().sum::<i128>() as f64 / 10f64.powi(SCALE as i32),
        None => values.iter().map(|v| numeric(v).expect("numeric")).sum(),
    }
}

/// Evaluates `ast` over `statements` restricted to `seq <= as_of`.
pub fn reference_evaluate(ast: &QueryAst, statements: &[StoredStatement], as_of: u64) -> Result<Vec<RefRow>, String> {
    ast.validate().map_err(|e| e.to_string())?;
    let visible: Vec<&StoredStatement> = statements.iter().filter(|s| s.seq <= as_of).collect();

    // nested-loop join in pattern order
    let mut solutions: Vec<Binding> = vec![Binding::new()];
    for pattern in &ast.patterns {
        let mut next = Vec::new();
        for sol in &solutions {
            for st in &visible {
                if let Some(b) = extend(pattern, st, sol) {
                    next.push(b);
                }
            }
        }
        solutions = next;
    }

    let value_of = |b: &Binding, o: &Operand| -> ObjectValue {
        match o {
            Operand::Var(v) => b[v].clone(),
            Operand::Literal(lit) => ObjectValue::parse(lit.object_type, &lit.value).expect("validated literal"),
        }
    };
    solutions.retain(|b| ast.filters.iter().all(|f| filter_holds(f.op, &value_of(b, &f.left), &value_of(b, &f.right))));

    let function = ast.aggregate.function;
    if function == AggregateFunction::Exists {
        return Ok(vec![RefRow { key: vec![], value: RefValue::Bool(!solutions.is_empty()) }]);
    }
    let agg_var = ast.aggregate.var.clone();
    if matches!(
        function,
        AggregateFunction::Avg | AggregateFunction::Sum | AggregateFunction::Min | AggregateFunction::Max
    ) {
        let var = agg_var.as_ref().expect("validated");
        if let Some(bad) = solutions.iter().find(|b| numeric(&b[var]).is_none()) {
            return Err(format!("type mismatch: {}", bad[var].object_type()));
        }
    }

    let mut groups: Vec<(Vec<ObjectValue>, Vec<Binding>)> = Vec::new();
    for b in solutions {
        let mut key: Vec<ObjectValue> = ast.group_by.iter().map(|g| b[g].clone()).collect();
        if let Some(bucket) = &ast.time_bucket {
            let ObjectValue::Timestamp(t) = &b[&bucket.var] else {
                return Err("bucket over non-timestamp".into());
            };
            let w = bucket.width.as_millis();
            let start = t.as_millis() - t.as_millis().rem_euclid(w);
            key.push(ObjectValue::Timestamp(auditbox_core::Timestamp::from_millis(start).expect("in range")));
        }
        match groups.iter_mut().find(|(k, _)| k.len() == key.len() && k.iter().zip(&key).all(|(a, b)| same_value(a, b))) {
            Some((_, members)) => members.push(b),
            None => groups.push((key, vec![b])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));

    let mut rows: Vec<RefRow> = groups
        .into_iter()
        .map(|(key, members)| {
            let values: Vec<&ObjectValue> = match &agg_var {
                Some(v) => members.iter().map(|b| &b[v]).collect(),
                None => Vec::new(),
            };
            let distinct = || {
                let mut out: Vec<ObjectValue> = Vec::new();
                for v in &values {
                    if !out.iter().any(|o| same_value(o, v)) {
                        out.push((*v).clone());
                    }
                }
                out.sort();
                out
            };
            let value = match function {
                AggregateFunction::Count => RefValue::Count(members.len() as i64),
                AggregateFunction::CountDistinct => RefValue::Count(distinct().len() as i64),
                AggregateFunction::Sum => RefValue::Number(exact_sum(&values)),
                AggregateFunction::Avg => RefValue::Number(exact_sum(&values) / values.len() as f64),
                AggregateFunction::Min => {
                    RefValue::Number(values.iter().map(|v| numeric(v).unwrap()).fold(f64::INFINITY, f64::min))
                }
                AggregateFunction::Max => {
                    RefValue::Number(values.iter().map(|v| numeric(v).unwrap()).fold(f64::NEG_INFINITY, f64::max))
                }
                AggregateFunction::CollectSet => RefValue::Set(distinct()),
                AggregateFunction::Exists => unreachable!(),
            };
            RefRow { key, value }
        })
        .collect();

    if let Some(order) = &ast.order_by {
        let columns = ast.columns();
        let idx = columns.iter().position(|c| *c == order.by);
        rows.sort_by(|a, b| {
            let o = match idx {
                Some(i) => a.key[i].cmp(&b.key[i]),
                None => ref_value_cmp(&a.value, &b.value),
            };
            if order.descending {
                o.reverse()
            } else {
                o
            }
        });
    }
    if let Some(limit) = ast.limit {
        rows.truncate(limit as usize);
    }
    Ok(rows)
}

fn ref_value_cmp(a: &RefValue, b: &RefValue) -> Ordering {
    match (a, b) {
        (RefValue::Count(x), RefValue::Count(y)) => x.cmp(y),
        (RefValue::Number(x), RefValue::Number(y)) => x.total_cmp(y),
        (RefValue::Bool(x), RefValue::Bool(y)) => x.cmp(y),
        (RefValue::Set(x), RefValue::Set(y)) => x.cmp(y),
        _ => Ordering::Equal,
    }
}

/// Whether an evaluator value equals an oracle value: exact for discrete
/// aggregates, `rel_tol` relative (unit floor) for numeric ones.
pub fn value_matches(got: &AggregateValue, want: &RefValue, rel_tol: f64) -> bool {
    match (got, want) {
        (AggregateValue::Scalar(ObjectValue::Integer(g)), RefValue::Count(w)) => g == w,
        (AggregateValue::Scalar(ObjectValue::Boolean(g)), RefValue::Bool(w)) => g == w,
        (AggregateValue::Scalar(ObjectValue::Decimal(g)), RefValue::Number(w)) => {
            (g - w).abs() <= rel_tol * w.abs().max(1.0)
        }
        (AggregateValue::Set(g), RefValue::Set(w)) => g == w,
        _ => false,
    }
}
