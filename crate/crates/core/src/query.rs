//! Structured query language over the statement store.
//!
//! A [`QueryAst`] is a conjunctive graph-pattern query: every
//! [`StatementPattern`] in `match` selects statements, patterns sharing a
//! variable are joined on it, filters prune the joined solutions, and the
//! survivors are grouped (optionally by time bucket) and aggregated.
//!
//! Evaluation is pinned to a store watermark so the same query over the same
//! log prefix always yields the same rows, regardless of concurrent ingest.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::sync::OnceLock;
use thiserror::Error;

use crate::ingest::StatementStore;
use crate::model::{validate_predicate, ArtefactStatement, ObjectType, ObjectValue, Timestamp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("aggregate {function} over ?{var} requires numeric values, found {found}")]
    TypeMismatch { function: AggregateFunction, var: String, found: ObjectType },
    #[error("variable ?{0} is not bound by any pattern")]
    UnboundVariable(String),
    #[error("invalid time bucket: {0}")]
    InvalidBucket(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("as_of sequence {requested} is beyond the store watermark {watermark}")]
    WatermarkAhead { requested: u64, watermark: u64 },
    #[error("template parameter error: {0}")]
    Template(String),
}

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

/// Match on a string-valued statement field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Eq(String),
    Prefix(String),
    Var(String),
}

impl Term {
    pub fn exact(&self) -> Option<&str> {
        match self {
            Term::Eq(s) => Some(s),
            _ => None,
        }
    }

    fn var(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v),
            _ => None,
        }
    }
}

/// Typed literal as written in a query; the lexical form may carry
/// `{param}` placeholders until a template is instantiated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Literal {
    #[serde(rename = "type")]
    pub object_type: ObjectType,
    pub value: String,
}

impl Literal {
    pub fn new(object_type: ObjectType, value: impl Into<String>) -> Self {
        Self { object_type, value: value.into() }
    }

    pub fn parse(&self) -> Result<ObjectValue, QueryError> {
        ObjectValue::parse(self.object_type, &self.value).map_err(|e| QueryError::InvalidQuery(e.to_string()))
    }
}

impl From<&ObjectValue> for Literal {
    fn from(value: &ObjectValue) -> Self {
        Literal { object_type: value.object_type(), value: value.lexical() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectTerm {
    Eq(Literal),
    Var(String),
}

/// Constraint over a single statement. Absent fields are wildcards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatementPattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_type: Option<ObjectType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_id: Option<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<Term>,
    /// Binds the statement's `recorded_at` to a variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_at: Option<String>,
}

impl StatementPattern {
    pub fn predicate(predicate: impl Into<String>) -> Self {
        Self { predicate: Some(predicate.into()), ..Self::default() }
    }

    pub fn with_object_type(mut self, object_type: ObjectType) -> Self {
        self.object_type = Some(object_type);
        self
    }

    /// True when at least one field restricts the statement set.
    pub fn is_constrained(&self) -> bool {
        let term = |t: &Option<Term>| matches!(t, Some(Term::Eq(_) | Term::Prefix(_)));
        term(&self.subject)
            || self.predicate.is_some()
            || matches!(self.object, Some(ObjectTerm::Eq(_)))
            || self.object_type.is_some()
            || term(&self.component_id)
            || term(&self.run_id)
    }

    /// Structural validation shared by queries, catalogs and bindings.
    pub fn validate(&self) -> Result<(), QueryError> {
        if !self.is_constrained() {
            return Err(QueryError::InvalidQuery("pattern constrains no field".into()));
        }
        if let Some(p) = &self.predicate {
            validate_predicate(p).map_err(|e| QueryError::InvalidQuery(e.to_string()))?;
        }
        if let (Some(ObjectTerm::Eq(lit)), Some(t)) = (&self.object, self.object_type) {
            if lit.object_type != t {
                return Err(QueryError::InvalidQuery(format!(
                    "object literal of type {} contradicts object_type {t}",
                    lit.object_type
                )));
            }
        }
        for name in self.variables() {
            check_var_name(name)?;
        }
        Ok(())
    }

    /// Variables in field order (subject, object, component, run, recorded_at).
    pub fn variables(&self) -> Vec<&str> {
        let mut vars = Vec::new();
        vars.extend(self.subject.as_ref().and_then(Term::var));
        if let Some(ObjectTerm::Var(v)) = &self.object {
            vars.push(v.as_str());
        }
        vars.extend(self.component_id.as_ref().and_then(Term::var));
        vars.extend(self.run_id.as_ref().and_then(Term::var));
        vars.extend(self.recorded_at.as_deref());
        vars
    }

    /// Whether `self`, as a provided pattern, covers `required`: same
    /// predicate, compatible component constraint, compatible object type.
    pub fn subsumes(&self, required: &StatementPattern) -> bool {
        let component = |p: &StatementPattern| p.component_id.as_ref().and_then(Term::exact).map(str::to_owned);
        self.predicate == required.predicate
            && (component(self).is_none() || component(self) == component(required))
            && (required.object_type.is_none() || required.object_type == self.object_type)
    }

    /// Tests the non-variable constraints against a statement.
    pub fn matches(&self, statement: &ArtefactStatement) -> Result<bool, QueryError> {
        let compiled = CompiledPattern::compile(self, &mut VarTable::default())?;
        Ok(compiled.bind(statement, &mut Vec::new()))
    }
}

fn check_var_name(name: &str) -> Result<(), QueryError> {
    let valid = !name.is_empty()
        && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if valid {
        Ok(())
    } else {
        Err(QueryError::InvalidQuery(format!("invalid variable name {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Var(String),
    Literal(Literal),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    StartsWith,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filter {
    pub left: Operand,
    pub op: CmpOp,
    pub right: Operand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregateFunction {
    Count,
    CountDistinct,
    Avg,
    Min,
    Max,
    Sum,
    Exists,
    CollectSet,
}

impl AggregateFunction {
    pub fn requires_numeric(self) -> bool {
        matches!(self, Self::Avg | Self::Sum | Self::Min | Self::Max)
    }

    fn requires_var(self) -> bool {
        !matches!(self, Self::Count | Self::Exists)
    }
}

impl fmt::Display for AggregateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Count => "COUNT",
            Self::CountDistinct => "COUNT_DISTINCT",
            Self::Avg => "AVG",
            Self::Min => "MIN",
            Self::Max => "MAX",
            Self::Sum => "SUM",
            Self::Exists => "EXISTS",
            Self::CollectSet => "COLLECT_SET",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub function: AggregateFunction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<String>,
}

/// Bucket width written as `<n><unit>` with unit one of `ms`, `s`, `m`, `h`, `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketWidth(i64);

impl BucketWidth {
    pub const DAY: BucketWidth = BucketWidth(86_400_000);

    pub fn from_millis(millis: i64) -> Option<Self> {
        (millis > 0).then_some(BucketWidth(millis))
    }

    pub fn as_millis(self) -> i64 {
        self.0
    }
}

impl FromStr for BucketWidth {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
        let (count, unit) = s.split_at(split);
        let count: i64 = count.parse().map_err(|_| QueryError::InvalidBucket(format!("bad width {s:?}")))?;
        let unit_ms = match unit {
            "ms" => 1,
            "s" => 1_000,
            "m" => 60_000,
            "h" => 3_600_000,
            "d" => 86_400_000,
            _ => return Err(QueryError::InvalidBucket(format!("unknown unit in {s:?}"))),
        };
        count
            .checked_mul(unit_ms)
            .and_then(BucketWidth::from_millis)
            .ok_or_else(|| QueryError::InvalidBucket(format!("width {s:?} must be positive")))
    }
}

impl fmt::Display for BucketWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (unit, ms) in [("d", 86_400_000), ("h", 3_600_000), ("m", 60_000), ("s", 1_000)] {
            if self.0 % ms == 0 {
                return write!(f, "{}{unit}", self.0 / ms);
            }
        }
        write!(f, "{}ms", self.0)
    }
}

impl Serialize for BucketWidth {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BucketWidth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBucket {
    pub var: String,
    pub width: BucketWidth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderBy {
    /// `"value"` for the aggregate, otherwise a grouping variable.
    pub by: String,
    #[serde(default)]
    pub descending: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryAst {
    #[serde(rename = "match")]
    pub patterns: Vec<StatementPattern>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filters: Vec<Filter>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_by: Vec<String>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_bucket: Option<TimeBucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_by: Option<OrderBy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
}

impl QueryAst {
    /// Output columns: grouping variables, then the time-bucket variable.
    /// EXISTS ignores grouping and has no columns.
    pub fn columns(&self) -> Vec<String> {
        if self.aggregate.function == AggregateFunction::Exists {
            return Vec::new();
        }
        let mut cols = self.group_by.clone();
        if let Some(bucket) = &self.time_bucket {
            cols.push(bucket.var.clone());
        }
        cols
    }

    /// Full structural validation.
    pub fn validate(&self) -> Result<(), QueryError> {
        CompiledQuery::compile(self).map(|_| ())
    }

    fn literal_strings_mut(&mut self) -> Vec<&mut String> {
        let mut out = Vec::new();
        for p in &mut self.patterns {
            for term in [&mut p.subject, &mut p.component_id, &mut p.run_id].into_iter().flatten() {
                match term {
                    Term::Eq(s) | Term::Prefix(s) => out.push(s),
                    Term::Var(_) => {}
                }
            }
            if let Some(ObjectTerm::Eq(lit)) = &mut p.object {
                out.push(&mut lit.value);
            }
        }
        for f in &mut self.filters {
            for operand in [&mut f.left, &mut f.right] {
                if let Operand::Literal(lit) = operand {
                    out.push(&mut lit.value);
                }
            }
        }
        out
    }

    /// Names of `{param}` placeholders in literal positions.
    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut copy = self.clone();
        copy.literal_strings_mut()
            .into_iter()
            .flat_map(|s| placeholder_re().captures_iter(s).map(|c| c[1].to_owned()).collect::<Vec<_>>())
            .collect()
    }

    /// Substitutes `{param}` placeholders in every literal position.
    pub fn instantiate(&self, params: &BTreeMap<String, String>) -> Result<QueryAst, QueryError> {
        let mut out = self.clone();
        for s in out.literal_strings_mut() {
            let mut missing = None;
            let replaced = placeholder_re().replace_all(s, |c: &regex::Captures<'_>| match params.get(&c[1]) {
                Some(v) => v.clone(),
                None => {
                    missing = Some(c[1].to_owned());
                    String::new()
                }
            });
            if let Some(name) = missing {
                return Err(QueryError::Template(format!("parameter {name:?} not supplied")));
            }
            *s = replaced.into_owned();
        }
        Ok(out)
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"))
}

// ---------------------------------------------------------------------------
// Templates and answers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Boolean,
    Scalar,
    Set,
    Timeseries,
}

/// Which truth value of a boolean template counts as a pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassWhen {
    #[default]
    True,
    False,
}

impl PassWhen {
    fn is_default(&self) -> bool {
        *self == PassWhen::True
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateParam {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

/// Predefined, parameterised query bound to audit questions.
///
/// Boolean templates may carry a `domain` query: when it finds no evidence
/// the verdict is `no_data` instead of `fail`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTemplate {
    pub template_id: String,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parameters: Vec<TemplateParam>,
    pub ast: QueryAst,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<QueryAst>,
    #[serde(default, skip_serializing_if = "PassWhen::is_default")]
    pub pass_when: PassWhen,
}

impl QueryTemplate {
    pub fn validate(&self) -> Result<(), QueryError> {
        let declared: BTreeSet<String> = self.parameters.iter().map(|p| p.name.clone()).collect();
        if declared.len() != self.parameters.len() {
            return Err(QueryError::Template("duplicate parameter name".into()));
        }
        let mut used = self.ast.placeholders();
        if let Some(domain) = &self.domain {
            used.extend(domain.placeholders());
        }
        if let Some(name) = used.difference(&declared).next() {
            return Err(QueryError::Template(format!("placeholder {{{name}}} is not declared")));
        }
        if let Some(name) = declared.difference(&used).next() {
            return Err(QueryError::Template(format!("parameter {name:?} is never used")));
        }
        let sample: BTreeMap<String, String> = declared.iter().map(|n| (n.clone(), sample_value(self, n))).collect();
        let (ast, domain) = self.instantiate(&sample)?;
        ast.validate()?;
        if let Some(domain) = domain {
            domain.validate()?;
        }
        if self.answer_type != AnswerType::Boolean && (self.domain.is_some() || !self.pass_when.is_default()) {
            return Err(QueryError::Template("domain and pass_when apply to boolean templates only".into()));
        }
        Ok(())
    }

    pub fn instantiate(&self, params: &BTreeMap<String, String>) -> Result<(QueryAst, Option<QueryAst>), QueryError> {
        let ast = self.ast.instantiate(params)?;
        let domain = self.domain.as_ref().map(|d| d.instantiate(params)).transpose()?;
        Ok((ast, domain))
    }

    pub fn missing_params(&self, params: &BTreeMap<String, String>) -> Vec<String> {
        self.parameters.iter().filter(|p| !params.contains_key(&p.name)).map(|p| p.name.clone()).collect()
    }
}

/// A value that lets a template's literals parse for structural validation.
fn sample_value(template: &QueryTemplate, param: &str) -> String {
    let needle = format!("{{{param}}}");
    let mut literal_types = Vec::new();
    let mut asts = vec![template.ast.clone()];
    asts.extend(template.domain.clone());
    for ast in &asts {
        for p in &ast.patterns {
            if let Some(ObjectTerm::Eq(lit)) = &p.object {
                if lit.value.contains(&needle) {
                    literal_types.push(lit.object_type);
                }
            }
        }
        for f in &ast.filters {
            for operand in [&f.left, &f.right] {
                if let Operand::Literal(lit) = operand {
                    if lit.value.contains(&needle) {
                        literal_types.push(lit.object_type);
                    }
                }
            }
        }
    }
    match literal_types.first() {
        Some(ObjectType::Integer | ObjectType::Decimal) => "0".into(),
        Some(ObjectType::Boolean) => "true".into(),
        Some(ObjectType::Timestamp) => "1970-01-01T00:00:00.000Z".into(),
        _ => "x".into(),
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Aggregate output: a single typed value, or a sorted set of values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AggregateValue {
    Scalar(ObjectValue),
    Set(Vec<ObjectValue>),
}

impl AggregateValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            AggregateValue::Scalar(ObjectValue::Boolean(b)) => Some(*b),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AggregateValue::Scalar(v) => v.as_f64(),
            AggregateValue::Set(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub key: Vec<ObjectValue>,
    pub value: AggregateValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
    /// Store sequence the evaluation was pinned to.
    pub watermark: u64,
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

#[derive(Default)]
struct VarTable {
    names: Vec<String>,
}

impl VarTable {
    fn slot(&mut self, name: &str) -> usize {
        match self.names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_owned());
                self.names.len() - 1
            }
        }
    }

    fn lookup(&self, name: &str) -> Result<usize, QueryError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| QueryError::UnboundVariable(name.to_owned()))
    }
}

enum CTerm {
    Eq(String),
    Prefix(String),
    Var(usize),
}

impl CTerm {
    fn compile(term: &Term, vars: &mut VarTable) -> Self {
        match term {
            Term::Eq(s) => CTerm::Eq(s.clone()),
            Term::Prefix(s) => CTerm::Prefix(s.clone()),
            Term::Var(v) => CTerm::Var(vars.slot(v)),
        }
    }

    fn bind(&self, value: Option<&str>, make: fn(&str) -> ObjectValue, out: &mut Vec<(usize, ObjectValue)>) -> bool {
        let Some(value) = value else { return false };
        match self {
            CTerm::Eq(s) => s == value,
            CTerm::Prefix(p) => value.starts_with(p.as_str()),
            CTerm::Var(slot) => push_binding(out, *slot, make(value)),
        }
    }
}

fn push_binding(out: &mut Vec<(usize, ObjectValue)>, slot: usize, value: ObjectValue) -> bool {
    match out.iter().find(|(s, _)| *s == slot) {
        Some((_, existing)) => *existing == value,
        None => {
            out.push((slot, value));
            true
        }
    }
}

enum CObject {
    Eq(ObjectValue),
    Var(usize),
}

pub(crate) struct CompiledPattern {
    subject: Option<CTerm>,
    predicate: Option<String>,
    object: Option<CObject>,
    object_type: Option<ObjectType>,
    component: Option<CTerm>,
    run: Option<CTerm>,
    recorded_at: Option<usize>,
    slots: Vec<usize>,
}

impl CompiledPattern {
    fn compile(pattern: &StatementPattern, vars: &mut VarTable) -> Result<Self, QueryError> {
        pattern.validate()?;
        let object = match &pattern.object {
            Some(ObjectTerm::Eq(lit)) => Some(CObject::Eq(lit.parse()?)),
            Some(ObjectTerm::Var(v)) => Some(CObject::Var(vars.slot(v))),
            None => None,
        };
        let compiled = CompiledPattern {
            subject: pattern.subject.as_ref().map(|t| CTerm::compile(t, vars)),
            predicate: pattern.predicate.clone(),
            object,
            object_type: pattern.object_type,
            component: pattern.component_id.as_ref().map(|t| CTerm::compile(t, vars)),
            run: pattern.run_id.as_ref().map(|t| CTerm::compile(t, vars)),
            recorded_at: pattern.recorded_at.as_deref().map(|v| vars.slot(v)),
            slots: Vec::new(),
        };
        let mut slots: Vec<usize> = pattern.variables().iter().map(|v| vars.slot(v)).collect();
        slots.sort_unstable();
        slots.dedup();
        Ok(CompiledPattern { slots, ..compiled })
    }

    pub(crate) fn fixed_predicate(&self) -> Option<&str> {
        self.predicate.as_deref()
    }

    pub(crate) fn fixed_run(&self) -> Option<&str> {
        match &self.run {
            Some(CTerm::Eq(s)) => Some(s),
            _ => None,
        }
    }

    pub(crate) fn fixed_component(&self) -> Option<&str> {
        match &self.component {
            Some(CTerm::Eq(s)) => Some(s),
            _ => None,
        }
    }

    /// Checks constants and collects variable bindings; `false` on mismatch.
    pub(crate) fn bind(&self, st: &ArtefactStatement, out: &mut Vec<(usize, ObjectValue)>) -> bool {
        out.clear();
        if let Some(p) = &self.predicate {
            if p != st.predicate() {
                return false;
            }
        }
        if let Some(t) = self.object_type {
            if st.object().object_type() != t {
                return false;
            }
        }
        if let Some(s) = &self.subject {
            if !s.bind(Some(st.subject()), |v| ObjectValue::Entity(v.to_owned()), out) {
                return false;
            }
        }
        match &self.object {
            Some(CObject::Eq(v)) if v != st.object() => return false,
            Some(CObject::Var(slot)) if !push_binding(out, *slot, st.object().clone()) => return false,
            _ => {}
        }
        if let Some(c) = &self.component {
            if !c.bind(Some(st.component_id()), |v| ObjectValue::String(v.to_owned()), out) {
                return false;
            }
        }
        if let Some(r) = &self.run {
            if !r.bind(st.run_id(), |v| ObjectValue::String(v.to_owned()), out) {
                return false;
            }
        }
        if let Some(slot) = self.recorded_at {
            if !push_binding(out, slot, ObjectValue::Timestamp(st.recorded_at())) {
                return false;
            }
        }
        true
    }
}

/// Compiles a single pattern for store scans.
pub(crate) fn compile_pattern(pattern: &StatementPattern) -> Result<CompiledPattern, QueryError> {
    CompiledPattern::compile(pattern, &mut VarTable::default())
}

enum COperand {
    Var(usize),
    Value(ObjectValue),
}

struct CFilter {
    left: COperand,
    op: CmpOp,
    right: COperand,
}

struct CompiledQuery {
    patterns: Vec<CompiledPattern>,
    var_names: Vec<String>,
    filters: Vec<CFilter>,
    group_slots: Vec<usize>,
    bucket: Option<(usize, i64)>,
    function: AggregateFunction,
    agg_slot: Option<usize>,
    order: Option<(Option<usize>, bool)>,
    limit: Option<usize>,
    columns: Vec<String>,
}

/// Types a variable can take given the positions that bind it.
fn static_types(ast: &QueryAst, name: &str) -> Option<BTreeSet<ObjectType>> {
    let mut possible: Option<BTreeSet<ObjectType>> = None;
    let mut narrow = |types: BTreeSet<ObjectType>| {
        possible = Some(match possible.take() {
            Some(p) => p.intersection(&types).copied().collect(),
            None => types,
        });
    };
    for p in &ast.patterns {
        if p.subject.as_ref().and_then(Term::var) == Some(name) {
            narrow([ObjectType::Entity].into());
        }
        if p.component_id.as_ref().and_then(Term::var) == Some(name)
            || p.run_id.as_ref().and_then(Term::var) == Some(name)
        {
            narrow([ObjectType::String].into());
        }
        if p.recorded_at.as_deref() == Some(name) {
            narrow([ObjectType::Timestamp].into());
        }
        if matches!(&p.object, Some(ObjectTerm::Var(v)) if v == name) {
            match p.object_type {
                Some(t) => narrow([t].into()),
                None => narrow(ObjectType::ALL.into()),
            }
        }
    }
    possible
}

impl CompiledQuery {
    fn compile(ast: &QueryAst) -> Result<Self, QueryError> {
        if ast.patterns.is_empty() {
            return Err(QueryError::InvalidQuery("match must contain at least one pattern".into()));
        }
        if ast.limit == Some(0) {
            return Err(QueryError::InvalidQuery("limit must be at least 1".into()));
        }
        let mut vars = VarTable::default();
        let patterns = ast
            .patterns
            .iter()
            .map(|p| CompiledPattern::compile(p, &mut vars))
            .collect::<Result<Vec<_>, _>>()?;

        let operand = |o: &Operand| -> Result<COperand, QueryError> {
            match o {
                Operand::Var(v) => vars.lookup(v).map(COperand::Var),
                Operand::Literal(lit) => lit.parse().map(COperand::Value),
            }
        };
        let filters = ast
            .filters
            .iter()
            .map(|f| Ok(CFilter { left: operand(&f.left)?, op: f.op, right: operand(&f.right)? }))
            .collect::<Result<Vec<_>, QueryError>>()?;

        let function = ast.aggregate.function;
        let agg_slot = match (&ast.aggregate.var, function.requires_var()) {
            (Some(v), _) => Some(vars.lookup(v)?),
            (None, true) => {
                return Err(QueryError::InvalidQuery(format!("{function} requires an aggregate variable")))
            }
            (None, false) => None,
        };
        if let (Some(var), true) = (&ast.aggregate.var, function.requires_numeric()) {
            let types = static_types(ast, var).unwrap_or_default();
            if let Some(&found) = types.first().filter(|_| !types.iter().any(|t| t.is_numeric())) {
                return Err(QueryError::TypeMismatch { function, var: var.clone(), found });
            }
        }

        let exists = function == AggregateFunction::Exists;
        let group_slots = if exists {
            Vec::new()
        } else {
            ast.group_by.iter().map(|g| vars.lookup(g)).collect::<Result<Vec<_>, _>>()?
        };
        let bucket = match (&ast.time_bucket, exists) {
            (Some(b), false) => {
                let slot = vars.lookup(&b.var)?;
                let types = static_types(ast, &b.var).unwrap_or_default();
                if !types.contains(&ObjectType::Timestamp) {
                    return Err(QueryError::InvalidBucket(format!("?{} is never bound to a timestamp", b.var)));
                }
                Some((slot, b.width.as_millis()))
            }
            _ => None,
        };

        let columns = ast.columns();
        let order = match &ast.order_by {
            None => None,
            Some(o) if o.by == "value" => Some((None, o.descending)),
            Some(o) => match columns.iter().position(|c| *c == o.by) {
                Some(i) => Some((Some(i), o.descending)),
                None => return Err(QueryError::InvalidQuery(format!("order_by {:?} is not an output column", o.by))),
            },
        };

        Ok(CompiledQuery {
            patterns,
            var_names: vars.names,
            filters,
            group_slots,
            bucket,
            function,
            agg_slot,
            order,
            limit: ast.limit.map(|l| usize::try_from(l).unwrap_or(usize::MAX)),
            columns,
        })
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Solution {
    /// Sequence of the statement matched by each pattern, in `match` order.
    seqs: Vec<u64>,
    values: Vec<Option<ObjectValue>>,
}

/// Ordering used by filters: numbers compare numerically across integer and
/// decimal; other values compare only with their own type.
pub fn compare_values(a: &ObjectValue, b: &ObjectValue) -> Option<Ordering> {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x.partial_cmp(&y),
        _ if a.object_type() == b.object_type() => Some(a.cmp(b)),
        _ => None,
    }
}

/// Filter predicate. Incomparable operands fail every operator except `ne`.
pub fn apply_op(op: CmpOp, a: &ObjectValue, b: &ObjectValue) -> bool {
    if op == CmpOp::StartsWith {
        return match (a.as_str(), b.as_str()) {
            (Some(x), Some(y)) => x.starts_with(y),
            _ => false,
        };
    }
    match compare_values(a, b) {
        None => op == CmpOp::Ne,
        Some(ord) => match op {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
            CmpOp::StartsWith => unreachable!(),
        },
    }
}

/// Neumaier compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut compensation = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            compensation += (sum - t) + v;
        } else {
            compensation += (v - t) + sum;
        }
        sum = t;
    }
    sum + compensation
}

/// Evaluates a query against the store prefix with sequence `<= as_of`
/// (default: the current watermark).
pub fn evaluate(query: &QueryAst, store: &StatementStore, as_of: Option<u64>) -> Result<QueryResult, QueryError> {
    let watermark = store.watermark();
    let as_of = match as_of {
        Some(requested) if requested > watermark => {
            return Err(QueryError::WatermarkAhead { requested, watermark })
        }
        Some(w) => w,
        None => watermark,
    };
    let compiled = CompiledQuery::compile(query)?;
    let solutions = join(&compiled, store, as_of);
    let solutions: Vec<Solution> = solutions
        .into_iter()
        .filter(|s| compiled.filters.iter().all(|f| filter_holds(f, s)))
        .collect();

    let rows = if compiled.function == AggregateFunction::Exists {
        vec![ResultRow { key: Vec::new(), value: AggregateValue::Scalar(ObjectValue::Boolean(!solutions.is_empty())) }]
    } else {
        aggregate(&compiled, solutions)?
    };
    Ok(QueryResult { columns: compiled.columns, rows, watermark: as_of })
}

fn operand_value<'a>(o: &'a COperand, s: &'a Solution) -> &'a ObjectValue {
    match o {
        COperand::Var(slot) => s.values[*slot].as_ref().expect("all variables bound after join"),
        COperand::Value(v) => v,
    }
}

fn filter_holds(f: &CFilter, s: &Solution) -> bool {
    apply_op(f.op, operand_value(&f.left, s), operand_value(&f.right, s))
}

/// One stored match for a pattern: its sequence number and variable bindings.
type PatternMatch = (u64, Vec<(usize, ObjectValue)>);

fn join(q: &CompiledQuery, store: &StatementStore, as_of: u64) -> Vec<Solution> {
    let n_vars = q.var_names.len();
    let n_patterns = q.patterns.len();

    let mut matches: Vec<Vec<PatternMatch>> = Vec::with_capacity(n_patterns);
    let mut scratch = Vec::new();
    for p in &q.patterns {
        let mut found = Vec::new();
        for stored in store.candidates(p, as_of) {
            if p.bind(&stored.statement, &mut scratch) {
                found.push((stored.seq, scratch.clone()));
            }
        }
        matches.push(found);
    }

    // Greedy join order: smallest first, then prefer patterns connected to
    // the already bound variables.
    let mut remaining: Vec<usize> = (0..n_patterns).collect();
    let mut bound = vec![false; n_vars];
    let mut solutions = vec![Solution { seqs: vec![0; n_patterns], values: vec![None; n_vars] }];
    while !remaining.is_empty() {
        let connected = |i: &usize| q.patterns[*i].slots.iter().any(|s| bound[*s]);
        let pick = remaining
            .iter()
            .copied()
            .filter(|i| connected(i) || bound.iter().all(|b| !b))
            .min_by_key(|i| (matches[*i].len(), *i))
            .or_else(|| remaining.iter().copied().min_by_key(|i| (matches[*i].len(), *i)))
            .expect("remaining is non-empty");
        remaining.retain(|i| *i != pick);

        let pattern = &q.patterns[pick];
        let shared: Vec<usize> = pattern.slots.iter().copied().filter(|s| bound[*s]).collect();
        let mut table: HashMap<Vec<&ObjectValue>, Vec<usize>> = HashMap::new();
        for (mi, (_, bindings)) in matches[pick].iter().enumerate() {
            let key: Vec<&ObjectValue> = shared
                .iter()
                .map(|s| &bindings.iter().find(|(slot, _)| slot == s).expect("pattern binds its slots").1)
                .collect();
            table.entry(key).or_default().push(mi);
        }

        let mut next = Vec::new();
        for sol in &solutions {
            let key: Vec<&ObjectValue> = shared.iter().map(|s| sol.values[*s].as_ref().expect("bound")).collect();
            if let Some(hits) = table.get(&key) {
                for &mi in hits {
                    let (seq, bindings) = &matches[pick][mi];
                    let mut values = sol.values.clone();
                    for (slot, v) in bindings {
                        values[*slot] = Some(v.clone());
                    }
                    let mut seqs = sol.seqs.clone();
                    seqs[pick] = *seq;
                    next.push(Solution { seqs, values });
                }
            }
        }
        solutions = next;
        for s in &pattern.slots {
            bound[*s] = true;
        }
        if solutions.is_empty() {
            break;
        }
    }
    solutions.sort_by(|a, b| a.seqs.cmp(&b.seqs));
    solutions
}

fn aggregate(q: &CompiledQuery, solutions: Vec<Solution>) -> Result<Vec<ResultRow>, QueryError> {
    if let (Some(slot), true) = (q.agg_slot, q.function.requires_numeric()) {
        for s in &solutions {
            let v = s.values[slot].as_ref().expect("bound");
            if v.as_f64().is_none() {
                return Err(QueryError::TypeMismatch {
                    function: q.function,
                    var: q.var_names[slot].clone(),
                    found: v.object_type(),
                });
            }
        }
    }

    let mut groups: BTreeMap<Vec<ObjectValue>, Vec<&Solution>> = BTreeMap::new();
    for s in &solutions {
        let mut key: Vec<ObjectValue> =
            q.group_slots.iter().map(|slot| s.values[*slot].clone().expect("bound")).collect();
        if let Some((slot, width)) = q.bucket {
            let ObjectValue::Timestamp(t) = s.values[slot].as_ref().expect("bound") else {
                return Err(QueryError::InvalidBucket(format!(
                    "?{} bound to a non-timestamp value",
                    q.var_names[slot]
                )));
            };
            let start = t.as_millis().div_euclid(width) * width;
            let start = Timestamp::from_millis(start)
                .ok_or_else(|| QueryError::InvalidBucket("bucket start outside calendar range".into()))?;
            key.push(ObjectValue::Timestamp(start));
        }
        groups.entry(key).or_default().push(s);
    }

    let mut rows: Vec<ResultRow> = groups
        .into_iter()
        .map(|(key, members)| {
            let values = || members.iter().map(|s| s.values[q.agg_slot.expect("checked")].as_ref().expect("bound"));
            let numbers = || values().map(|v| v.as_f64().expect("checked numeric"));
            let value = match q.function {
                AggregateFunction::Count => ObjectValue::Integer(members.len() as i64).into(),
                AggregateFunction::CountDistinct => {
                    ObjectValue::Integer(values().collect::<BTreeSet<_>>().len() as i64).into()
                }
                AggregateFunction::Sum => ObjectValue::Decimal(compensated_sum(numbers())).into(),
                AggregateFunction::Avg => {
                    ObjectValue::Decimal(compensated_sum(numbers()) / members.len() as f64).into()
                }
                AggregateFunction::Min => ObjectValue::Decimal(numbers().fold(f64::INFINITY, f64::min)).into(),
                AggregateFunction::Max => ObjectValue::Decimal(numbers().fold(f64::NEG_INFINITY, f64::max)).into(),
                AggregateFunction::CollectSet => {
                    AggregateValue::Set(values().cloned().collect::<BTreeSet<_>>().into_iter().collect())
                }
                AggregateFunction::Exists => unreachable!("handled before grouping"),
            };
            ResultRow { key, value }
        })
        .collect();

    if let Some((column, descending)) = q.order {
        rows.sort_by(|a, b| {
            let ord = match column {
                None => a.value.cmp(&b.value),
                Some(i) => a.key[i].cmp(&b.key[i]),
            };
            if descending {
                ord.reverse()
            } else {
                ord
            }
        });
    }
    if let Some(limit) = q.limit {
        rows.truncate(limit);
    }
    Ok(rows)
}

impl From<ObjectValue> for AggregateValue {
    fn from(v: ObjectValue) -> Self {
        AggregateValue::Scalar(v)
    }
}
