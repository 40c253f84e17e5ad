//! Command line: local operation on a data directory, or remote operation
//! against a server with `--server`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use auditbox_core::engine::{CollectorBinding, CoverageReport, Recommendation, WorkflowState};
use auditbox_core::ingest::{
    fingerprint, parse_delimited_table, parse_nested_records, parse_triple_file, IngestReceipt, MappingSpec, SourceFormat,
};
use auditbox_core::knowledge::{lint_catalog, load_catalog};
use auditbox_core::model::{AuditGoal, SystemDescription, Timestamp};
use auditbox_core::query::{AggregateValue, QueryResult};
use auditbox_core::report::{AnswerRecord, AuditReport, Params};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::app::{
    AnswerRequest, App, Clock, CreateAudit, IngestRequest, Operation, QueryRequest, ReportRequest, Selection, StateChange,
};
use crate::client::Client;
use crate::config::{Config, Principal};
use crate::error::AppError;
use crate::sim::{self, FaultRates, SimulatorConfig, UseCase};

#[derive(Debug, Parser)]
#[command(name = "auditbox", version, about = "Provenance-based auditing of AI systems")]
pub struct Cli {
    /// Base URL of a running server; without it the command works on the local data directory.
    #[arg(long, global = true, env = "AUDITBOX_SERVER")]
    server: Option<String>,
    /// Bearer token for the server.
    #[arg(long, global = true, env = "AUDITBOX_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Data directory for local operation; overrides the config file.
    #[arg(long, global = true, env = "AUDITBOX_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long, global = true, env = "AUDITBOX_CONFIG")]
    config: Option<PathBuf>,
    /// Fixed clock (ISO-8601) for reproducible local runs.
    #[arg(long, global = true, hide = true)]
    clock: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Audit workflows.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// The audit question catalog.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Mapping specifications for raw source records.
    #[command(subcommand)]
    Mapping(MappingCmd),
    /// Artefact ingestion.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Queries and question answers.
    #[command(subcommand)]
    Query(QueryCmd),
    /// Audit reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Use-case simulators.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Run the HTTP server.
    Serve {
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
    },
    /// Server health and catalog version.
    Health,
}

#[derive(Debug, Args)]
struct AuditId {
    #[arg(long)]
    id: String,
}

#[derive(Debug, Subcommand)]
enum AuditCmd {
    /// Create a draft audit from a system description file.
    Create {
        #[arg(long)]
        system: PathBuf,
        #[arg(long, value_parser = parse_goal)]
        goal: AuditGoal,
        /// Audit id; generated when omitted.
        #[arg(long)]
        id: Option<String>,
    },
    List,
    Show(AuditId),
    /// Ranked question recommendations.
    Recommend(AuditId),
    /// Select audit questions.
    Scope {
        #[command(flatten)]
        audit: AuditId,
        #[arg(long, value_delimiter = ',', required_unless_present = "recommended")]
        questions: Vec<String>,
        /// Select every recommended question.
        #[arg(long, conflicts_with = "questions")]
        recommended: bool,
    },
    /// Register collector bindings from a file holding one binding or a list.
    Bind {
        #[command(flatten)]
        audit: AuditId,
        #[arg(long)]
        file: PathBuf,
    },
    Coverage(AuditId),
    /// Start collecting.
    Start {
        #[command(flatten)]
        audit: AuditId,
        /// Start although coverage is incomplete.
        #[arg(long = "override")]
        coverage_override: bool,
    },
    /// Stop collecting and move to reporting.
    Stop(AuditId),
    Close(AuditId),
    /// Move to an arbitrary state.
    Transition {
        #[command(flatten)]
        audit: AuditId,
        #[arg(long, value_parser = parse_state)]
        to: WorkflowState,
        #[arg(long = "override")]
        coverage_override: bool,
    },
}

#[derive(Debug, Subcommand)]
enum CatalogCmd {
    Show,
    /// Load a newer catalog version.
    Load {
        #[arg(long)]
        file: PathBuf,
    },
    /// Check a catalog document without loading it.
    Lint {
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum MappingCmd {
    List,
    Put {
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum IngestCmd {
    /// Push one source file, a statement file, a simulator output directory or a batch stream.
    Push {
        #[command(flatten)]
        audit: AuditId,
        #[arg(long, requires = "mapping", conflicts_with_all = ["statements", "dir", "stream"])]
        file: Option<PathBuf>,
        #[arg(long)]
        mapping: Option<String>,
        /// JSON list of statement drafts.
        #[arg(long, conflicts_with_all = ["dir", "stream"])]
        statements: Option<PathBuf>,
        /// Simulator output directory.
        #[arg(long, conflicts_with = "stream")]
        dir: Option<PathBuf>,
        /// JSON lines of `{"key", "request"}`; `-` reads stdin.
        #[arg(long)]
        stream: Option<String>,
        /// Idempotency key; defaults to a digest of the request.
        #[arg(long, conflicts_with_all = ["dir", "stream"])]
        key: Option<String>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        component_id: Option<String>,
        #[arg(long)]
        recorded_at: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum QueryCmd {
    /// Evaluate a query AST file.
    Run {
        #[command(flatten)]
        audit: AuditId,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        as_of: Option<u64>,
    },
    /// Answer one selected question.
    Answer {
        #[command(flatten)]
        audit: AuditId,
        #[arg(long)]
        question: String,
        /// Template parameter as name=value; repeatable.
        #[arg(long = "param", value_parser = parse_kv)]
        params: Vec<(String, String)>,
        #[arg(long)]
        as_of: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    Generate {
        #[command(flatten)]
        audit: AuditId,
        /// JSON object of question id to parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Parameter as question.name=value; repeatable.
        #[arg(long = "param", value_parser = parse_kv)]
        param: Vec<(String, String)>,
        #[arg(long)]
        as_of: Option<u64>,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Simulate a use case; writes files with --out, otherwise a batch stream to stdout.
    Run {
        #[arg(long = "uc", value_enum)]
        use_case: UcArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 0.0)]
        run_failure: f64,
        #[arg(long, default_value_t = 0.0)]
        consent_skip: f64,
        #[arg(long, default_value_t = 0.0)]
        correction_rate: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UcArg {
    Uc1,
    Uc2,
}

fn parse_goal(s: &str) -> Result<AuditGoal, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown goal {s:?}"))
}

fn parse_state(s: &str) -> Result<WorkflowState, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown state {s:?}"))
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| format!("expected name=value, got {s:?}"))
}

/// One line of a batch stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamBatch {
    pub key: String,
    pub request: IngestRequest,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {}", .0.code, .0.message)]
    App(AppError),
    #[error("{0}")]
    Other(String),
}

impl From<AppError> for CliError {
    fn from(e: AppError) -> Self {
        CliError::App(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::App(_) | CliError::Other(_) => 1,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

enum Backend {
    Local { app: Arc<App>, principal: Principal },
    Remote(Client),
}

impl Backend {
    fn exec(&self, op: Operation) -> Result<Value, CliError> {
        Ok(match self {
            Backend::Local { app, principal } => app.execute(principal, op)?,
            Backend::Remote(client) => client.execute(&op)?,
        })
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
    stdin: &'a mut dyn Read,
}

impl Ctx<'_> {
    fn config(&self) -> Result<Config, CliError> {
        let mut config = match &self.cli.config {
            Some(path) => Config::load(path).map_err(|e| CliError::Other(e.to_string()))?,
            None => Config::default(),
        };
        if let Some(dir) = &self.cli.data_dir {
            config.data_dir = dir.clone();
        }
        Ok(config)
    }

    fn clock(&self) -> Result<Clock, CliError> {
        match &self.cli.clock {
            Some(s) => Timestamp::parse(s).map(Clock::Fixed).map_err(|e| CliError::Usage(format!("--clock: {e}"))),
            None => Ok(Clock::System),
        }
    }

    fn backend(&self) -> Result<Backend, CliError> {
        match &self.cli.server {
            Some(server) => Ok(Backend::Remote(Client::new(server, self.cli.token.clone())?)),
            None => {
                let app = App::open(self.config()?, self.clock()?)?;
                Ok(Backend::Local { app: Arc::new(app), principal: Principal::local() })
            }
        }
    }

    fn emit(&mut self, value: &Value, text: impl FnOnce(&Value) -> Option<String>) -> Result<(), CliError> {
        let rendered = match self.cli.format {
            Format::Json => None,
            Format::Text => text(value),
        };
        let s = rendered.unwrap_or_else(|| serde_json::to_string_pretty(value).expect("json"));
        write_line(self.out, s.trim_end())
    }
}

/// A closed pipe downstream ends output quietly.
fn write_line(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Other(e.to_string())),
        _ => Ok(()),
    }
}

fn typed<T: serde::de::DeserializeOwned>(value: &Value) -> Option<T> {
    serde_json::from_value(value.clone()).ok()
}

fn text_workflow(v: &Value) -> Option<String> {
    Some(format!(
        "audit {} state={} catalog={}",
        v.get("audit_id")?.as_str()?,
        v.get("state")?.as_str()?,
        v.get("catalog_ref").and_then(|c| Some(format!("{}@{}", c.get("catalog_id")?.as_str()?, c.get("version")?.as_str()?)))?
    ))
}

fn text_coverage(v: &Value) -> Option<String> {
    let report: CoverageReport = typed(v)?;
    let mut s = format!("coverage ratio: {:?}\n", report.overall_ratio);
    for (qid, q) in &report.per_question {
        let _ = write!(s, "  {qid}: {}", if q.covered { "covered" } else { "missing" });
        let missing: Vec<String> = q.missing_patterns.iter().map(|p| serde_json::to_string(p).expect("json")).collect();
        if !missing.is_empty() {
            let _ = write!(s, " {}", missing.join(", "));
        }
        s.push('\n');
    }
    Some(s)
}

fn text_recommendations(v: &Value) -> Option<String> {
    let recs: Vec<Recommendation> = typed(v)?;
    let mut s = String::new();
    for r in recs {
        let _ = writeln!(s, "{:.3}  {}  {}", r.score, r.question.question_id, r.question.text);
    }
    Some(s)
}

fn text_value(v: &AggregateValue) -> String {
    match v {
        AggregateValue::Scalar(x) => x.to_string(),
        AggregateValue::Set(xs) => format!("{{{}}}", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")),
    }
}

fn text_query(v: &Value) -> Option<String> {
    let r: QueryResult = typed(v)?;
    let mut s = format!("watermark {}\n", r.watermark);
    let _ = writeln!(s, "{}\tvalue", r.columns.join("\t"));
    for row in &r.rows {
        let key: Vec<String> = row.key.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "{}\t{}", key.join("\t"), text_value(&row.value));
    }
    Some(s)
}

fn text_answer(v: &Value) -> Option<String> {
    let a: AnswerRecord = typed(v)?;
    let mut s = format!("{} ({})", a.question_id, a.template_id);
    if let Some(verdict) = a.verdict {
        let _ = write!(s, " verdict={}", serde_json::to_value(verdict).ok()?.as_str()?);
    }
    s.push('\n');
    for row in &a.rows {
        let key: Vec<String> = row.key.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "  {}\t{}", key.join("\t"), text_value(&row.value));
    }
    Some(s)
}

fn text_receipt(v: &Value) -> Option<String> {
    let r: IngestReceipt = typed(v)?;
    Some(format!(
        "batch {}: accepted {}, deduplicated {}, rejected {}, sequence {}",
        r.batch_key,
        r.accepted,
        r.deduplicated,
        r.rejected.len(),
        r.store_sequence
    ))
}

fn parse_source(format: SourceFormat, text: &str) -> Result<Vec<Value>, CliError> {
    match format {
        SourceFormat::NestedRecord => parse_nested_records(text),
        SourceFormat::DelimitedTable => parse_delimited_table(text),
        SourceFormat::TripleFile => parse_triple_file(text),
    }
    .map_err(|e| CliError::App(e.into()))
}

fn audit_op(ctx: &mut Ctx, backend: &Backend, cmd: &AuditCmd) -> Result<(), CliError> {
    let transition = |id: &str, target, coverage_override| Operation::Transition {
        audit_id: id.to_owned(),
        body: StateChange { target, coverage_override },
    };
    let (value, text): (Value, fn(&Value) -> Option<String>) = match cmd {
        AuditCmd::Create { system, goal, id } => {
            let system: SystemDescription = read_json(system)?;
            let op = Operation::CreateAudit(CreateAudit { audit_id: id.clone(), system, goal: *goal });
            (backend.exec(op)?, text_workflow)
        }
        AuditCmd::List => (backend.exec(Operation::ListAudits)?, |v| {
            let mut s = String::new();
            for a in v.as_array()? {
                let _ = writeln!(s, "{}", text_workflow(a)?);
            }
            Some(s)
        }),
        AuditCmd::Show(a) => (backend.exec(Operation::GetAudit { audit_id: a.id.clone() })?, text_workflow),
        AuditCmd::Recommend(a) => {
            (backend.exec(Operation::Recommendations { audit_id: a.id.clone() })?, text_recommendations)
        }
        AuditCmd::Scope { audit, questions, recommended } => {
            let question_ids = if *recommended {
                let recs: Vec<Recommendation> =
                    typed(&backend.exec(Operation::Recommendations { audit_id: audit.id.clone() })?)
                        .ok_or_else(|| CliError::Other("unexpected recommendation response".into()))?;
                recs.into_iter().map(|r| r.question.question_id).collect()
            } else {
                questions.clone()
            };
            let op = Operation::SelectQuestions { audit_id: audit.id.clone(), body: Selection { question_ids } };
            (backend.exec(op)?, text_workflow)
        }
        AuditCmd::Bind { audit, file } => {
            let value: Value = read_json(file)?;
            let bindings: Vec<CollectorBinding> = match value {
                Value::Array(_) => serde_json::from_value(value),
                other => serde_json::from_value(other).map(|b| vec![b]),
            }
            .map_err(|e| CliError::Other(format!("{}: {e}", file.display())))?;
            let mut last = Value::Null;
            for binding in bindings {
                last = backend.exec(Operation::RegisterBinding { audit_id: audit.id.clone(), binding })?;
            }
            (last, text_workflow)
        }
        AuditCmd::Coverage(a) => (backend.exec(Operation::Coverage { audit_id: a.id.clone() })?, text_coverage),
        AuditCmd::Start { audit, coverage_override } => {
            (backend.exec(transition(&audit.id, WorkflowState::Collecting, *coverage_override))?, text_workflow)
        }
        AuditCmd::Stop(a) => (backend.exec(transition(&a.id, WorkflowState::Reporting, false))?, text_workflow),
        AuditCmd::Close(a) => (backend.exec(transition(&a.id, WorkflowState::Closed, false))?, text_workflow),
        AuditCmd::Transition { audit, to, coverage_override } => {
            (backend.exec(transition(&audit.id, *to, *coverage_override))?, text_workflow)
        }
    };
    ctx.emit(&value, text)
}

#[allow(clippy::too_many_arguments)]
fn ingest_push(
    ctx: &mut Ctx,
    backend: &Backend,
    audit_id: &str,
    file: &Option<PathBuf>,
    mapping: &Option<String>,
    statements: &Option<PathBuf>,
    dir: &Option<PathBuf>,
    stream: &Option<String>,
    key: &Option<String>,
    context: auditbox_core::ingest::MappingContext,
) -> Result<(), CliError> {
    let batches: Vec<(String, IngestRequest)> = if let Some(dir) = dir {
        sim::batches_from_dir(dir).map_err(|e| CliError::Other(e.to_string()))?.1
    } else if let Some(stream) = stream {
        let reader: Box<dyn BufRead + '_> = if stream == "-" {
            Box::new(BufReader::new(&mut *ctx.stdin))
        } else {
            let f = std::fs::File::open(stream).map_err(|e| CliError::Other(format!("cannot read {stream}: {e}")))?;
            Box::new(BufReader::new(f))
        };
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CliError::Other(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let b: StreamBatch = serde_json::from_str(&line)
                .map_err(|e| CliError::Other(format!("batch stream line {}: {e}", n + 1)))?;
            out.push((b.key, b.request));
        }
        out
    } else {
        let request = if let Some(path) = file {
            let mapping_id = mapping.clone().expect("clap requires --mapping");
            let specs: Vec<MappingSpec> = typed(&backend.exec(Operation::ListMappings)?)
                .ok_or_else(|| CliError::Other("unexpected mapping list response".into()))?;
            let spec = specs
                .iter()
                .find(|s| s.mapping_id == mapping_id)
                .ok_or_else(|| CliError::App(AppError::new(400, "unknown_mapping", format!("unknown mapping {mapping_id:?}"))))?;
            let text = String::from_utf8(read_file(path)?).map_err(|e| CliError::Other(e.to_string()))?;
            let records = parse_source(spec.source_format, &text)?;
            IngestRequest { mapping_id: Some(mapping_id), records: Some(records), statements: None, context }
        } else if let Some(path) = statements {
            let statements: Vec<Value> = read_json(path)?;
            IngestRequest { mapping_id: None, records: None, statements: Some(statements), context }
        } else {
            return Err(CliError::Usage("one of --file, --statements, --dir or --stream is required".into()));
        };
        let key = key.clone().unwrap_or_else(|| {
            format!("cli-{}", &fingerprint(&serde_json::to_vec(&request).expect("json"))[..32])
        });
        vec![(key, request)]
    };
    let mut receipts = Vec::new();
    for (batch_key, body) in batches {
        receipts.push(backend.exec(Operation::Ingest { audit_id: audit_id.to_owned(), batch_key, body })?);
    }
    let value = if receipts.len() == 1 { receipts.pop().expect("one receipt") } else { Value::Array(receipts) };
    ctx.emit(&value, |v| match v {
        Value::Array(items) => {
            let mut s = String::new();
            for item in items {
                let _ = writeln!(s, "{}", text_receipt(item)?);
            }
            Some(s)
        }
        other => text_receipt(other),
    })
}

fn dispatch(ctx: &mut Ctx) -> Result<(), CliError> {
    let cli = ctx.cli;
    match &cli.command {
        Command::Sim(SimCmd::Run { use_case, seed, runs, run_failure, consent_skip, correction_rate, out }) => {
            let config = SimulatorConfig {
                use_case: match use_case {
                    UcArg::Uc1 => UseCase::Uc1,
                    UcArg::Uc2 => UseCase::Uc2,
                },
                seed: *seed,
                n_runs: *runs,
                fault_rates: FaultRates {
                    run_failure: *run_failure,
                    consent_skip: *consent_skip,
                    correction_rate: *correction_rate,
                },
            };
            let output = sim::simulate(&config).map_err(|e| CliError::Usage(e.to_string()))?;
            match out {
                Some(dir) => {
                    output.write_to(dir).map_err(|e| CliError::Other(e.to_string()))?;
                    let files: Vec<&String> = output.files.keys().collect();
                    let value = serde_json::json!({"out": dir, "files": files});
                    ctx.emit(&value, |_| Some(format!("wrote {} files to {}", files.len(), dir.display())))
                }
                None => {
                    let batches = output.batches().map_err(|e| CliError::Other(e.to_string()))?;
                    for (key, request) in batches {
                        let line = serde_json::to_string(&StreamBatch { key, request }).expect("json");
                        write_line(ctx.out, &line)?;
                    }
                    Ok(())
                }
            }
        }
        Command::Catalog(CatalogCmd::Lint { file }) => {
            let catalog = load_catalog(&read_file(file)?).map_err(|e| CliError::App(e.into()))?;
            let warnings = lint_catalog(&catalog);
            let value = serde_json::to_value(&warnings).expect("json");
            ctx.emit(&value, |_| {
                Some(if warnings.is_empty() {
                    "no findings".to_owned()
                } else {
                    warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("\n")
                })
            })
        }
        Command::Serve { listen } => {
            let _ = tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .with_writer(std::io::stderr)
                .try_init();
            let mut config = ctx.config()?;
            if let Some(addr) = listen {
                config.listen = *addr;
            }
            let addr = config.listen;
            let app = Arc::new(App::open(config, ctx.clock()?)?);
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Other(e.to_string()))?;
            runtime
                .block_on(async move {
                    let listener = tokio::net::TcpListener::bind(addr).await?;
                    crate::http::serve(app, listener).await
                })
                .map_err(|e| CliError::Other(format!("cannot serve on {addr}: {e}")))
        }
        command => {
            let backend = ctx.backend()?;
            match command {
                Command::Health => {
                    let v = backend.exec(Operation::Health)?;
                    ctx.emit(&v, |v| {
                        Some(format!(
                            "{} version {} catalog {}@{}",
                            v.get("status")?.as_str()?,
                            v.get("version")?.as_str()?,
                            v.pointer("/catalog/catalog_id")?.as_str()?,
                            v.pointer("/catalog/version")?.as_str()?
                        ))
                    })
                }
                Command::Audit(cmd) => audit_op(ctx, &backend, cmd),
                Command::Catalog(CatalogCmd::Show) => {
                    let v = backend.exec(Operation::GetCatalog)?;
                    ctx.emit(&v, |_| None)
                }
                Command::Catalog(CatalogCmd::Load { file }) => {
                    let v = backend.exec(Operation::PutCatalog { document: read_file(file)? })?;
                    ctx.emit(&v, |v| {
                        Some(format!("current catalog {}@{}", v.get("catalog_id")?.as_str()?, v.get("version")?.as_str()?))
                    })
                }
                Command::Mapping(MappingCmd::List) => {
                    let v = backend.exec(Operation::ListMappings)?;
                    ctx.emit(&v, |v| {
                        let mut s = String::new();
                        for m in v.as_array()? {
                            let _ = writeln!(s, "{}\t{}", m.get("mapping_id")?.as_str()?, m.get("source_format")?.as_str()?);
                        }
                        Some(s)
                    })
                }
                Command::Mapping(MappingCmd::Put { file }) => {
                    let spec = MappingSpec::from_json(&read_file(file)?).map_err(|e| CliError::App(e.into()))?;
                    let v = backend.exec(Operation::PutMapping { mapping_id: spec.mapping_id.clone(), spec })?;
                    ctx.emit(&v, |_| None)
                }
                Command::Ingest(IngestCmd::Push {
                    audit,
                    file,
                    mapping,
                    statements,
                    dir,
                    stream,
                    key,
                    run_id,
                    component_id,
                    recorded_at,
                }) => {
                    let recorded_at = recorded_at
                        .as_deref()
                        .map(Timestamp::parse)
                        .transpose()
                        .map_err(|e| CliError::Usage(format!("--recorded-at: {e}")))?;
                    let context = auditbox_core::ingest::MappingContext {
                        run_id: run_id.clone(),
                        component_id: component_id.clone(),
                        recorded_at,
                    };
                    ingest_push(ctx, &backend, &audit.id, file, mapping, statements, dir, stream, key, context)
                }
                Command::Query(QueryCmd::Run { audit, file, as_of }) => {
                    let query = read_json(file)?;
                    let op = Operation::Query { audit_id: audit.id.clone(), body: QueryRequest { query, as_of: *as_of } };
                    let v = backend.exec(op)?;
                    ctx.emit(&v, text_query)
                }
                Command::Query(QueryCmd::Answer { audit, question, params, as_of }) => {
                    let body = AnswerRequest {
                        question_id: question.clone(),
                        params: params.iter().cloned().collect(),
                        as_of: *as_of,
                    };
                    let v = backend.exec(Operation::Answer { audit_id: audit.id.clone(), body })?;
                    ctx.emit(&v, text_answer)
                }
                Command::Report(ReportCmd::Generate { audit, params, param, as_of, out }) => {
                    let mut per_question: BTreeMap<String, Params> = match params {
                        Some(path) => read_json(path)?,
                        None => BTreeMap::new(),
                    };
                    for (k, v) in param {
                        let (qid, name) = k
                            .split_once('.')
                            .ok_or_else(|| CliError::Usage(format!("--param {k}: expected question.name=value")))?;
                        per_question.entry(qid.to_owned()).or_default().insert(name.to_owned(), v.clone());
                    }
                    let body = ReportRequest { params_per_question: per_question, as_of: *as_of };
                    let v = backend.exec(Operation::Report { audit_id: audit.id.clone(), body })?;
                    let report: Option<AuditReport> = typed(&v);
                    if let (Some(path), Some(report)) = (out, &report) {
                        std::fs::write(path, report.to_json())
                            .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;
                    }
                    ctx.emit(&v, |_| report.map(|r| r.render_text()))
                }
                Command::Sim(_) | Command::Serve { .. } | Command::Catalog(CatalogCmd::Lint { .. }) => {
                    unreachable!("handled above")
                }
            }
        }
    }
}

/// Runs the command line with explicit streams; returns the exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let mut ctx = Ctx { cli: &cli, out: stdout, stdin };
    match dispatch(&mut ctx) {
        Ok(()) => 0,
        Err(e) => {
            match (&e, cli.format) {
                (CliError::App(app), Format::Json) => {
                    let _ = writeln!(stderr, "{}", serde_json::to_string(&app.body()).expect("json"));
                }
                _ => {
                    let _ = writeln!(stderr, "error: {e}");
                }
            }
            e.exit_code()
        }
    }
}
