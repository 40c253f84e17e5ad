//! Service facade over the core engine.
//!
//! Every externally visible operation is an [`Operation`]; the HTTP server,
//! the local command line and the remote client all go through
//! [`App::execute`], so the surfaces cannot drift apart.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use auditbox_core::engine::{
    recommend_questions, AuditWorkflow, CatalogRef, CollectorBinding, EventLog, WorkflowState,
};
use auditbox_core::ingest::{self, fingerprint, map_records, BatchItem, Durability, IngestBatch, MappingContext, MappingSpec, StatementStore};
use auditbox_core::knowledge::{compare_versions, default_catalog, load_catalog, serialize_catalog, Catalog};
use auditbox_core::model::{AuditGoal, StatementDraft, SystemDescription, Timestamp};
use auditbox_core::query::{evaluate, QueryAst};
use auditbox_core::report::{answer_question, generate_report, Params};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::config::{Config, Permission, Principal};
use crate::error::AppError;
use crate::sim;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Source of "now" for events, commits and answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    /// Always returns the same instant; used for reproducible fixtures.
    Fixed(Timestamp),
}

impl Clock {
    pub fn now(self) -> Timestamp {
        match self {
            Clock::System => Timestamp::now(),
            Clock::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateAudit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_id: Option<String>,
    pub system: SystemDescription,
    pub goal: AuditGoal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub question_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateChange {
    pub target: WorkflowState,
    #[serde(default, rename = "override")]
    pub coverage_override: bool,
}

/// Body of an artefact batch: raw records with a mapping, or statement drafts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statements: Option<Vec<Value>>,
    #[serde(default)]
    pub context: MappingContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub query: QueryAst,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_of: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub question_id: String,
    #[serde(default)]
    pub params: Params,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_of: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRequest {
    #[serde(default)]
    pub params_per_question: BTreeMap<String, Params>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_of: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub audit_id: String,
    pub state: WorkflowState,
    pub catalog_ref: CatalogRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub catalog: CatalogRef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operation {
    Health,
    ListAudits,
    CreateAudit(CreateAudit),
    GetAudit { audit_id: String },
    Recommendations { audit_id: String },
    SelectQuestions { audit_id: String, body: Selection },
    RegisterBinding { audit_id: String, binding: CollectorBinding },
    Coverage { audit_id: String },
    Transition { audit_id: String, body: StateChange },
    Ingest { audit_id: String, batch_key: String, body: IngestRequest },
    Query { audit_id: String, body: QueryRequest },
    Answer { audit_id: String, body: AnswerRequest },
    Report { audit_id: String, body: ReportRequest },
    GetCatalog,
    PutCatalog { document: Vec<u8> },
    ListMappings,
    PutMapping { mapping_id: String, spec: MappingSpec },
}

/// Operation without its arguments; carries the permission matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Health,
    ListAudits,
    CreateAudit,
    GetAudit,
    Recommendations,
    SelectQuestions,
    RegisterBinding,
    Coverage,
    Transition,
    Ingest,
    Query,
    Answer,
    Report,
    GetCatalog,
    PutCatalog,
    ListMappings,
    PutMapping,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Health,
        OpKind::ListAudits,
        OpKind::CreateAudit,
        OpKind::GetAudit,
        OpKind::Recommendations,
        OpKind::SelectQuestions,
        OpKind::RegisterBinding,
        OpKind::Coverage,
        OpKind::Transition,
        OpKind::Ingest,
        OpKind::Query,
        OpKind::Answer,
        OpKind::Report,
        OpKind::GetCatalog,
        OpKind::PutCatalog,
        OpKind::ListMappings,
        OpKind::PutMapping,
    ];

    /// Permission the caller needs; `None` for the unauthenticated health check.
    pub fn permission(self) -> Option<Permission> {
        use OpKind::*;
        Some(match self {
            Health => return None,
            CreateAudit | Recommendations | SelectQuestions | Transition => Permission::ScopeAudit,
            RegisterBinding | PutMapping => Permission::RegisterBinding,
            Ingest => Permission::Ingest,
            ListAudits | GetAudit | Coverage | Query | Answer | GetCatalog | ListMappings => Permission::Query,
            Report => Permission::Report,
            PutCatalog => Permission::Admin,
        })
    }

    pub fn name(self) -> &'static str {
        use OpKind::*;
        match self {
            Health => "health",
            ListAudits => "list_audits",
            CreateAudit => "create_audit",
            GetAudit => "get_audit",
            Recommendations => "recommendations",
            SelectQuestions => "select_questions",
            RegisterBinding => "register_binding",
            Coverage => "coverage",
            Transition => "transition",
            Ingest => "ingest",
            Query => "query",
            Answer => "answer",
            Report => "report",
            GetCatalog => "get_catalog",
            PutCatalog => "put_catalog",
            ListMappings => "list_mappings",
            PutMapping => "put_mapping",
        }
    }

    /// Fails unless `principal` may run operations of this kind.
    pub fn authorize(self, principal: &Principal) -> Result<(), AppError> {
        match self.permission() {
            Some(p) if !principal.has(p) => {
                Err(AppError::forbidden(format!("{} requires the {} permission", self.name(), p.as_str())))
            }
            _ => Ok(()),
        }
    }
}

impl Operation {
    pub fn kind(&self) -> OpKind {
        match self {
            Operation::Health => OpKind::Health,
            Operation::ListAudits => OpKind::ListAudits,
            Operation::CreateAudit(_) => OpKind::CreateAudit,
            Operation::GetAudit { .. } => OpKind::GetAudit,
            Operation::Recommendations { .. } => OpKind::Recommendations,
            Operation::SelectQuestions { .. } => OpKind::SelectQuestions,
            Operation::RegisterBinding { .. } => OpKind::RegisterBinding,
            Operation::Coverage { .. } => OpKind::Coverage,
            Operation::Transition { .. } => OpKind::Transition,
            Operation::Ingest { .. } => OpKind::Ingest,
            Operation::Query { .. } => OpKind::Query,
            Operation::Answer { .. } => OpKind::Answer,
            Operation::Report { .. } => OpKind::Report,
            Operation::GetCatalog => OpKind::GetCatalog,
            Operation::PutCatalog { .. } => OpKind::PutCatalog,
            Operation::ListMappings => OpKind::ListMappings,
            Operation::PutMapping { .. } => OpKind::PutMapping,
        }
    }

    pub fn permission(&self) -> Option<Permission> {
        self.kind().permission()
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }
}

struct WorkflowSlot {
    workflow: AuditWorkflow,
    log: EventLog,
    persisted: usize,
}

struct AuditSlot {
    workflow: Mutex<WorkflowSlot>,
    store: RwLock<StatementStore>,
}

struct Catalogs {
    current: CatalogRef,
    all: BTreeMap<String, Arc<Catalog>>,
}

impl Catalogs {
    fn current(&self) -> Arc<Catalog> {
        self.all[&self.current.to_string()].clone()
    }

    fn get(&self, r: &CatalogRef) -> Result<Arc<Catalog>, AppError> {
        self.all
            .get(&r.to_string())
            .cloned()
            .ok_or_else(|| AppError::storage(format!("catalog {r} recorded by the audit is not available")))
    }
}

/// The running service state.
pub struct App {
    config: Config,
    clock: Clock,
    catalogs: RwLock<Catalogs>,
    mappings: RwLock<BTreeMap<String, MappingSpec>>,
    audits: RwLock<BTreeMap<String, Arc<AuditSlot>>>,
    create_lock: Mutex<()>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn storage<E: std::fmt::Display>(e: E) -> AppError {
    AppError::storage(e.to_string())
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("response serializes")
}

impl App {
    /// Opens the data directory, recovering catalogs, mapping specs, event
    /// logs and statement logs.
    pub fn open(config: Config, clock: Clock) -> Result<Self, AppError> {
        config.validate().map_err(|e| AppError::validation(e.to_string()))?;
        let dir = config.data_dir.clone();
        for sub in ["catalogs", "mappings", "audits"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(storage)?;
        }
        let catalogs = Self::load_catalogs(&dir, config.catalog.as_deref())?;
        let mappings = Self::load_mappings(&dir)?;
        let app = App {
            clock,
            catalogs: RwLock::new(catalogs),
            mappings: RwLock::new(mappings),
            audits: RwLock::new(BTreeMap::new()),
            create_lock: Mutex::new(()),
            config,
        };
        app.load_audits()?;
        Ok(app)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn authenticate(&self, token: Option<&str>) -> Result<&Principal, AppError> {
        token.and_then(|t| self.config.principal(t)).ok_or_else(AppError::unauthorized)
    }

    fn durability(&self) -> Durability {
        if self.config.sync {
            Durability::Sync
        } else {
            Durability::Buffered
        }
    }

    fn load_catalogs(dir: &Path, seed: Option<&Path>) -> Result<Catalogs, AppError> {
        let cat_dir = dir.join("catalogs");
        let mut all = BTreeMap::new();
        for entry in std::fs::read_dir(&cat_dir).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = std::fs::read(&path).map_err(storage)?;
                let catalog = load_catalog(&bytes).map_err(|e| storage(format!("{}: {e}", path.display())))?;
                all.insert(CatalogRef::of(&catalog).to_string(), Arc::new(catalog));
            }
        }
        let current_file = cat_dir.join("current");
        let current = match std::fs::read_to_string(&current_file) {
            Ok(text) if all.contains_key(text.trim()) => all[text.trim()].clone(),
            _ => {
                let catalog = match seed {
                    Some(path) => {
                        let bytes = std::fs::read(path).map_err(storage)?;
                        load_catalog(&bytes)?
                    }
                    None => default_catalog(),
                };
                let r = CatalogRef::of(&catalog);
                std::fs::write(cat_dir.join(format!("{r}.json")), serialize_catalog(&catalog)).map_err(storage)?;
                std::fs::write(&current_file, r.to_string()).map_err(storage)?;
                let catalog = Arc::new(catalog);
                all.insert(r.to_string(), catalog.clone());
                catalog
            }
        };
        Ok(Catalogs { current: CatalogRef::of(&current), all })
    }

    fn load_mappings(dir: &Path) -> Result<BTreeMap<String, MappingSpec>, AppError> {
        let mut mappings: BTreeMap<String, MappingSpec> =
            sim::builtin_mappings().into_iter().map(|m| (m.mapping_id.clone(), m)).collect();
        for entry in std::fs::read_dir(dir.join("mappings")).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = std::fs::read(&path).map_err(storage)?;
                let spec = MappingSpec::from_json(&bytes).map_err(|e| storage(format!("{}: {e}", path.display())))?;
                mappings.insert(spec.mapping_id.clone(), spec);
            }
        }
        Ok(mappings)
    }

    fn audit_dir(&self, audit_id: &str) -> PathBuf {
        self.config.data_dir.join("audits").join(audit_id)
    }

    fn load_audits(&self) -> Result<(), AppError> {
        let mut audits = self.audits.write();
        for entry in std::fs::read_dir(self.config.data_dir.join("audits")).map_err(storage)? {
            let dir = entry.map_err(storage)?.path();
            let events_path = dir.join("events.jsonl");
            if !events_path.exists() {
                continue;
            }
            // Opening first drops a torn final line left by a crash.
            let log = EventLog::open(&events_path, self.config.sync).map_err(storage)?;
            let events = auditbox_core::engine::read_event_log(&events_path)?;
            if events.is_empty() {
                warn!(path = %dir.display(), "skipping audit directory without events");
                continue;
            }
            let workflow = AuditWorkflow::replay(&events)?;
            let (mut store, report) = StatementStore::open(dir.join("statements.jsonl"), self.durability())?;
            store.set_max_batch(self.config.max_batch);
            if report.torn_tail || report.uncommitted_statements > 0 {
                warn!(audit = workflow.audit_id(), ?report, "statement log recovered to its last committed batch");
            }
            info!(audit = workflow.audit_id(), state = %workflow.state(), statements = store.len(), "audit recovered");
            let slot = AuditSlot {
                workflow: Mutex::new(WorkflowSlot { persisted: events.len(), workflow, log }),
                store: RwLock::new(store),
            };
            let id = slot.workflow.lock().workflow.audit_id().to_owned();
            audits.insert(id, Arc::new(slot));
        }
        Ok(())
    }

    fn slot(&self, audit_id: &str) -> Result<Arc<AuditSlot>, AppError> {
        self.audits.read().get(audit_id).cloned().ok_or_else(|| AppError::not_found(format!("unknown audit {audit_id:?}")))
    }

    pub fn current_catalog(&self) -> Arc<Catalog> {
        self.catalogs.read().current()
    }

    fn catalog_for(&self, wf: &AuditWorkflow) -> Result<Arc<Catalog>, AppError> {
        self.catalogs.read().get(wf.catalog_ref())
    }

    /// Runs a workflow mutation and appends the events it produced to the
    /// audit's event log.
    fn mutate<T>(
        &self,
        audit_id: &str,
        f: impl FnOnce(&mut AuditWorkflow, &StatementStore) -> Result<T, AppError>,
    ) -> Result<(T, Value), AppError> {
        let slot = self.slot(audit_id)?;
        let mut guard = slot.workflow.lock();
        let store = slot.store.read();
        let out = f(&mut guard.workflow, &store)?;
        let ws = &mut *guard;
        let fresh = ws.workflow.events()[ws.persisted..].to_vec();
        for record in &fresh {
            if let Err(e) = ws.log.append(record) {
                ws.workflow = AuditWorkflow::replay(&ws.workflow.events()[..ws.persisted]).map_err(AppError::from)?;
                return Err(storage(e));
            }
            ws.persisted += 1;
        }
        Ok((out, to_value(&ws.workflow)))
    }

    /// Checks permissions and runs one operation.
    pub fn execute(&self, principal: &Principal, op: Operation) -> Result<Value, AppError> {
        op.kind().authorize(principal)?;
        let actor = principal.auditor.id.as_str();
        let now = self.clock.now();
        match op {
            Operation::Health => Ok(to_value(&Health {
                status: "ok".into(),
                version: VERSION.into(),
                catalog: self.catalogs.read().current.clone(),
            })),
            Operation::ListAudits => {
                let slots: Vec<Arc<AuditSlot>> = self.audits.read().values().cloned().collect();
                let list: Vec<AuditSummary> = slots
                    .iter()
                    .map(|s| {
                        let g = s.workflow.lock();
                        AuditSummary {
                            audit_id: g.workflow.audit_id().to_owned(),
                            state: g.workflow.state(),
                            catalog_ref: g.workflow.catalog_ref().clone(),
                        }
                    })
                    .collect();
                Ok(to_value(&list))
            }
            Operation::CreateAudit(req) => self.create_audit(principal, req, now),
            Operation::GetAudit { audit_id } => Ok(to_value(&self.slot(&audit_id)?.workflow.lock().workflow)),
            Operation::Recommendations { audit_id } => {
                let slot = self.slot(&audit_id)?;
                let guard = slot.workflow.lock();
                let catalog = self.catalog_for(&guard.workflow)?;
                let recs =
                    recommend_questions(guard.workflow.system(), guard.workflow.goal(), &catalog, &self.config.scoring)?;
                Ok(to_value(&recs))
            }
            Operation::SelectQuestions { audit_id, body } => {
                let catalog = {
                    let slot = self.slot(&audit_id)?;
                    let guard = slot.workflow.lock();
                    self.catalog_for(&guard.workflow)?
                };
                let ((), wf) = self.mutate(&audit_id, |wf, _| {
                    wf.select_questions(&catalog, &body.question_ids, actor, now)?;
                    Ok(())
                })?;
                Ok(wf)
            }
            Operation::RegisterBinding { audit_id, binding } => {
                let ((), wf) = self.mutate(&audit_id, |wf, _| Ok(wf.register_binding(binding, actor, now)?))?;
                Ok(wf)
            }
            Operation::Coverage { audit_id } => {
                Ok(to_value(&self.slot(&audit_id)?.workflow.lock().workflow.check_coverage()?))
            }
            Operation::Transition { audit_id, body } => {
                let ((), wf) = self.mutate(&audit_id, |wf, _| {
                    Ok(wf.transition(body.target, body.coverage_override, actor, now)?)
                })?;
                Ok(wf)
            }
            Operation::Ingest { audit_id, batch_key, body } => self.ingest(&audit_id, batch_key, body, now),
            Operation::Query { audit_id, body } => {
                let slot = self.slot(&audit_id)?;
                let store = slot.store.read();
                Ok(to_value(&evaluate(&body.query, &store, body.as_of)?))
            }
            Operation::Answer { audit_id, body } => {
                let slot = self.slot(&audit_id)?;
                let guard = slot.workflow.lock();
                let catalog = self.catalog_for(&guard.workflow)?;
                let store = slot.store.read();
                let record =
                    answer_question(&guard.workflow, &catalog, &body.question_id, &body.params, &store, body.as_of, now)?;
                Ok(to_value(&record))
            }
            Operation::Report { audit_id, body } => {
                let catalog = {
                    let slot = self.slot(&audit_id)?;
                    let guard = slot.workflow.lock();
                    self.catalog_for(&guard.workflow)?
                };
                let (report, _) = self.mutate(&audit_id, |wf, store| {
                    Ok(generate_report(wf, &catalog, store, &body.params_per_question, body.as_of, actor, now)?)
                })?;
                Ok(to_value(&report))
            }
            Operation::GetCatalog => Ok(to_value(&*self.current_catalog())),
            Operation::PutCatalog { document } => self.put_catalog(&document),
            Operation::ListMappings => Ok(to_value(&self.mappings.read().values().collect::<Vec<_>>())),
            Operation::PutMapping { mapping_id, spec } => {
                if spec.mapping_id != mapping_id || !valid_id(&mapping_id) {
                    return Err(AppError::validation("mapping id in path and body must agree and be a simple name"));
                }
                spec.validate()?;
                let path = self.config.data_dir.join("mappings").join(format!("{mapping_id}.json"));
                let mut bytes = serde_json::to_vec_pretty(&spec).expect("mapping serializes");
                bytes.push(b'\n');
                std::fs::write(path, bytes).map_err(storage)?;
                self.mappings.write().insert(mapping_id, spec.clone());
                Ok(to_value(&spec))
            }
        }
    }

    fn create_audit(&self, principal: &Principal, req: CreateAudit, now: Timestamp) -> Result<Value, AppError> {
        let _guard = self.create_lock.lock();
        let audit_id = match req.audit_id {
            Some(id) => {
                if !valid_id(&id) {
                    return Err(AppError::validation(format!("invalid audit id {id:?}")));
                }
                if self.audits.read().contains_key(&id) || self.audit_dir(&id).exists() {
                    return Err(AppError::conflict("duplicate_id", format!("audit {id:?} already exists")));
                }
                id
            }
            None => {
                let audits = self.audits.read();
                (1..)
                    .map(|n| format!("audit-{n:04}"))
                    .find(|id| !audits.contains_key(id) && !self.audit_dir(id).exists())
                    .expect("free audit id")
            }
        };
        let catalog = self.current_catalog();
        let workflow =
            AuditWorkflow::create(audit_id.clone(), req.system, req.goal, &catalog, principal.auditor.clone(), now)?;
        let dir = self.audit_dir(&audit_id);
        let mut log = EventLog::open(dir.join("events.jsonl"), self.config.sync).map_err(storage)?;
        for record in workflow.events() {
            log.append(record).map_err(storage)?;
        }
        let (mut store, _) = StatementStore::open(dir.join("statements.jsonl"), self.durability())?;
        store.set_max_batch(self.config.max_batch);
        let view = to_value(&workflow);
        let slot = AuditSlot {
            workflow: Mutex::new(WorkflowSlot { persisted: workflow.events().len(), workflow, log }),
            store: RwLock::new(store),
        };
        self.audits.write().insert(audit_id, Arc::new(slot));
        Ok(view)
    }

    fn ingest(&self, audit_id: &str, batch_key: String, body: IngestRequest, now: Timestamp) -> Result<Value, AppError> {
        if batch_key.is_empty() {
            return Err(AppError::validation("an Idempotency-Key is required"));
        }
        let payload = serde_json::to_vec(&body).expect("request serializes");
        let items: Vec<BatchItem> = match (&body.records, &body.statements) {
            (Some(records), None) => {
                let mapping_id =
                    body.mapping_id.as_deref().ok_or_else(|| AppError::validation("records require a mapping_id"))?;
                let spec = self
                    .mappings
                    .read()
                    .get(mapping_id)
                    .cloned()
                    .ok_or_else(|| AppError::new(400, "unknown_mapping", format!("unknown mapping {mapping_id:?}")))?;
                map_records(records, &spec, &body.context, now)
            }
            (None, Some(statements)) => statements
                .iter()
                .map(|v| match serde_json::from_value::<StatementDraft>(v.clone()) {
                    Ok(d) => BatchItem::Draft(d),
                    Err(e) => BatchItem::Invalid(e.to_string()),
                })
                .collect(),
            _ => return Err(AppError::validation("exactly one of records or statements is required")),
        };
        let batch = IngestBatch::with_fingerprint(batch_key, items, fingerprint(&payload));
        let slot = self.slot(audit_id)?;
        let guard = slot.workflow.lock();
        let mut store = slot.store.write();
        let receipt = ingest::ingest(&guard.workflow, &mut store, batch, now)?;
        Ok(to_value(&receipt))
    }

    fn put_catalog(&self, document: &[u8]) -> Result<Value, AppError> {
        let catalog = load_catalog(document)?;
        let r = CatalogRef::of(&catalog);
        if !valid_id(&r.catalog_id) || !valid_id(&r.version) {
            return Err(AppError::validation(format!("catalog id and version must be simple names, got {r}")));
        }
        let mut catalogs = self.catalogs.write();
        if let Some(existing) = catalogs.all.get(&r.to_string()) {
            if **existing != catalog {
                return Err(AppError::conflict(
                    "catalog_version_exists",
                    format!("catalog {r} is already loaded with different content"),
                ));
            }
        } else {
            let current = catalogs.current.clone();
            if r.catalog_id == current.catalog_id
                && compare_versions(&r.version, &current.version) != std::cmp::Ordering::Greater
            {
                return Err(AppError::conflict(
                    "catalog_version_not_newer",
                    format!("version {} is not newer than {}", r.version, current.version),
                ));
            }
            let dir = self.config.data_dir.join("catalogs");
            std::fs::write(dir.join(format!("{r}.json")), serialize_catalog(&catalog)).map_err(storage)?;
            catalogs.all.insert(r.to_string(), Arc::new(catalog));
        }
        std::fs::write(self.config.data_dir.join("catalogs").join("current"), r.to_string()).map_err(storage)?;
        catalogs.current = r.clone();
        Ok(to_value(&r))
    }
}
