//! Core of the auditbox continuous AI-auditing engine.
//!
//! The crate is organised along the audit loop:
//!
//! - [`model`]: statements, system descriptions, auditors and goals.
//! - [`knowledge`]: the versioned catalog of audit questions, risks,
//!   documentation standards, tools and query templates.
//! - [`engine`]: scoping recommendations, question selection, collector
//!   bindings, coverage and the event-sourced workflow state machine.
//! - [`ingest`]: mapping of heterogeneous source records into statements and
//!   the append-only, idempotent statement store.
//! - [`query`]: the structured query language and its evaluator.
//! - [`report`]: question answering and audit report generation.

pub mod engine;
pub mod ingest;
pub mod knowledge;
pub mod model;
pub mod query;
pub mod report;

pub use engine::{AuditWorkflow, EngineError, WorkflowState};
pub use ingest::{IngestError, IngestReceipt, StatementStore};
pub use knowledge::{Catalog, KnowledgeError};
pub use model::{ArtefactStatement, ModelError, ObjectValue, StatementDraft, Timestamp};
pub use query::{QueryAst, QueryError, StatementPattern};
pub use report::{AnswerRecord, AuditReport, ReportError};
