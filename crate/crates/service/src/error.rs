use auditbox_core::engine::EngineError;
use auditbox_core::ingest::{IngestError, MappingError};
use auditbox_core::knowledge::KnowledgeError;
use auditbox_core::query::QueryError;
use auditbox_core::report::ReportError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Error returned by every service operation, with its wire code and HTTP status.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct AppError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

/// Wire form: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl AppError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        AppError { status, code: code.to_owned(), message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(400, "validation_error", message)
    }

    pub fn unauthorized() -> Self {
        Self::new(401, "unauthorized", "missing or unknown bearer token")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(403, "forbidden", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "not_found", message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(409, code, message)
    }

    pub fn storage(message: impl Into<String>) -> Self {
        Self::new(500, "storage_failure", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { error: ErrorDetail { code: self.code.clone(), message: self.message.clone() } }
    }

    pub fn from_body(status: u16, body: ErrorBody) -> Self {
        AppError { status, code: body.error.code, message: body.error.message }
    }
}

impl From<EngineError> for AppError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::IllegalState { .. } => Self::conflict("illegal_state", message),
            EngineError::CoverageIncomplete { .. } => Self::conflict("coverage_incomplete", message),
            EngineError::DuplicateBindingId(_) => Self::conflict("duplicate_id", message),
            EngineError::CatalogMismatch { .. } => Self::conflict("catalog_mismatch", message),
            EngineError::UnknownQuestion(_) => Self::new(400, "unknown_question", message),
            EngineError::EmptySelection => Self::new(400, "empty_selection", message),
            EngineError::UnknownComponent(_) => Self::new(400, "unknown_component", message),
            EngineError::InvalidSystem(_) => Self::new(400, "invalid_system", message),
            EngineError::InvalidBinding(_) | EngineError::EmptyCatalog => Self::validation(message),
            EngineError::InvalidEventLog(_) => Self::storage(message),
        }
    }
}

impl From<IngestError> for AppError {
    fn from(e: IngestError) -> Self {
        let message = e.to_string();
        match e {
            IngestError::WorkflowNotCollecting(_) => Self::conflict("workflow_not_collecting", message),
            IngestError::BatchTooLarge { .. } => Self::new(413, "batch_too_large", message),
            IngestError::IdempotencyConflict(_) => Self::conflict("idempotency_conflict", message),
            IngestError::InvalidBatch(_) => Self::validation(message),
            IngestError::StorageFailure(_) | IngestError::CorruptLog { .. } | IngestError::Io(_) => {
                Self::storage(message)
            }
        }
    }
}

impl From<MappingError> for AppError {
    fn from(e: MappingError) -> Self {
        Self::new(400, "mapping_error", e.to_string())
    }
}

impl From<QueryError> for AppError {
    fn from(e: QueryError) -> Self {
        let code = match e {
            QueryError::TypeMismatch { .. } => "type_mismatch",
            QueryError::UnboundVariable(_) => "unbound_variable",
            QueryError::InvalidBucket(_) => "invalid_bucket",
            QueryError::WatermarkAhead { .. } => "watermark_ahead",
            QueryError::InvalidQuery(_) | QueryError::Template(_) => "invalid_query",
        };
        Self::new(400, code, e.to_string())
    }
}

impl From<ReportError> for AppError {
    fn from(e: ReportError) -> Self {
        let message = e.to_string();
        match e {
            ReportError::IllegalState { .. } => Self::conflict("illegal_state", message),
            ReportError::UnknownQuestion(_) => Self::new(400, "unknown_question", message),
            ReportError::MissingParam(_) => Self::new(400, "missing_param", message),
            ReportError::CatalogMismatch { .. } => Self::conflict("catalog_mismatch", message),
            ReportError::Query(q) => q.into(),
            ReportError::Engine(g) => g.into(),
        }
    }
}

impl From<KnowledgeError> for AppError {
    fn from(e: KnowledgeError) -> Self {
        Self::new(400, "invalid_catalog", e.to_string())
    }
}
