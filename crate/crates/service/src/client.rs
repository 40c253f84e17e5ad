//! Blocking HTTP client that runs [`Operation`]s against a remote server.

use std::time::Duration;

use reqwest::blocking::Client as HttpClient;
use reqwest::Method;
use serde::Serialize;
use serde_json::Value;

use crate::app::Operation;
use crate::error::{AppError, ErrorBody};
use crate::http::IDEMPOTENCY_HEADER;

pub struct Client {
    base: String,
    token: Option<String>,
    http: HttpClient,
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("request serializes")
}

fn transport(e: impl std::fmt::Display) -> AppError {
    AppError::new(503, "transport_error", e.to_string())
}

impl Client {
    pub fn new(server: &str, token: Option<String>) -> Result<Self, AppError> {
        let http = HttpClient::builder().timeout(Duration::from_secs(600)).build().map_err(transport)?;
        Ok(Client { base: format!("{}/api/v1", server.trim_end_matches('/')), token, http })
    }

    /// Method, path, body and optional idempotency key for an operation.
    fn request(op: &Operation) -> (Method, String, Option<Vec<u8>>, Option<&str>) {
        use Operation::*;
        let a = |id: &str, tail: &str| format!("/audits/{id}{tail}");
        match op {
            Health => (Method::GET, "/healthz".into(), None, None),
            ListAudits => (Method::GET, "/audits".into(), None, None),
            CreateAudit(body) => (Method::POST, "/audits".into(), Some(json(body)), None),
            GetAudit { audit_id } => (Method::GET, a(audit_id, ""), None, None),
            Recommendations { audit_id } => (Method::GET, a(audit_id, "/recommendations"), None, None),
            SelectQuestions { audit_id, body } => (Method::POST, a(audit_id, "/selection"), Some(json(body)), None),
            RegisterBinding { audit_id, binding } => (Method::POST, a(audit_id, "/bindings"), Some(json(binding)), None),
            Coverage { audit_id } => (Method::GET, a(audit_id, "/coverage"), None, None),
            Transition { audit_id, body } => (Method::POST, a(audit_id, "/state"), Some(json(body)), None),
            Ingest { audit_id, batch_key, body } => {
                (Method::POST, a(audit_id, "/artefacts:batch"), Some(json(body)), Some(batch_key.as_str()))
            }
            Query { audit_id, body } => (Method::POST, a(audit_id, "/queries"), Some(json(body)), None),
            Answer { audit_id, body } => (Method::POST, a(audit_id, "/answers"), Some(json(body)), None),
            Report { audit_id, body } => (Method::POST, a(audit_id, "/report"), Some(json(body)), None),
            GetCatalog => (Method::GET, "/catalog".into(), None, None),
            PutCatalog { document } => (Method::PUT, "/catalog".into(), Some(document.clone()), None),
            ListMappings => (Method::GET, "/mappings".into(), None, None),
            PutMapping { mapping_id, spec } => (Method::PUT, format!("/mappings/{mapping_id}"), Some(json(spec)), None),
        }
    }

    pub fn execute(&self, op: &Operation) -> Result<Value, AppError> {
        let (method, path, body, key) = Self::request(op);
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        if let Some(key) = key {
            req = req.header(IDEMPOTENCY_HEADER, key);
        }
        if let Some(body) = body {
            req = req.header("content-type", "application/json").body(body);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().map_err(transport)?;
        if (200..300).contains(&status) {
            serde_json::from_slice(&bytes).map_err(transport)
        } else {
            match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(body) => Err(AppError::from_body(status, body)),
                Err(_) => Err(AppError::new(status, "http_error", String::from_utf8_lossy(&bytes).into_owned())),
            }
        }
    }
}
