//! Runs one operation sequence three ways (local CLI, raw HTTP, CLI against a
//! server) on separate data directories with the same fixed clock, and
//! compares the CLI's JSON output with the HTTP response bodies.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use auditbox::app::{App, Clock};
use auditbox::config::Config;
use auditbox::sim::{simulate, FaultRates, SimulatorConfig, UseCase};
use auditbox_core::ingest::parse_nested_records;
use auditbox_core::knowledge::{default_catalog, serialize_catalog};
use auditbox_core::model::Timestamp;
use serde_json::{json, Value};

pub const CLOCK: &str = "2024-05-01T12:00:00.000Z";
pub const TOKEN: &str = "operator-token";

/// One step: CLI arguments and the equivalent HTTP request.
struct Step {
    name: &'static str,
    cli: Vec<String>,
    method: &'static str,
    path: String,
    body: Option<Vec<u8>>,
    key: Option<&'static str>,
}

fn step(name: &'static str, cli: &[&str], method: &'static str, path: &str, body: Option<Value>) -> Step {
    Step {
        name,
        cli: cli.iter().map(|s| s.to_string()).collect(),
        method,
        path: path.to_owned(),
        body: body.map(|b| serde_json::to_vec(&b).unwrap()),
        key: None,
    }
}

pub fn start_server(dir: &Path) -> String {
    let config = Config { data_dir: dir.to_owned(), sync: false, ..Config::default() };
    let app = App::open(config, Clock::Fixed(Timestamp::parse(CLOCK).unwrap())).expect("app opens");
    let addr = auditbox::http::spawn(Arc::new(app), "127.0.0.1:0".parse().unwrap()).expect("server starts");
    format!("http://{addr}")
}

/// Returns (exit code, stdout, stderr).
pub fn cli(args: &[String]) -> (i32, String, String) {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let code = auditbox::cli::run(
        std::iter::once("auditbox".to_owned()).chain(args.iter().cloned()),
        &mut std::io::empty(),
        &mut stdout,
        &mut stderr,
    );
    (code, String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

/// Returns (status, body).
fn http(client: &reqwest::blocking::Client, base: &str, s: &Step) -> Result<(u16, Value), String> {
    let url = format!("{base}/api/v1{}", s.path);
    let mut req = match s.method {
        "GET" => client.get(&url),
        "POST" => client.post(&url),
        "PUT" => client.put(&url),
        other => return Err(format!("unsupported method {other}")),
    };
    req = req.bearer_auth(TOKEN);
    if let Some(key) = s.key {
        req = req.header("Idempotency-Key", key);
    }
    if let Some(body) = &s.body {
        req = req.header("content-type", "application/json").body(body.clone());
    }
    let resp = req.send().map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let body = resp.json().map_err(|e| format!("{}: {e}", s.name))?;
    Ok((status, body))
}

fn steps(files: &Path) -> Vec<Step> {
    let out = simulate(&SimulatorConfig {
        use_case: UseCase::Uc1,
        seed: 21,
        n_runs: 6,
        fault_rates: FaultRates { run_failure: 0.3, consent_skip: 0.0, correction_rate: 0.2 },
    })
    .unwrap();
    out.write_to(files).unwrap();
    let f = |name: &str| files.join(name).to_string_lossy().into_owned();

    let ner = out.bindings.iter().find(|b| b.binding_id == "b-ml-ner").unwrap();
    std::fs::write(files.join("ner-binding.json"), serde_json::to_vec(ner).unwrap()).unwrap();
    let rest: Vec<_> = out.bindings.iter().filter(|b| b.binding_id != "b-ml-ner").collect();
    std::fs::write(files.join("other-bindings.json"), serde_json::to_vec(&rest).unwrap()).unwrap();

    let records =
        parse_nested_records(&String::from_utf8(out.files["uc1-ml-output.jsonl"].clone()).unwrap()).unwrap();
    let status_records =
        parse_nested_records(&String::from_utf8(out.files["uc1-status.jsonl"].clone()).unwrap()).unwrap();
    let statements = json!([
        {"subject": "model:ner", "predicate": "audit:createdBy", "object": {"type": "string", "value": "team-a"},
         "component_id": "ml-ner", "run_id": "setup", "recorded_at": "2024-03-01T00:00:00.000Z"},
        {"subject": "model:ner", "predicate": "audit:createdBy", "object": {"type": "integer", "value": "x"},
         "component_id": "ml-ner", "run_id": "setup", "recorded_at": "2024-03-01T00:00:00.000Z"}
    ]);
    std::fs::write(files.join("statements.json"), serde_json::to_vec(&statements).unwrap()).unwrap();
    let query = json!({
        "match": [
            {"subject": {"var": "s"}, "predicate": "audit:confidence", "object": {"var": "c"}},
            {"subject": {"var": "s"}, "predicate": "audit:entityType", "object": {"var": "t"}}
        ],
        "aggregate": {"function": "AVG", "var": "c"},
        "group_by": ["t"]
    });
    std::fs::write(files.join("query.json"), serde_json::to_vec(&query).unwrap()).unwrap();
    let mut newer = default_catalog();
    newer.version = "1.1.0".into();
    std::fs::write(files.join("catalog.json"), serialize_catalog(&newer)).unwrap();
    let system: Value = serde_json::to_value(&out.system).unwrap();
    let run = "uc1-run-0002";

    let mut ingest = step(
        "ingest_records",
        &["ingest", "push", "--id", "d1", "--file", &f("uc1-ml-output.jsonl"), "--mapping", "uc1-ml-output", "--key", "k-ml"],
        "POST",
        "/audits/d1/artefacts:batch",
        Some(json!({"mapping_id": "uc1-ml-output", "records": records})),
    );
    ingest.key = Some("k-ml");
    let mut ingest_again = step(
        "ingest_resend",
        &["ingest", "push", "--id", "d1", "--file", &f("uc1-ml-output.jsonl"), "--mapping", "uc1-ml-output", "--key", "k-ml"],
        "POST",
        "/audits/d1/artefacts:batch",
        Some(json!({"mapping_id": "uc1-ml-output", "records": records})),
    );
    ingest_again.key = Some("k-ml");
    let mut ingest_status = step(
        "ingest_status",
        &["ingest", "push", "--id", "d1", "--file", &f("uc1-status.jsonl"), "--mapping", "uc1-status", "--key", "k-st"],
        "POST",
        "/audits/d1/artefacts:batch",
        Some(json!({"mapping_id": "uc1-status", "records": status_records})),
    );
    ingest_status.key = Some("k-st");
    let mut ingest_statements = step(
        "ingest_statements",
        &["ingest", "push", "--id", "d1", "--statements", &f("statements.json"), "--key", "k-stmt"],
        "POST",
        "/audits/d1/artefacts:batch",
        Some(json!({"statements": statements})),
    );
    ingest_statements.key = Some("k-stmt");

    vec![
        step("health", &["health"], "GET", "/healthz", None),
        step("catalog_show", &["catalog", "show"], "GET", "/catalog", None),
        step("mapping_list", &["mapping", "list"], "GET", "/mappings", None),
        step(
            "audit_create",
            &["audit", "create", "--system", &f("system.json"), "--goal", "robustness", "--id", "d1"],
            "POST",
            "/audits",
            Some(json!({"audit_id": "d1", "system": system, "goal": "robustness"})),
        ),
        step(
            "audit_create_duplicate",
            &["audit", "create", "--system", &f("system.json"), "--goal", "robustness", "--id", "d1"],
            "POST",
            "/audits",
            Some(json!({"audit_id": "d1", "system": system, "goal": "robustness"})),
        ),
        step("audit_list", &["audit", "list"], "GET", "/audits", None),
        step("audit_recommend", &["audit", "recommend", "--id", "d1"], "GET", "/audits/d1/recommendations", None),
        step(
            "audit_scope",
            &["audit", "scope", "--id", "d1", "--questions", "uc1-q1,uc1-q2"],
            "POST",
            "/audits/d1/selection",
            Some(json!({"question_ids": ["uc1-q1", "uc1-q2"]})),
        ),
        step(
            "audit_bind",
            &["audit", "bind", "--id", "d1", "--file", &f("ner-binding.json")],
            "POST",
            "/audits/d1/bindings",
            Some(serde_json::to_value(ner).unwrap()),
        ),
        step("audit_coverage_partial", &["audit", "coverage", "--id", "d1"], "GET", "/audits/d1/coverage", None),
        step(
            "audit_start_gated",
            &["audit", "start", "--id", "d1"],
            "POST",
            "/audits/d1/state",
            Some(json!({"target": "collecting"})),
        ),
        step(
            "audit_bind_rest",
            &["audit", "bind", "--id", "d1", "--file", &f("other-bindings.json")],
            "POST",
            "/audits/d1/bindings",
            None,
        ),
        step("audit_coverage", &["audit", "coverage", "--id", "d1"], "GET", "/audits/d1/coverage", None),
        step(
            "audit_start",
            &["audit", "start", "--id", "d1"],
            "POST",
            "/audits/d1/state",
            Some(json!({"target": "collecting"})),
        ),
        ingest,
        ingest_again,
        ingest_status,
        ingest_statements,
        step(
            "query_run",
            &["query", "run", "--id", "d1", "--file", &f("query.json"), "--as-of", "20"],
            "POST",
            "/audits/d1/queries",
            Some(json!({"query": query, "as_of": 20})),
        ),
        step(
            "query_watermark_ahead",
            &["query", "run", "--id", "d1", "--file", &f("query.json"), "--as-of", "100000"],
            "POST",
            "/audits/d1/queries",
            Some(json!({"query": query, "as_of": 100000})),
        ),
        step(
            "query_answer",
            &["query", "answer", "--id", "d1", "--question", "uc1-q2", "--param", &format!("run_id={run}")],
            "POST",
            "/audits/d1/answers",
            Some(json!({"question_id": "uc1-q2", "params": {"run_id": run}})),
        ),
        step(
            "query_answer_missing_param",
            &["query", "answer", "--id", "d1", "--question", "uc1-q2"],
            "POST",
            "/audits/d1/answers",
            Some(json!({"question_id": "uc1-q2"})),
        ),
        step(
            "audit_stop",
            &["audit", "stop", "--id", "d1"],
            "POST",
            "/audits/d1/state",
            Some(json!({"target": "reporting"})),
        ),
        step(
            "report_generate",
            &["report", "generate", "--id", "d1", "--param", &format!("uc1-q2.run_id={run}")],
            "POST",
            "/audits/d1/report",
            Some(json!({"params_per_question": {"uc1-q2": {"run_id": run}}})),
        ),
        step("audit_show", &["audit", "show", "--id", "d1"], "GET", "/audits/d1", None),
        step("audit_unknown", &["audit", "show", "--id", "nope"], "GET", "/audits/nope", None),
        step("catalog_load", &["catalog", "load", "--file", &f("catalog.json")], "PUT", "/catalog", None),
        step("catalog_load_stale", &["catalog", "load", "--file", &f("catalog.json")], "PUT", "/catalog", None),
        step(
            "audit_close",
            &["audit", "close", "--id", "d1"],
            "POST",
            "/audits/d1/state",
            Some(json!({"target": "closed"})),
        ),
    ]
}

/// Parses CLI output: JSON on stdout for success, an error body on stderr otherwise.
fn cli_value(code: i32, stdout: &str, stderr: &str) -> Result<Value, String> {
    let text = if code == 0 { stdout } else { stderr };
    serde_json::from_str(text.trim()).map_err(|e| format!("exit {code}: unparseable output ({e}): {stdout}{stderr}"))
}

/// Returns the number of operations compared.
pub fn check_differential(root: &Path) -> Result<usize, String> {
    let files = root.join("files");
    let local_dir = root.join("local");
    let steps = steps(&files);
    let http_base = start_server(&root.join("http"));
    let remote_base = start_server(&root.join("remote"));
    let client = reqwest::blocking::Client::new();
    let mut compared = 0;

    for s in &steps {
        let mut local_args = s.cli.clone();
        local_args.extend(["--format", "json", "--clock", CLOCK, "--data-dir"].map(String::from));
        local_args.push(local_dir.to_string_lossy().into_owned());
        let (code, stdout, stderr) = cli(&local_args);
        let local = cli_value(code, &stdout, &stderr)?;

        let mut remote_args = s.cli.clone();
        remote_args.extend(["--format", "json", "--server", &remote_base, "--token", TOKEN].map(String::from));
        let (rcode, rstdout, rstderr) = cli(&remote_args);
        let remote = cli_value(rcode, &rstdout, &rstderr)?;

        let (status, body) = match (&s.body, s.name) {
            (None, "audit_bind_rest") => {
                let bindings: Vec<Value> = serde_json::from_slice(&std::fs::read(files.join("other-bindings.json")).unwrap()).unwrap();
                let mut last = (0, Value::Null);
                for b in bindings {
                    let one = Step { body: Some(serde_json::to_vec(&b).unwrap()), ..step(s.name, &[], "POST", &s.path, None) };
                    last = http(&client, &http_base, &one)?;
                }
                last
            }
            (None, "catalog_load" | "catalog_load_stale") => {
                let one = Step { body: Some(std::fs::read(files.join("catalog.json")).unwrap()), ..step(s.name, &[], "PUT", &s.path, None) };
                http(&client, &http_base, &one)?
            }
            _ => http(&client, &http_base, s)?,
        };

        let http_ok = (200..300).contains(&status);
        if http_ok != (code == 0) || (code == 0) != (rcode == 0) {
            return Err(format!("{}: http status {status}, local exit {code}, remote exit {rcode}", s.name));
        }
        if !http_ok && code != 1 {
            return Err(format!("{}: domain error exited with {code}", s.name));
        }
        if local != body {
            return Err(format!("{}: local CLI differs from HTTP\ncli:  {local}\nhttp: {body}", s.name));
        }
        if remote != body {
            return Err(format!("{}: remote CLI differs from HTTP\ncli:  {remote}\nhttp: {body}", s.name));
        }
        compared += 1;
    }
    Ok(compared)
}
