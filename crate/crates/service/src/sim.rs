//! Deterministic simulators for the two use cases.
//!
//! UC1 is a document-analysis system for permit documents (UI, two ML
//! components, two non-ML services, an ontology); UC2 is a medical data
//! analysis platform with a consent check and R-script based studies. Each
//! simulator emits real source files in the three supported formats plus a
//! ground-truth file computed by brute force over the emitted records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use auditbox_core::engine::{BindingFormat, CollectorBinding};
use auditbox_core::ingest::{
    fingerprint, parse_delimited_table, parse_nested_records, parse_triple_file, MappingContext, MappingRule,
    MappingSpec, SourceFormat,
};
use auditbox_core::model::{
    AuditGoal, Component, ComponentKind, DataFlow, LifecyclePhase, ObjectType, SystemDescription, Timestamp,
};
use auditbox_core::query::StatementPattern;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::app::IngestRequest;

/// 2024-03-01T00:00:00Z
const UC1_BASE_MS: i64 = 1_709_251_200_000;
/// 2024-06-03T00:00:00Z
const UC2_BASE_MS: i64 = 1_717_372_800_000;
const DAY_MS: i64 = 86_400_000;
const HOUR_MS: i64 = 3_600_000;
const RECORDS_PER_BATCH: usize = 1000;

pub const ENTITY_TYPES: [&str; 4] = ["operator", "applicable_law", "permit_date", "location"];
const LIBRARY_POOL: [&str; 10] =
    ["statsLib", "plotLib", "dplyr", "ggplot2", "survival", "lme4", "data.table", "caret", "tidyr", "readr"];
const N_STUDIES: usize = 5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("simulator io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulator output is malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UseCase {
    Uc1,
    Uc2,
}

impl UseCase {
    pub fn as_str(self) -> &'static str {
        match self {
            UseCase::Uc1 => "uc1",
            UseCase::Uc2 => "uc2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultRates {
    #[serde(default)]
    pub run_failure: f64,
    #[serde(default)]
    pub consent_skip: f64,
    #[serde(default)]
    pub correction_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    pub use_case: UseCase,
    pub seed: u64,
    pub n_runs: usize,
    #[serde(default)]
    pub fault_rates: FaultRates,
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_runs == 0 {
            return Err(SimError::InvalidConfig("n_runs must be at least 1".into()));
        }
        let f = &self.fault_rates;
        for (name, rate) in [("run_failure", f.run_failure), ("consent_skip", f.consent_skip), ("correction_rate", f.correction_rate)]
        {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SimError::InvalidConfig(format!("{name} must be within [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One emitted source file and the mapping that reads it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub file: String,
    pub mapping_id: String,
    pub format: SourceFormat,
    /// Fixed `recorded_at` for sources whose records carry no time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SimulatorConfig,
    pub goal: AuditGoal,
    pub questions: Vec<String>,
    pub sources: Vec<SourceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgConfidence {
    pub entity_type: String,
    pub day: Timestamp,
    pub count: usize,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uc1Truth {
    pub avg_confidence: Vec<AvgConfidence>,
    pub run_success: BTreeMap<String, bool>,
    pub confidence_records: usize,
    pub corrections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uc2Truth {
    pub consent_evaluated: BTreeMap<String, bool>,
    pub study_libraries: BTreeMap<String, Vec<String>>,
    pub study_of_run: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "use_case", rename_all = "snake_case")]
pub enum GroundTruth {
    Uc1(Uc1Truth),
    Uc2(Uc2Truth),
}

/// Everything a simulation emits, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub manifest: Manifest,
    pub system: SystemDescription,
    pub bindings: Vec<CollectorBinding>,
    pub ground_truth: GroundTruth,
    pub files: BTreeMap<String, Vec<u8>>,
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("simulator output serializes");
    out.push(b'\n');
    out
}

fn jsonl(records: &[Value]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn ts(ms: i64) -> Timestamp {
    Timestamp::from_millis(ms).expect("simulated time within range")
}

fn rule(source_path: &str, predicate: &str, object_type: ObjectType, required: bool) -> MappingRule {
    MappingRule { source_path: source_path.into(), predicate: predicate.into(), object_type, required }
}

fn spec(id: &str, format: SourceFormat, subject: &str, rules: Vec<MappingRule>, component: &str) -> MappingSpec {
    MappingSpec {
        mapping_id: id.into(),
        source_format: format,
        subject_template: subject.into(),
        rules,
        default_component_id: component.into(),
        run_id_path: None,
        component_path: None,
        recorded_at_path: None,
    }
}

fn with_paths(mut m: MappingSpec, run: Option<&str>, component: Option<&str>, at: Option<&str>) -> MappingSpec {
    m.run_id_path = run.map(str::to_owned);
    m.component_path = component.map(str::to_owned);
    m.recorded_at_path = at.map(str::to_owned);
    m
}

/// Mapping specs for the simulator source files; always available in the service.
pub fn builtin_mappings() -> Vec<MappingSpec> {
    use ObjectType::*;
    use SourceFormat::*;
    vec![
        with_paths(
            spec("uc1-status", NestedRecord, "run:{run}/{component}", vec![rule("status", "audit:status", String, true)], "svc-ingest"),
            Some("run"),
            Some("component"),
            Some("at"),
        ),
        with_paths(
            spec(
                "uc1-ml-output",
                NestedRecord,
                "entity:{run}/{entity.id}",
                vec![
                    rule("entity.type", "audit:entityType", String, true),
                    rule("entity.confidence", "audit:confidence", Decimal, true),
                ],
                "ml-ner",
            ),
            Some("run"),
            Some("component"),
            Some("at"),
        ),
        with_paths(
            spec(
                "uc1-links",
                NestedRecord,
                "entity:{run}/{entity}",
                vec![rule("target", "audit:linkedTo", Entity, true)],
                "ml-linker",
            ),
            Some("run"),
            Some("component"),
            Some("at"),
        ),
        with_paths(
            spec(
                "uc1-inputs",
                NestedRecord,
                "document:{run}/{document.id}",
                vec![
                    rule("document.sha256", "audit:inputDigest", String, true),
                    rule("document.locator", "audit:inputLocation", String, true),
                    rule("document.media_type", "audit:mediaType", String, false),
                ],
                "svc-ingest",
            ),
            Some("run"),
            None,
            Some("at"),
        ),
        with_paths(
            spec(
                "uc1-corrections",
                DelimitedTable,
                "entity:{run}/{entity}",
                vec![rule("corrected_type", "audit:userCorrection", String, true)],
                "ui",
            ),
            Some("run"),
            None,
            Some("at"),
        ),
        spec("uc1-ontology", TripleFile, "{subject}", vec![rule("*", "audit:any", String, false)], "onto"),
        spec(
            "uc2-consent",
            TripleFile,
            "{subject}",
            vec![
                rule("audit:consentEvaluated", "audit:consentEvaluated", Boolean, false),
                rule("audit:dataCollected", "audit:dataCollected", Boolean, false),
            ],
            "consent-check",
        ),
        with_paths(
            spec(
                "uc2-libraries",
                DelimitedTable,
                "study:{study}",
                vec![rule("library", "audit:usedLibrary", String, true)],
                "analysis",
            ),
            Some("run"),
            None,
            Some("at"),
        ),
        with_paths(
            spec(
                "uc2-scripts",
                NestedRecord,
                "script:{study}/{script.name}",
                vec![
                    rule("script.sha256", "audit:scriptDigest", String, true),
                    rule("script.locator", "audit:scriptLocation", String, true),
                ],
                "analysis",
            ),
            Some("run"),
            None,
            Some("at"),
        ),
    ]
}

fn component(id: &str, kind: ComponentKind, phases: &[LifecyclePhase]) -> Component {
    Component { id: id.into(), name: id.replace('-', " "), kind, phase_coverage: phases.iter().copied().collect() }
}

fn flow(from: &str, to: &str, label: &str) -> DataFlow {
    DataFlow { from: from.into(), to: to.into(), payload_label: label.into() }
}

fn typed(predicate: &str, object_type: ObjectType) -> StatementPattern {
    StatementPattern { object_type: Some(object_type), ..StatementPattern::predicate(predicate) }
}

fn binding(id: &str, component: &str, format: BindingFormat, mapping: &str, patterns: Vec<StatementPattern>) -> CollectorBinding {
    CollectorBinding {
        binding_id: id.into(),
        component_id: component.into(),
        source_format: format,
        mapping_ref: mapping.into(),
        provides_patterns: patterns,
    }
}

pub fn uc1_system() -> SystemDescription {
    use ComponentKind::*;
    use LifecyclePhase::*;
    SystemDescription {
        system_id: "permit-document-analysis".into(),
        components: vec![
            component("ui", Ui, &[Exploitation]),
            component("svc-ingest", NonMlService, &[Exploitation]),
            component("ml-ner", MlModel, &[Training, Exploitation]),
            component("ml-linker", MlModel, &[Training, Exploitation]),
            component("svc-export", NonMlService, &[Exploitation]),
            component("onto", Ontology, &[Design, Exploitation]),
        ],
        data_flows: vec![
            flow("ui", "svc-ingest", "scanned documents"),
            flow("svc-ingest", "ml-ner", "document text"),
            flow("ml-ner", "ml-linker", "entities"),
            flow("onto", "ml-linker", "entity types"),
            flow("ml-linker", "svc-export", "linked entities"),
            flow("svc-export", "ui", "extraction results"),
        ],
        phases_in_scope: [Exploitation].into(),
    }
}

pub fn uc1_bindings() -> Vec<CollectorBinding> {
    use BindingFormat::*;
    use ObjectType::*;
    let status = || typed("audit:status", String);
    vec![
        binding("b-ui", "ui", DelimitedTable, "uc1-corrections", vec![status(), typed("audit:userCorrection", String)]),
        binding(
            "b-svc-ingest",
            "svc-ingest",
            NestedRecord,
            "uc1-inputs",
            vec![status(), typed("audit:inputDigest", String), typed("audit:inputLocation", String)],
        ),
        binding(
            "b-ml-ner",
            "ml-ner",
            NestedRecord,
            "uc1-ml-output",
            vec![status(), typed("audit:confidence", Decimal), typed("audit:entityType", String)],
        ),
        binding("b-ml-linker", "ml-linker", NestedRecord, "uc1-links", vec![status(), typed("audit:linkedTo", Entity)]),
        binding("b-svc-export", "svc-export", NestedRecord, "uc1-status", vec![status()]),
        binding("b-onto", "onto", TripleFile, "uc1-ontology", vec![status(), typed("rdfs:label", String)]),
    ]
}

pub fn uc2_system() -> SystemDescription {
    use ComponentKind::*;
    use LifecyclePhase::*;
    SystemDescription {
        system_id: "medical-data-analysis".into(),
        components: vec![
            component("ui", Ui, &[Exploitation]),
            component("consent-check", ConsentCheck, &[Exploitation]),
            component("data-store", DataStore, &[Exploitation]),
            component("analysis", MlModel, &[Development, Exploitation]),
        ],
        data_flows: vec![
            flow("ui", "consent-check", "data collection request"),
            flow("consent-check", "data-store", "consented records"),
            flow("data-store", "analysis", "study data"),
            flow("analysis", "ui", "study results"),
        ],
        phases_in_scope: [Exploitation].into(),
    }
}

pub fn uc2_bindings() -> Vec<CollectorBinding> {
    use BindingFormat::*;
    use ObjectType::*;
    vec![
        binding(
            "b-consent",
            "consent-check",
            TripleFile,
            "uc2-consent",
            vec![typed("audit:consentEvaluated", Boolean), typed("audit:dataCollected", Boolean)],
        ),
        binding("b-libraries", "analysis", DelimitedTable, "uc2-libraries", vec![typed("audit:usedLibrary", String)]),
        binding(
            "b-scripts",
            "analysis",
            NestedRecord,
            "uc2-scripts",
            vec![typed("audit:scriptDigest", String), typed("audit:scriptLocation", String)],
        ),
    ]
}

pub fn run_id(use_case: UseCase, n: usize) -> String {
    format!("{}-run-{:04}", use_case.as_str(), n + 1)
}

fn source(file: &str, mapping: &str, format: SourceFormat) -> SourceEntry {
    SourceEntry { file: file.into(), mapping_id: mapping.into(), format, recorded_at: None }
}

fn simulate_uc1(config: &SimulatorConfig, rng: &mut ChaCha8Rng) -> SimOutput {
    let f = config.fault_rates;
    let mut status = Vec::new();
    let mut ml = Vec::new();
    let mut links = Vec::new();
    let mut inputs = Vec::new();
    let mut corrections = String::from("run,entity,corrected_type,at\n");
    let mut n_corrections = 0;
    let mut run_success = BTreeMap::new();
    let mut confidences: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    let components: Vec<String> = uc1_system().components.into_iter().map(|c| c.id).collect();

    for n in 0..config.n_runs {
        let run = run_id(UseCase::Uc1, n);
        let start = UC1_BASE_MS + n as i64 * 4 * HOUR_MS + rng.gen_range(0..HOUR_MS);
        let failed_component = rng.gen_bool(f.run_failure).then(|| rng.gen_range(0..components.len()));

        let doc_id = format!("doc-{:04}", n + 1);
        let scan = format!("{}:{}:{}", run, doc_id, rng.gen::<u64>());
        inputs.push(json!({
            "run": run,
            "at": start,
            "document": {
                "id": doc_id,
                "sha256": fingerprint(scan.as_bytes()),
                "locator": format!("s3://permit-scans/{run}/{doc_id}.tiff"),
                "media_type": "image/tiff",
            },
        }));

        let n_entities = rng.gen_range(2..=6);
        for e in 0..n_entities {
            let at = start + 1_000 + e as i64 * 250;
            let entity_type = *ENTITY_TYPES.choose(rng).expect("non-empty");
            let confidence = rng.gen_range(5_000..=9_999) as f64 / 10_000.0;
            let id = format!("e{:02}", e + 1);
            ml.push(json!({
                "run": run,
                "component": "ml-ner",
                "at": at,
                "entity": {"id": id, "type": entity_type, "confidence": confidence},
            }));
            confidences.entry((entity_type.to_owned(), at.div_euclid(DAY_MS))).or_default().push(confidence);
            links.push(json!({
                "run": run,
                "component": "ml-linker",
                "at": at + 100,
                "entity": id,
                "target": format!("type:{entity_type}"),
            }));
            if rng.gen_bool(f.correction_rate) {
                let other = ENTITY_TYPES.iter().filter(|t| **t != entity_type).collect::<Vec<_>>();
                let corrected = other.choose(rng).expect("four types");
                let _ = writeln!(corrections, "{run},{id},{corrected},{}", ts(at + 60_000).to_iso());
                n_corrections += 1;
            }
        }

        for (i, c) in components.iter().enumerate() {
            let outcome = if failed_component == Some(i) { "failed" } else { "completed" };
            status.push(json!({"run": run, "component": c, "status": outcome, "at": start + 5_000 + i as i64}));
        }
        run_success.insert(run, failed_component.is_none());
    }

    let mut ontology = String::from("# entity type vocabulary\n");
    for t in ENTITY_TYPES {
        let _ = writeln!(ontology, "type:{t}\trdfs:label\t{}", t.replace('_', " "));
        let _ = writeln!(ontology, "type:{t}\tskos:inScheme\tscheme:permit-entities");
    }

    let avg_confidence = confidences
        .iter()
        .map(|((t, day), values)| AvgConfidence {
            entity_type: t.clone(),
            day: ts(day * DAY_MS),
            count: values.len(),
            avg: values.iter().sum::<f64>() / values.len() as f64,
        })
        .collect();
    let truth = Uc1Truth {
        avg_confidence,
        run_success,
        confidence_records: ml.len(),
        corrections: n_corrections,
    };

    use SourceFormat::*;
    let mut ontology_source = source("uc1-ontology.tsv", "uc1-ontology", TripleFile);
    ontology_source.recorded_at = Some(ts(UC1_BASE_MS));
    let manifest = Manifest {
        config: config.clone(),
        goal: AuditGoal::Robustness,
        questions: vec!["uc1-q1".into(), "uc1-q2".into()],
        sources: vec![
            source("uc1-status.jsonl", "uc1-status", NestedRecord),
            source("uc1-inputs.jsonl", "uc1-inputs", NestedRecord),
            source("uc1-ml-output.jsonl", "uc1-ml-output", NestedRecord),
            source("uc1-links.jsonl", "uc1-links", NestedRecord),
            source("uc1-corrections.csv", "uc1-corrections", DelimitedTable),
            ontology_source,
        ],
    };
    let mut files = BTreeMap::new();
    files.insert("uc1-status.jsonl".into(), jsonl(&status));
    files.insert("uc1-inputs.jsonl".into(), jsonl(&inputs));
    files.insert("uc1-ml-output.jsonl".into(), jsonl(&ml));
    files.insert("uc1-links.jsonl".into(), jsonl(&links));
    files.insert("uc1-corrections.csv".into(), corrections.into_bytes());
    files.insert("uc1-ontology.tsv".into(), ontology.into_bytes());
    finish(manifest, uc1_system(), uc1_bindings(), GroundTruth::Uc1(truth), files)
}

fn simulate_uc2(config: &SimulatorConfig, rng: &mut ChaCha8Rng) -> SimOutput {
    let f = config.fault_rates;
    let studies: Vec<(String, Vec<&str>)> = (0..N_STUDIES)
        .map(|s| {
            let k = rng.gen_range(2..=5);
            let mut libs: Vec<&str> = LIBRARY_POOL.choose_multiple(rng, k).copied().collect();
            libs.sort_unstable();
            (format!("s{}", s + 1), libs)
        })
        .collect();

    let mut consent = String::from("# consent evaluation trace\n");
    let mut libraries = String::from("study,run,library,at\n");
    let mut scripts = Vec::new();
    let mut consent_evaluated = BTreeMap::new();
    let mut study_of_run = BTreeMap::new();
    let mut used: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

    for n in 0..config.n_runs {
        let run = run_id(UseCase::Uc2, n);
        let start = UC2_BASE_MS + n as i64 * 6 * HOUR_MS + rng.gen_range(0..HOUR_MS);
        let (study, libs) = &studies[n % N_STUDIES];
        study_of_run.insert(run.clone(), study.clone());

        let skipped = rng.gen_bool(f.consent_skip);
        let _ = writeln!(consent, "run:{run}\taudit:dataCollected\ttrue\t{run}");
        if !skipped {
            let _ = writeln!(consent, "run:{run}\taudit:consentEvaluated\ttrue\t{run}");
        }
        consent_evaluated.insert(run.clone(), !skipped);

        // The first run of a study uses every configured library.
        let chosen: Vec<&str> = if n < N_STUDIES {
            libs.clone()
        } else {
            let k = rng.gen_range(1..=libs.len());
            let mut c: Vec<&str> = libs.choose_multiple(rng, k).copied().collect();
            c.sort_unstable();
            c
        };
        for (i, lib) in chosen.iter().enumerate() {
            let _ = writeln!(libraries, "{study},{run},{lib},{}", ts(start + 10_000 + i as i64).to_iso());
            used.entry(study.clone()).or_default().insert((*lib).to_owned());
        }
        let name = format!("analysis-{}.R", n % 3 + 1);
        let body = format!("# {study} {name}\nlibrary({})\n", chosen.join(")\nlibrary("));
        scripts.push(json!({
            "run": run,
            "study": study,
            "at": start + 20_000,
            "script": {
                "name": name,
                "sha256": fingerprint(body.as_bytes()),
                "locator": format!("git://studies/{study}/{name}"),
            },
        }));
    }

    let study_libraries: BTreeMap<String, Vec<String>> =
        used.into_iter().map(|(s, libs)| (s, libs.into_iter().collect())).collect();
    let truth = Uc2Truth { consent_evaluated, study_libraries, study_of_run };

    use SourceFormat::*;
    let mut consent_source = source("uc2-consent.tsv", "uc2-consent", TripleFile);
    consent_source.recorded_at = Some(ts(UC2_BASE_MS));
    let manifest = Manifest {
        config: config.clone(),
        goal: AuditGoal::Compliance,
        questions: vec!["uc2-q1".into(), "uc2-q2".into()],
        sources: vec![
            consent_source,
            source("uc2-libraries.csv", "uc2-libraries", DelimitedTable),
            source("uc2-scripts.jsonl", "uc2-scripts", NestedRecord),
        ],
    };
    let mut files = BTreeMap::new();
    files.insert("uc2-consent.tsv".into(), consent.into_bytes());
    files.insert("uc2-libraries.csv".into(), libraries.into_bytes());
    files.insert("uc2-scripts.jsonl".into(), jsonl(&scripts));
    finish(manifest, uc2_system(), uc2_bindings(), GroundTruth::Uc2(truth), files)
}

fn finish(
    manifest: Manifest,
    system: SystemDescription,
    bindings: Vec<CollectorBinding>,
    ground_truth: GroundTruth,
    mut files: BTreeMap<String, Vec<u8>>,
) -> SimOutput {
    files.insert("manifest.json".into(), pretty(&manifest));
    files.insert("system.json".into(), pretty(&system));
    files.insert("bindings.json".into(), pretty(&bindings));
    files.insert("ground_truth.json".into(), pretty(&ground_truth));
    SimOutput { manifest, system, bindings, ground_truth, files }
}

pub fn simulate(config: &SimulatorConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(match config.use_case {
        UseCase::Uc1 => simulate_uc1(config, &mut rng),
        UseCase::Uc2 => simulate_uc2(config, &mut rng),
    })
}

impl SimOutput {
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    /// Ingest requests for every source file, in manifest order.
    pub fn batches(&self) -> Result<Vec<(String, IngestRequest)>, SimError> {
        batches_from(&self.manifest, |name| {
            self.files.get(name).cloned().ok_or_else(|| SimError::Malformed(format!("missing {name}")))
        })
    }
}

/// Reads a simulator output directory back into ingest requests.
pub fn batches_from_dir(dir: &Path) -> Result<(Manifest, Vec<(String, IngestRequest)>), SimError> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
        .map_err(|e| SimError::Malformed(e.to_string()))?;
    let batches = batches_from(&manifest, |name| Ok(std::fs::read(dir.join(name))?))?;
    Ok((manifest, batches))
}

fn batches_from(
    manifest: &Manifest,
    read: impl Fn(&str) -> Result<Vec<u8>, SimError>,
) -> Result<Vec<(String, IngestRequest)>, SimError> {
    let mut out = Vec::new();
    for entry in &manifest.sources {
        let bytes = read(&entry.file)?;
        let text = String::from_utf8(bytes).map_err(|e| SimError::Malformed(e.to_string()))?;
        let records = match entry.format {
            SourceFormat::NestedRecord => parse_nested_records(&text),
            SourceFormat::DelimitedTable => parse_delimited_table(&text),
            SourceFormat::TripleFile => parse_triple_file(&text),
        }
        .map_err(|e| SimError::Malformed(format!("{}: {e}", entry.file)))?;
        let stem = entry.file.split('.').next().unwrap_or(&entry.file);
        for (i, chunk) in records.chunks(RECORDS_PER_BATCH).enumerate() {
            let key = format!(
                "{}-s{}-n{}-{stem}-{:04}",
                manifest.config.use_case.as_str(),
                manifest.config.seed,
                manifest.config.n_runs,
                i + 1
            );
            out.push((
                key,
                IngestRequest {
                    mapping_id: Some(entry.mapping_id.clone()),
                    records: Some(chunk.to_vec()),
                    statements: None,
                    context: MappingContext { recorded_at: entry.recorded_at, ..MappingContext::default() },
                },
            ));
        }
    }
    Ok(out)
}
