//! Seeded checks for ingest idempotency, dedup and crash recovery.

#![allow(dead_code)]

use std::collections::HashSet;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use auditbox_core::ingest::{BatchItem, Durability, IngestBatch, LogSink, StatementStore};
use auditbox_core::model::{canonicalize_statement, StatementDraft, Timestamp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random::{random_draft, random_query, BASE_MS};

/// Sink that keeps the log bytes in memory.
#[derive(Clone, Default)]
pub struct MemSink(pub Arc<Mutex<Vec<u8>>>);

impl LogSink for MemSink {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.lock().unwrap().extend_from_slice(bytes);
        Ok(())
    }
}

impl MemSink {
    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

fn at(i: usize) -> Timestamp {
    Timestamp::from_millis(BASE_MS + 1_000 * i as i64).unwrap()
}

fn bad_draft<R: Rng>(rng: &mut R) -> StatementDraft {
    let mut d = random_draft(rng, 6);
    d.predicate = "nocolon".into();
    d
}

/// A schedule of batches drawn from a shared pool of drafts so that batches
/// overlap, followed by re-sends of earlier keys.
pub fn random_schedule<R: Rng>(rng: &mut R) -> Vec<(String, Vec<BatchItem>)> {
    let pool: Vec<StatementDraft> = (0..rng.gen_range(5..60)).map(|_| random_draft(rng, 6)).collect();
    let n_batches = rng.gen_range(1..12);
    let mut originals: Vec<(String, Vec<BatchItem>)> = Vec::new();
    let mut schedule = Vec::new();
    for b in 0..n_batches {
        if !originals.is_empty() && rng.gen_bool(0.3) {
            schedule.push(originals.choose(rng).unwrap().clone());
        }
        let len = rng.gen_range(0..25);
        let items: Vec<BatchItem> = (0..len)
            .map(|_| match rng.gen_range(0..20) {
                0 => BatchItem::Draft(bad_draft(rng)),
                1 => BatchItem::Invalid("unparsable record".into()),
                _ => BatchItem::Draft(pool.choose(rng).unwrap().clone()),
            })
            .collect();
        let entry = (format!("batch-{b}"), items);
        originals.push(entry.clone());
        schedule.push(entry);
    }
    for _ in 0..rng.gen_range(0..4) {
        schedule.push(originals.choose(rng).unwrap().clone());
    }
    schedule
}

/// Ingests a random schedule with re-sends and checks it against an
/// independent dedup of the schedule's drafts in first-commit order.
pub fn check_idempotency(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = random_schedule(&mut rng);

    let sink = MemSink::default();
    let mut store = StatementStore::with_sink(Box::new(sink.clone()));
    let mut first_receipts: Vec<(String, Vec<u8>)> = Vec::new();
    let mut expected_ids: Vec<String> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut seen_keys: HashSet<String> = HashSet::new();

    for (i, (key, items)) in schedule.iter().enumerate() {
        let before = sink.bytes();
        let before_len = store.len();
        let receipt = store.ingest(IngestBatch::new(key.clone(), items.clone()), at(i)).map_err(|e| e.to_string())?;
        let receipt_bytes = serde_json::to_vec(&receipt).unwrap();
        if receipt.accepted + receipt.deduplicated + receipt.rejected.len() != items.len() {
            return Err(format!("receipt counts do not add up for {key}"));
        }
        if seen_keys.insert(key.clone()) {
            for item in items {
                if let BatchItem::Draft(d) = item {
                    if let Ok(st) = canonicalize_statement(d.clone()) {
                        if seen_ids.insert(st.id().to_owned()) {
                            expected_ids.push(st.id().to_owned());
                        }
                    }
                }
            }
            first_receipts.push((key.clone(), receipt_bytes));
        } else {
            let original = &first_receipts.iter().find(|(k, _)| k == key).unwrap().1;
            if *original != receipt_bytes {
                return Err(format!("re-sent key {key} produced a different receipt"));
            }
            if sink.bytes() != before || store.len() != before_len {
                return Err(format!("re-sent key {key} changed the store"));
            }
        }
    }

    let got: Vec<&str> = store.statements().iter().map(|s| s.statement.id()).collect();
    if got != expected_ids {
        return Err(format!("store holds {} statements, dedup oracle expects {}", got.len(), expected_ids.len()));
    }
    let unique: HashSet<&str> = got.iter().copied().collect();
    if unique.len() != got.len() {
        return Err("duplicate statement id in the log".into());
    }

    // Same schedule without re-sends gives a byte-identical log.
    let clean_sink = MemSink::default();
    let mut clean = StatementStore::with_sink(Box::new(clean_sink.clone()));
    let mut done = HashSet::new();
    for (i, (key, items)) in schedule.iter().enumerate() {
        if done.insert(key.clone()) {
            clean.ingest(IngestBatch::new(key.clone(), items.clone()), at(i)).map_err(|e| e.to_string())?;
        }
    }
    if clean_sink.bytes() != sink.bytes() {
        return Err("log differs from the log of the schedule without re-sends".into());
    }
    store.check_indices()
}

/// Statement ids after each committed batch, with the log length at that point.
struct Committed {
    log_len: usize,
    ids: Vec<String>,
}

fn write_log(dir: &Path, seed: u64) -> Result<(Vec<u8>, Vec<Committed>), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = dir.join("statements.jsonl");
    let (mut store, _) = StatementStore::open(&path, Durability::Buffered).map_err(|e| e.to_string())?;
    let mut committed = vec![Committed { log_len: 0, ids: Vec::new() }];
    for b in 0..rng.gen_range(1..10) {
        let items: Vec<BatchItem> =
            (0..rng.gen_range(0..40)).map(|_| BatchItem::Draft(random_draft(&mut rng, 20))).collect();
        store.ingest(IngestBatch::new(format!("k{b}"), items), at(b)).map_err(|e| e.to_string())?;
        committed.push(Committed {
            log_len: std::fs::metadata(&path).map_err(|e| e.to_string())?.len() as usize,
            ids: store.statements().iter().map(|s| s.statement.id().to_owned()).collect(),
        });
    }
    drop(store);
    Ok((std::fs::read(&path).map_err(|e| e.to_string())?, committed))
}

/// Truncates a generated log at `cuts` random line boundaries (plus one
/// mid-line cut) and checks that recovery yields a committed-batch prefix
/// with consistent indices.
pub fn check_crash_recovery(seed: u64, cuts: usize) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (log, committed) = write_log(dir.path(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let boundaries: Vec<usize> =
        std::iter::once(0).chain(log.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1)).collect();

    let mut checked = 0;
    for round in 0..=cuts {
        let cut = if round < cuts {
            *boundaries.choose(&mut rng).unwrap()
        } else {
            rng.gen_range(0..=log.len())
        };
        let path = dir.path().join(format!("cut-{round}.jsonl"));
        std::fs::write(&path, &log[..cut]).map_err(|e| e.to_string())?;
        let (store, _) = StatementStore::recover(&path).map_err(|e| format!("cut at {cut}: {e}"))?;
        let expected = committed.iter().rev().find(|c| c.log_len <= cut).unwrap();
        let got: Vec<&str> = store.statements().iter().map(|s| s.statement.id()).collect();
        if got != expected.ids {
            return Err(format!("cut at byte {cut}: recovered {} statements, expected {}", got.len(), expected.ids.len()));
        }
        store.check_indices().map_err(|e| format!("cut at byte {cut}: {e}"))?;
        for _ in 0..5 {
            let query = random_query(&mut rng);
            for pattern in &query.patterns {
                let Ok(indexed) = store.scan(pattern, None) else { continue };
                let indexed: Vec<u64> = indexed.map(|s| s.seq).collect();
                let full: Vec<u64> = store.scan_unindexed(pattern, None).unwrap().iter().map(|s| s.seq).collect();
                if indexed != full {
                    return Err(format!("cut at byte {cut}: indexed scan differs from full scan"));
                }
            }
        }

        // The recovered log accepts further batches and recovers again.
        let (mut reopened, _) = StatementStore::open(&path, Durability::Buffered).map_err(|e| e.to_string())?;
        let extra = vec![BatchItem::Draft(random_draft(&mut rng, 1000))];
        reopened.ingest(IngestBatch::new("after-crash", extra), at(99)).map_err(|e| e.to_string())?;
        let len = reopened.len();
        drop(reopened);
        let (again, report) = StatementStore::recover(&path).map_err(|e| e.to_string())?;
        if again.len() != len || report.torn_tail || report.uncommitted_statements != 0 {
            return Err(format!("cut at byte {cut}: log not clean after reopening"));
        }
        checked += 1;
    }
    Ok(checked)
}
