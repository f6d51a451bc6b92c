//! Batch ingestion with idempotent persistence and range queries.
//!
//! Batches are keyed by `(device_id, seq)`; a replayed key is acknowledged
//! without touching the store. Records are additionally deduplicated on
//! `(device_id, ts)`. When a data directory is configured every accepted
//! batch is appended to `records.jsonl` before it becomes visible, one
//! [`StoredRecord`] per line. The last line written for a batch carries
//! `"batch_end": true`; on open, any trailing lines after the final marker
//! are a torn write and are truncated away, so a crash never exposes half a
//! batch.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device_sim::SensorRecord;

/// Serialized batches above this size are logged as suspicious.
pub const BATCH_SIZE_WARN_BYTES: usize = 256 * 1024;

pub const LOG_FILE_NAME: &str = "records.jsonl";

/// The records uploaded by one device connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkBatch {
    pub device_id: String,
    pub seq: u64,
    pub flush_ts: i64,
    pub battery_pct: f64,
    pub records: Vec<SensorRecord>,
}

impl UplinkBatch {
    /// Checks the wire-level invariants of a batch.
    pub fn validate(&self) -> Result<(), String> {
        if self.device_id.trim().is_empty() {
            return Err("device_id must not be empty".into());
        }
        if !valid_pct(self.battery_pct) {
            return Err(format!("battery_pct {} outside [0, 100]", self.battery_pct));
        }
        if self.records.is_empty() {
            return Err("records must not be empty".into());
        }
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 && r.ts <= self.records[i - 1].ts {
                return Err(format!(
                    "records[{i}].ts {} is not after records[{}].ts {}",
                    r.ts,
                    i - 1,
                    self.records[i - 1].ts
                ));
            }
            if !r.accel.in_range() {
                return Err(format!("records[{i}] raw counts outside [-512, 512]"));
            }
            if !valid_pct(r.battery_pct) {
                return Err(format!("records[{i}].battery_pct {} outside [0, 100]", r.battery_pct));
            }
            if !(r.lat.is_finite() && r.lon.is_finite()) {
                return Err(format!("records[{i}] has a non-finite position"));
            }
        }
        Ok(())
    }
}

fn valid_pct(v: f64) -> bool {
    (0.0..=100.0).contains(&v)
}

/// A persisted record with its device and provenance batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub device_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub record: SensorRecord,
}

impl StoredRecord {
    pub fn ts(&self) -> i64 {
        self.record.ts
    }
}

/// Flattens a batch into stored records, in batch order.
pub fn batch_to_stored(batch: &UplinkBatch) -> Vec<StoredRecord> {
    batch
        .records
        .iter()
        .map(|r| StoredRecord { device_id: batch.device_id.clone(), seq: batch.seq, record: r.clone() })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    #[serde(flatten)]
    stored: StoredRecord,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    batch_end: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    /// A fresh batch; `new_records` excludes records already held under another seq.
    Stored { new_records: usize },
    /// `(device_id, seq)` was accepted before; nothing changed.
    Duplicate,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("malformed batch: {0}")]
    Malformed(String),
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("invalid range: from {from} is after to {to}")]
    Range { from: i64, to: i64 },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt log {path} line {line}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: serde_json::Error },
}

/// Ordered record index with an optional append-only log behind it.
#[derive(Debug, Default)]
pub struct RecordStore {
    records: BTreeMap<(String, i64), StoredRecord>,
    accepted: HashSet<(String, u64)>,
    log: Option<(PathBuf, File)>,
    /// Set when a failed append could not be rolled back; the log may then
    /// hold a partial batch and further writes would commit it.
    poisoned: bool,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the log in `dir` and rebuilds the index from it.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE_NAME);
        let mut store = Self::default();

        if path.exists() {
            let file = File::open(&path).map_err(io_err(&path))?;
            let mut reader = BufReader::new(file);
            let mut pending = Vec::new();
            let mut committed_len = 0u64;
            let mut offset = 0u64;
            let mut line_no = 0usize;
            let mut buf = String::new();
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf).map_err(io_err(&path))?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                offset += n as u64;
                if !buf.ends_with('\n') {
                    // torn final line
                    break;
                }
                let line: LogLine = match serde_json::from_str(buf.trim_end()) {
                    Ok(l) => l,
                    Err(source) => {
                        if Self::tail_is_uncommitted(&mut reader) {
                            break;
                        }
                        return Err(StoreError::Corrupt { path: path.clone(), line: line_no, source });
                    }
                };
                let end = line.batch_end;
                pending.push(line.stored);
                if end {
                    for rec in pending.drain(..) {
                        store.insert(rec);
                    }
                    committed_len = offset;
                }
            }
            let on_disk = fs::metadata(&path).map_err(io_err(&path))?.len();
            if committed_len < on_disk {
                log::warn!(
                    "truncating {} uncommitted bytes from {}",
                    on_disk - committed_len,
                    path.display()
                );
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                f.set_len(committed_len).map_err(io_err(&path))?;
                f.sync_all().map_err(io_err(&path))?;
            }
        }

        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        store.log = Some((path, file));
        Ok(store)
    }

    /// A parse failure is tolerated only inside the uncommitted tail, i.e.
    /// when no later line closes a batch.
    fn tail_is_uncommitted(reader: &mut BufReader<File>) -> bool {
        let mut rest = String::new();
        loop {
            rest.clear();
            match reader.read_line(&mut rest) {
                Ok(0) => return true,
                Ok(_) => {
                    if let Ok(line) = serde_json::from_str::<LogLine>(rest.trim_end()) {
                        if line.batch_end {
                            return false;
                        }
                    }
                }
                Err(_) => return true,
            }
        }
    }

    fn insert(&mut self, rec: StoredRecord) {
        self.accepted.insert((rec.device_id.clone(), rec.seq));
        self.records.insert((rec.device_id.clone(), rec.record.ts), rec);
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_batch(&self, device_id: &str, seq: u64) -> bool {
        self.accepted.contains(&(device_id.to_string(), seq))
    }

    /// Validates and stores a batch as one unit.
    pub fn ingest(&mut self, batch: &UplinkBatch) -> Result<IngestOutcome, IngestError> {
        batch.validate().map_err(IngestError::Malformed)?;
        if self.has_batch(&batch.device_id, batch.seq) {
            return Ok(IngestOutcome::Duplicate);
        }
        if let Ok(body) = serde_json::to_vec(batch) {
            if body.len() > BATCH_SIZE_WARN_BYTES {
                log::warn!(
                    "batch {}/{} is {} bytes, above the {} byte soft limit",
                    batch.device_id,
                    batch.seq,
                    body.len(),
                    BATCH_SIZE_WARN_BYTES
                );
            }
        }

        let fresh: Vec<StoredRecord> = batch_to_stored(batch)
            .into_iter()
            .filter(|r| !self.records.contains_key(&(r.device_id.clone(), r.record.ts)))
            .collect();

        if self.poisoned {
            return Err(IngestError::Io(io::Error::other("log is in an unknown state after a failed write")));
        }
        if let Some((_, file)) = self.log.as_mut() {
            if !fresh.is_empty() {
                let mut buf = Vec::new();
                for (i, rec) in fresh.iter().enumerate() {
                    let line = LogLine { stored: rec.clone(), batch_end: i + 1 == fresh.len() };
                    serde_json::to_writer(&mut buf, &line).map_err(io::Error::from)?;
                    buf.push(b'\n');
                }
                let committed = file.metadata()?.len();
                if let Err(e) = file.write_all(&buf).and_then(|()| file.sync_data()) {
                    if file.set_len(committed).and_then(|()| file.sync_data()).is_err() {
                        self.poisoned = true;
                    }
                    return Err(e.into());
                }
            }
        }

        let new_records = fresh.len();
        for rec in fresh {
            self.insert(rec);
        }
        self.accepted.insert((batch.device_id.clone(), batch.seq));
        Ok(IngestOutcome::Stored { new_records })
    }

    /// Records of `device_id` with `from <= ts <= to`, ordered by ts.
    pub fn query(&self, device_id: &str, from: i64, to: i64) -> Result<Vec<StoredRecord>, QueryError> {
        if from > to {
            return Err(QueryError::Range { from, to });
        }
        let lo = (device_id.to_string(), from);
        let hi = (device_id.to_string(), to);
        Ok(self.records.range(lo..=hi).map(|(_, r)| r.clone()).collect())
    }

    pub fn devices(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (device, _) in self.records.keys() {
            if out.last() != Some(device) {
                out.push(device.clone());
            }
        }
        out
    }

    /// Every record ordered by `(device_id, ts)`.
    pub fn dump(&self) -> Vec<StoredRecord> {
        self.records.values().cloned().collect()
    }

    /// Canonical JSONL rendering of [`Self::dump`], for byte-level comparisons.
    pub fn dump_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in self.records.values() {
            serde_json::to_writer(&mut out, rec).expect("records serialize");
            out.push(b'\n');
        }
        out
    }

    pub fn sync(&mut self) -> io::Result<()> {
        match self.log.as_mut() {
            Some((_, f)) => f.sync_all(),
            None => Ok(()),
        }
    }
}

/// Reads a JSONL file of stored records. Commit markers are ignored.
pub fn read_stored_jsonl(path: &Path) -> Result<Vec<StoredRecord>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line)
            .map_err(|source| StoreError::Corrupt { path: path.into(), line: i + 1, source })?;
        out.push(parsed.stored);
    }
    Ok(out)
}

/// Keyed access in front of a [`RecordStore`].
#[derive(Debug)]
pub struct IngestService {
    keys: HashSet<String>,
    store: RecordStore,
}

impl IngestService {
    pub fn new<I, S>(keys: I, store: RecordStore) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { keys: keys.into_iter().map(Into::into).filter(|k: &String| !k.is_empty()).collect(), store }
    }

    pub fn authorized(&self, api_key: &str) -> bool {
        self.keys.contains(api_key)
    }

    pub fn ingest_batch(&mut self, batch: &UplinkBatch, api_key: &str) -> Result<IngestOutcome, IngestError> {
        if !self.authorized(api_key) {
            return Err(IngestError::Unauthorized);
        }
        self.store.ingest(batch)
    }

    pub fn query_records(
        &self,
        device_id: &str,
        from: i64,
        to: i64,
        api_key: &str,
    ) -> Result<Vec<StoredRecord>, QueryError> {
        if !self.authorized(api_key) {
            return Err(QueryError::Unauthorized);
        }
        self.store.query(device_id, from, to)
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut RecordStore {
        &mut self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device_sim::RawTriple;

    fn rec(ts: i64) -> SensorRecord {
        SensorRecord {
            ts,
            battery_pct: 90.0,
            accel: RawTriple::new(70, -32, 3),
            lat: 51.0,
            lon: 4.0,
            temp_c: None,
            hum_pct: None,
        }
    }

    fn batch(seq: u64, ts: &[i64]) -> UplinkBatch {
        UplinkBatch {
            device_id: "dev-a".into(),
            seq,
            flush_ts: 1_000_000,
            battery_pct: 88.0,
            records: ts.iter().map(|&t| rec(t)).collect(),
        }
    }

    fn service() -> IngestService {
        IngestService::new(["secret"], RecordStore::in_memory())
    }

    #[test]
    fn fresh_batch_is_stored() {
        let mut svc = service();
        let out = svc.ingest_batch(&batch(0, &[1, 2, 3]), "secret").unwrap();
        assert_eq!(out, IngestOutcome::Stored { new_records: 3 });
        assert_eq!(svc.store().len(), 3);
    }

    #[test]
    fn replayed_seq_is_acknowledged_without_storing() {
        let mut svc = service();
        let b = batch(0, &[1, 2, 3]);
        svc.ingest_batch(&b, "secret").unwrap();
        let before = svc.store().dump_jsonl();
        assert_eq!(svc.ingest_batch(&b, "secret").unwrap(), IngestOutcome::Duplicate);
        assert_eq!(svc.store().dump_jsonl(), before);
    }

    #[test]
    fn overlapping_seqs_keep_one_copy_per_ts() {
        let mut svc = service();
        svc.ingest_batch(&batch(0, &[1, 2]), "secret").unwrap();
        let out = svc.ingest_batch(&batch(1, &[1, 2, 3]), "secret").unwrap();
        assert_eq!(out, IngestOutcome::Stored { new_records: 1 });
        let all = svc.store().dump();
        assert_eq!(all.iter().map(|r| (r.ts(), r.seq)).collect::<Vec<_>>(), vec![(1, 0), (2, 0), (3, 1)]);
    }

    #[test]
    fn unsorted_batch_is_rejected() {
        let mut svc = service();
        let err = svc.ingest_batch(&batch(0, &[1, 3, 2]), "secret").unwrap_err();
        assert!(matches!(err, IngestError::Malformed(_)));
        assert!(svc.store().is_empty());
        // a rejected seq is not burnt
        assert!(!svc.store().has_batch("dev-a", 0));
    }

    #[test]
    fn malformed_fields_are_rejected() {
        let mut svc = service();
        let mut b = batch(0, &[1]);
        b.records[0].accel.x = 513;
        assert!(matches!(svc.ingest_batch(&b, "secret"), Err(IngestError::Malformed(_))));
        let empty = batch(1, &[]);
        assert!(matches!(svc.ingest_batch(&empty, "secret"), Err(IngestError::Malformed(_))));
        let mut b = batch(2, &[1]);
        b.battery_pct = 101.0;
        assert!(matches!(svc.ingest_batch(&b, "secret"), Err(IngestError::Malformed(_))));
        assert!(svc.store().is_empty());
    }

    #[test]
    fn wrong_key_is_unauthorized() {
        let mut svc = service();
        assert!(matches!(svc.ingest_batch(&batch(0, &[1]), "nope"), Err(IngestError::Unauthorized)));
        assert!(svc.store().is_empty());
        assert_eq!(svc.query_records("dev-a", 0, 10, "nope"), Err(QueryError::Unauthorized));
        // empty keys never authorize
        let svc = IngestService::new([""], RecordStore::in_memory());
        assert!(!svc.authorized(""));
    }

    #[test]
    fn query_bounds_are_inclusive() {
        let mut svc = service();
        assert!(svc.query_records("dev-a", 0, 100, "secret").unwrap().is_empty());
        svc.ingest_batch(&batch(0, &[10, 20, 30]), "secret").unwrap();
        let one = svc.query_records("dev-a", 20, 20, "secret").unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].ts(), 20);
        assert_eq!(svc.query_records("dev-a", 10, 30, "secret").unwrap().len(), 3);
        assert!(svc.query_records("dev-b", 0, 100, "secret").unwrap().is_empty());
        assert_eq!(svc.query_records("dev-a", 5, 4, "secret"), Err(QueryError::Range { from: 5, to: 4 }));
    }

    #[test]
    fn log_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        store.ingest(&batch(0, &[1, 2])).unwrap();
        store.ingest(&batch(1, &[3])).unwrap();
        let before = store.dump_jsonl();
        drop(store);
        let mut store = RecordStore::open(dir.path()).unwrap();
        assert_eq!(store.dump_jsonl(), before);
        assert_eq!(store.ingest(&batch(1, &[3])).unwrap(), IngestOutcome::Duplicate);
        assert_eq!(store.devices(), vec!["dev-a".to_string()]);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        store.ingest(&batch(0, &[1, 2])).unwrap();
        let committed = store.dump_jsonl();
        store.ingest(&batch(1, &[3, 4, 5])).unwrap();
        drop(store);
        let path = dir.path().join(LOG_FILE_NAME);
        let bytes = fs::read(&path).unwrap();
        // cut inside the second batch, after its first complete line
        let first_batch_end = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(1).unwrap().0 + 1;
        let third_line_end = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(2).unwrap().0 + 1;
        fs::write(&path, &bytes[..third_line_end + 7]).unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        assert_eq!(store.dump_jsonl(), committed);
        assert_eq!(fs::metadata(&path).unwrap().len(), first_batch_end as u64);
        assert!(!store.has_batch("dev-a", 1));
    }

    #[test]
    fn corrupt_committed_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        store.ingest(&batch(0, &[1, 2])).unwrap();
        store.ingest(&batch(1, &[3])).unwrap();
        drop(store);
        let path = dir.path().join(LOG_FILE_NAME);
        let text = fs::read_to_string(&path).unwrap();
        let broken = text.replacen("\"seq\":0", "\"seq\":", 1);
        fs::write(&path, broken).unwrap();
        assert!(matches!(RecordStore::open(dir.path()), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
