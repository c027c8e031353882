//! Append-only JSONL trace sink shared by concurrent requests.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use steproute_core::record::{append_jsonl, read_jsonl, RecordError, TraceRecord};
use steproute_core::trace::Trace;

#[derive(Debug)]
pub struct TraceSink {
    path: PathBuf,
    lock: Mutex<()>,
}

impl TraceSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), lock: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Wraps `trace` in a record with a fresh id and the current time and
    /// appends it. Returns the record.
    pub fn record(&self, trace: &Trace) -> Result<TraceRecord, RecordError> {
        let record = new_record(trace);
        self.append(&record)?;
        Ok(record)
    }

    pub fn append(&self, record: &TraceRecord) -> Result<(), RecordError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        append_jsonl(&self.path, record)
    }

    pub fn find(&self, id: &str) -> Result<Option<TraceRecord>, RecordError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        if !self.path.exists() {
            return Ok(None);
        }
        Ok(read_jsonl(&self.path)?.into_iter().find(|r| r.id == id))
    }
}

pub fn new_record(trace: &Trace) -> TraceRecord {
    let id = uuid::Uuid::new_v4().to_string();
    let ts = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    TraceRecord::from_trace(id, ts, trace)
}
