//! Append-only JSONL event logs, one per process, plus the clock-offset
//! sidecars applied when merging logs from different processes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{EventRecord, Stage};
use crate::clock::monotonic_ns;

/// Thread-safe appender; every line is flushed as written so a killed
/// process loses at most the line in flight.
pub struct EventLog {
    writer: Option<Mutex<BufWriter<File>>>,
}

impl EventLog {
    pub fn create(path: &Path) -> std::io::Result<Arc<EventLog>> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Arc::new(EventLog {
            writer: Some(Mutex::new(BufWriter::new(file))),
        }))
    }

    /// A log that drops everything; used when telemetry is not wanted.
    pub fn disabled() -> Arc<EventLog> {
        Arc::new(EventLog { writer: None })
    }

    pub fn record(&self, task_id: &str, topic: &str, stage: Stage) {
        self.record_at(task_id, topic, stage, monotonic_ns());
    }

    pub fn record_at(&self, task_id: &str, topic: &str, stage: Stage, t_ns: u64) {
        let Some(writer) = &self.writer else { return };
        let record = EventRecord {
            task_id: task_id.to_owned(),
            topic: topic.to_owned(),
            stage,
            t_ns,
        };
        let line = serde_json::to_string(&record).expect("event serializes");
        let mut w = writer.lock();
        // An event log write failure poisons every downstream metric, so
        // it aborts the run loudly rather than dropping samples.
        w.write_all(line.as_bytes()).expect("event log write");
        w.write_all(b"\n").expect("event log write");
        w.flush().expect("event log flush");
    }
}

/// Clock-offset sidecar: `offset_ns` converts this role's local monotonic
/// timestamps onto the relay's clock (`relay = local + offset`).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ClockOffsets {
    pub offset_ns: i64,
}

impl ClockOffsets {
    pub fn write(path: &Path, offset_ns: i64) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(
            path,
            serde_json::to_string(&ClockOffsets { offset_ns }).unwrap(),
        )
    }

    pub fn read(path: &Path) -> Option<ClockOffsets> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }
}

/// Read one JSONL event file, applying an offset correction.
pub fn read_events(path: &Path, offset_ns: i64) -> std::io::Result<Vec<EventRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EventRecord>(&line) {
            Ok(mut rec) => {
                rec.t_ns = (rec.t_ns as i64 + offset_ns).max(0) as u64;
                out.push(rec);
            }
            Err(e) => {
                log::warn!("skipping malformed event line in {}: {e}", path.display());
            }
        }
    }
    Ok(out)
}

/// Load every `events-<role>.jsonl` under `dir`, applying each role's
/// `clock-<role>.json` offset when present. Returns the merged records
/// sorted by corrected timestamp.
pub fn load_event_dir(dir: &Path) -> std::io::Result<Vec<EventRecord>> {
    let mut roles: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(role) = name
            .strip_prefix("events-")
            .and_then(|r| r.strip_suffix(".jsonl"))
        {
            roles.insert(role.to_owned(), entry.path());
        }
    }
    let mut all = Vec::new();
    for (role, path) in roles {
        let offset = ClockOffsets::read(&dir.join(format!("clock-{role}.json")))
            .map(|c| c.offset_ns)
            .unwrap_or(0);
        all.extend(read_events(&path, offset)?);
    }
    all.sort_by_key(|r| r.t_ns);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_then_read_back_equality() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events-test.jsonl");
        let log = EventLog::create(&path).unwrap();
        log.record_at("t1", "noop", Stage::Created, 100);
        log.record_at("t1", "noop", Stage::ResultReceived, 200);
        let events = read_events(&path, 0).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].stage, Stage::Created);
        assert_eq!(events[1].t_ns, 200);
    }

    #[test]
    fn line_count_matches_event_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events-test.jsonl");
        let log = EventLog::create(&path).unwrap();
        let n = 10_000;
        for i in 0..n {
            log.record_at(&format!("t{i}"), "noop", Stage::Created, i);
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), n as usize);
    }

    #[test]
    fn offsets_shift_merged_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::create(&dir.path().join("events-endpoint-a.jsonl")).unwrap();
        log.record_at("t1", "noop", Stage::StartedOnWorker, 1_000);
        ClockOffsets::write(&dir.path().join("clock-endpoint-a.json"), 500).unwrap();
        let merged = load_event_dir(dir.path()).unwrap();
        assert_eq!(merged[0].t_ns, 1_500);
    }

    #[test]
    fn disabled_log_is_a_noop() {
        let log = EventLog::disabled();
        log.record("t", "noop", Stage::Created);
    }
}
