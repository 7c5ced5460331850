use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use super::RunEvent;
use super::StoreError;

#[derive(Serialize)]
struct LineOut<'a> {
    seq: u64,
    checksum: String,
    event: &'a RawValue,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    seq: u64,
    checksum: String,
    #[serde(borrow)]
    event: &'a RawValue,
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Append-only JSON-lines log: `{"seq":N,"checksum":H,"event":{...}}`.
///
/// The checksum covers the exact serialized bytes of `event`. Appends take an
/// exclusive file lock, so several handles (or processes) may share a file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    /// File length and next sequence number as of our last append.
    tail: Mutex<Option<(u64, u64)>>,
}

impl EventLog {
    pub fn open(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), tail: Mutex::new(None) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one event and returns its sequence number.
    pub fn append(&self, event: &RunEvent) -> Result<u64, StoreError> {
        let io = |source| StoreError::Io { path: self.path.clone(), source };
        let raw = serde_json::value::to_raw_value(event).map_err(|e| StoreError::Serialize(e.to_string()))?;
        let mut tail = self.tail.lock().expect("event log mutex poisoned");
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(&self.path).map_err(io)?;
        file.lock().map_err(io)?;
        let result = (|| {
            let len = file.metadata().map_err(io)?.len();
            let seq = match *tail {
                Some((known_len, next)) if known_len == len => next,
                _ => count_lines(&self.path)?,
            };
            let mut line =
                serde_json::to_string(&LineOut { seq, checksum: checksum(raw.get().as_bytes()), event: &raw })
                    .map_err(|e| StoreError::Serialize(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io)?;
            file.flush().map_err(io)?;
            *tail = Some((len + line.len() as u64, seq + 1));
            Ok(seq)
        })();
        file.unlock().map_err(io)?;
        result
    }

    /// Reads and verifies every event in order.
    pub fn read(&self) -> Result<Vec<RunEvent>, StoreError> {
        read_events(&self.path)
    }
}

fn count_lines(path: &Path) -> Result<u64, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
        if !line.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

/// Parses a log, checking each line's checksum and sequence number.
pub fn read_events(path: &Path) -> Result<Vec<RunEvent>, StoreError> {
    let corrupt = |line: usize, reason: String| StoreError::CorruptLog { path: path.to_path_buf(), line, reason };
    let file = File::open(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| corrupt(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LineIn = serde_json::from_str(&line).map_err(|e| corrupt(lineno, e.to_string()))?;
        if checksum(parsed.event.get().as_bytes()) != parsed.checksum {
            return Err(corrupt(lineno, "checksum mismatch".into()));
        }
        if parsed.seq != events.len() as u64 {
            return Err(corrupt(lineno, format!("expected seq {}, found {}", events.len(), parsed.seq)));
        }
        events.push(serde_json::from_str(parsed.event.get()).map_err(|e| corrupt(lineno, e.to_string()))?);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn suspended(n: usize) -> RunEvent {
        RunEvent::RunSuspended { pending: vec![format!("s{n}")] }
    }

    #[test]
    fn three_events_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::open(dir.path().join("events.jsonl"));
        for i in 0..3 {
            assert_eq!(log.append(&suspended(i)).unwrap(), i as u64);
        }
        assert_eq!(log.read().unwrap(), (0..3).map(suspended).collect::<Vec<_>>());
        let reopened = EventLog::open(log.path());
        assert_eq!(reopened.append(&RunEvent::RunCompleted).unwrap(), 3);
    }

    #[test]
    fn truncated_final_line_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let log = EventLog::open(&path);
        for i in 0..3 {
            log.append(&suspended(i)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        match read_events(&path) {
            Err(StoreError::CorruptLog { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected CorruptLog, got {other:?}"),
        }
    }

    #[test]
    fn tampered_event_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        EventLog::open(&path).append(&suspended(1)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("s1", "s2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_events(&path), Err(StoreError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn concurrent_writers_lose_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let shared = Arc::new(EventLog::open(&path));
        let separate = Arc::new(EventLog::open(&path));
        let workers: Vec<_> = [shared.clone(), shared, separate]
            .into_iter()
            .enumerate()
            .map(|(w, log)| {
                std::thread::spawn(move || {
                    for i in 0..50 {
                        log.append(&suspended(w * 1000 + i)).unwrap();
                    }
                })
            })
            .collect();
        workers.into_iter().for_each(|h| h.join().unwrap());
        let mut seen: Vec<String> = read_events(&path)
            .unwrap()
            .into_iter()
            .map(|e| match e {
                RunEvent::RunSuspended { mut pending } => pending.remove(0),
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(seen.len(), 150);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 150);
    }
}
