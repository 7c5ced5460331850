use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::CorrectionSession;

#[derive(Debug, Error)]
pub enum CorrectionLogError {
    #[error("correction log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("correction log {path}, line {line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
}

/// Append-only JSON-lines file of correction sessions, one per line.
#[derive(Debug, Clone)]
pub struct CorrectionLog {
    path: PathBuf,
}

impl CorrectionLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, session: &CorrectionSession) -> Result<(), CorrectionLogError> {
        let io = |source| CorrectionLogError::Io { path: self.path.clone(), source };
        let mut line = serde_json::to_string(session).expect("session serializes");
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        file.lock().map_err(io)?;
        file.write_all(line.as_bytes()).map_err(io)?;
        file.unlock().map_err(io)
    }

    pub fn read(&self) -> Result<Vec<CorrectionSession>, CorrectionLogError> {
        read_correction_log(&self.path)
    }
}

/// Reads every session in file order. Blank lines are skipped.
pub fn read_correction_log(path: &Path) -> Result<Vec<CorrectionSession>, CorrectionLogError> {
    let io = |source| CorrectionLogError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut sessions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let session = serde_json::from_str(&line).map_err(|source| CorrectionLogError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        sessions.push(session);
    }
    Ok(sessions)
}

/// Latest session per sample id.
pub fn latest_by_sample(sessions: Vec<CorrectionSession>) -> BTreeMap<String, CorrectionSession> {
    sessions.into_iter().map(|s| (s.sample_id.clone(), s)).collect()
}
