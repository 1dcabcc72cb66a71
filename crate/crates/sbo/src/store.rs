//! JSON-lines event logs, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::session::{SessionError, SessionEvent};

#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

impl EventStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn append(&self, id: &str, events: &[SessionEvent]) -> io::Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut f = OpenOptions::new().create(true).append(true).open(self.path_for(id))?;
        let mut buf = String::new();
        for e in events {
            buf.push_str(&e.to_json_line());
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        f.sync_data()
    }

    pub fn load(&self, id: &str) -> Result<Vec<SessionEvent>, SessionError> {
        read_log(&self.path_for(id))
    }

    /// Session ids with a log in the directory, sorted.
    pub fn ids(&self) -> io::Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<SessionEvent>, SessionError> {
    let f = File::open(path).map_err(|e| SessionError::Log(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SessionError::Log(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: SessionEvent =
            serde_json::from_str(&line).map_err(|e| SessionError::Log(format!("line {}: {e}", k + 1)))?;
        if ev.seq != out.len() as u64 {
            return Err(SessionError::Log(format!("line {}: sequence number {} out of order", k + 1, ev.seq)));
        }
        out.push(ev);
    }
    Ok(out)
}
