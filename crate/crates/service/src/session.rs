//! Chat sessions and their optional JSON-lines persistence.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use unirqr_core::pipeline::{ForceMode, TurnTrace};
use unirqr_core::DialogueTurn;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub turns: Vec<DialogueTurn>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
    pub mode: ForceMode,
    /// One trace per bot turn, in order.
    pub traces: Vec<TurnTrace>,
}

impl Session {
    pub fn new(mode: ForceMode) -> Self {
        let now = now_ms();
        Self { id: uuid::Uuid::new_v4().to_string(), turns: Vec::new(), created_at: now, updated_at: now, mode, traces: Vec::new() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Deleted { id: String, deleted: bool },
    Snapshot(Box<Session>),
}

/// Append-only log of session snapshots; the last record per id wins.
pub struct SessionStore {
    path: PathBuf,
    file: File,
}

impl SessionStore {
    /// Opens (creating if needed) the log and replays it.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<Session>)> {
        let mut sessions: HashMap<String, Session> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Record>(&line) {
                    Ok(Record::Snapshot(s)) => {
                        if !sessions.contains_key(&s.id) {
                            order.push(s.id.clone());
                        }
                        sessions.insert(s.id.clone(), *s);
                    }
                    Ok(Record::Deleted { id, .. }) => {
                        sessions.remove(&id);
                    }
                    Err(e) => tracing::warn!("skipping session log line {}: {e}", n + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let restored = order.into_iter().filter_map(|id| sessions.remove(&id)).collect();
        Ok((Self { path: path.to_path_buf(), file }, restored))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, record: &Record) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }

    pub fn save(&mut self, s: &Session) -> std::io::Result<()> {
        self.append(&Record::Snapshot(Box::new(s.clone())))
    }

    pub fn delete(&mut self, id: &str) -> std::io::Result<()> {
        self.append(&Record::Deleted { id: id.to_string(), deleted: true })
    }
}
