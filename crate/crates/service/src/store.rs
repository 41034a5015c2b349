//! Session registry with an optional append-only journal per session.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::error::ApiError;
use crate::session::{Event, Session};

pub type SharedSession = Arc<Mutex<Session>>;

#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, SharedSession>>,
    journal_dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `dir` (created if missing) and restores every journaled session.
    /// Sessions recorded against another checkpoint are skipped when
    /// `checkpoint` is given.
    pub fn persistent(dir: impl Into<PathBuf>, checkpoint: Option<&str>) -> Result<Self, ApiError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match load_journal(&path) {
                Ok(s) if checkpoint.is_some_and(|c| c != s.checkpoint) => {
                    tracing::warn!(path = %path.display(), "skipping session from another checkpoint");
                }
                Ok(s) => {
                    sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable journal"),
            }
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            journal_dir: Some(dir),
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn get(&self, id: &str) -> Result<SharedSession, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
    }

    pub fn insert(&self, session: Session) -> Result<SharedSession, ApiError> {
        let id = session.id.clone();
        self.append(
            &id,
            &Event::Create {
                session: Box::new(session.clone()),
            },
        )?;
        let shared = Arc::new(Mutex::new(session));
        self.sessions.write().insert(id, shared.clone());
        Ok(shared)
    }

    /// Journals `event` and applies it. The caller holds the session lock,
    /// which keeps journal order equal to application order.
    pub fn record(&self, session: &mut Session, event: Event) -> Result<(), ApiError> {
        let mut next = session.clone();
        next.apply(&event)?;
        self.append(&session.id, &event)?;
        *session = next;
        Ok(())
    }

    fn append(&self, id: &str, event: &Event) -> Result<(), ApiError> {
        let Some(dir) = &self.journal_dir else {
            return Ok(());
        };
        let mut line = serde_json::to_string(event).map_err(|e| ApiError::Internal(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{id}.jsonl")))?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

pub fn load_journal(path: &Path) -> Result<Session, ApiError> {
    let text = fs::read_to_string(path)?;
    let events = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<Event>, _>>()
        .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
    Session::replay(&events)
}
