use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::protocol::Status;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Entry {
    pub status: Status,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rewards: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip)]
    expected: usize,
}

/// Results keyed by request id. An entry leaves `pending` at most once.
#[derive(Debug, Default)]
pub struct ResultStore {
    entries: Mutex<HashMap<String, Entry>>,
    changed: Condvar,
}

impl ResultStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a pending request; false if the id already exists.
    pub fn insert_pending(&self, uuid: &str, expected: usize) -> bool {
        let mut map = self.entries.lock().expect("store lock");
        if map.contains_key(uuid) {
            return false;
        }
        map.insert(
            uuid.to_string(),
            Entry {
                status: Status::Pending,
                rewards: Vec::new(),
                reason: None,
                expected,
            },
        );
        true
    }

    fn finish(&self, uuid: &str, f: impl FnOnce(&mut Entry)) -> bool {
        let mut map = self.entries.lock().expect("store lock");
        let done = match map.get_mut(uuid) {
            Some(e) if e.status == Status::Pending => {
                f(e);
                true
            }
            _ => false,
        };
        drop(map);
        if done {
            self.changed.notify_all();
        }
        done
    }

    /// Records rewards; a length mismatch marks the request failed instead.
    pub fn complete(&self, uuid: &str, rewards: Vec<f64>) -> bool {
        self.finish(uuid, |e| {
            if rewards.len() == e.expected {
                e.status = Status::Done;
                e.rewards = rewards;
            } else {
                e.status = Status::Failed;
                e.reason = Some(format!("scored {} of {} samples", rewards.len(), e.expected));
            }
        })
    }

    pub fn fail(&self, uuid: &str, reason: impl Into<String>) -> bool {
        let reason = reason.into();
        self.finish(uuid, |e| {
            e.status = Status::Failed;
            e.reason = Some(reason);
        })
    }

    pub fn get(&self, uuid: &str) -> Option<Entry> {
        self.entries.lock().expect("store lock").get(uuid).cloned()
    }

    /// Current entry, blocking up to `wait` while it is pending.
    pub fn wait(&self, uuid: &str, wait: Duration) -> Option<Entry> {
        let deadline = Instant::now() + wait;
        let mut map = self.entries.lock().expect("store lock");
        loop {
            let entry = map.get(uuid)?.clone();
            let now = Instant::now();
            if entry.status != Status::Pending || now >= deadline {
                return Some(entry);
            }
            map = self.changed.wait_timeout(map, deadline - now).expect("store lock").0;
        }
    }

    pub fn pending_ids(&self) -> Vec<String> {
        let map = self.entries.lock().expect("store lock");
        let mut ids: Vec<String> = map
            .iter()
            .filter(|(_, e)| e.status == Status::Pending)
            .map(|(k, _)| k.clone())
            .collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes one JSON object per entry, sorted by id.
    pub fn snapshot(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            uuid: &'a str,
            #[serde(flatten)]
            entry: &'a Entry,
        }
        let map = self.entries.lock().expect("store lock");
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for k in keys {
            serde_json::to_writer(
                &mut out,
                &Line {
                    uuid: k,
                    entry: &map[k],
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}
