use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// One cached chat-completion reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub trial_id: String,
    pub status: u16,
    pub raw_response: String,
}

/// Append-only JSONL cache of replies keyed by trial id.
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, CachedResponse>>,
    file: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let records: Vec<CachedResponse> = jsonl::read_records_repairing(&path)?;
        let entries = records
            .into_iter()
            .map(|r| (r.trial_id.clone(), r))
            .collect();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(ResponseCache {
            path,
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn get(&self, trial_id: &str) -> Option<CachedResponse> {
        self.entries.lock().unwrap().get(trial_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, record: CachedResponse) -> Result<()> {
        let mut line = serde_json::to_string(&record).map_err(|e| Error::json("cache record", e))?;
        line.push('\n');
        {
            let mut f = self.file.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries
            .lock()
            .unwrap()
            .insert(record.trial_id.clone(), record);
        Ok(())
    }
}
