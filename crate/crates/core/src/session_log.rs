//! Append-only JSONL session logs: `sessions/{session_id}.jsonl`.
//!
//! Every message that enters a session is logged once, in order, even if it
//! is later compressed away, so the log doubles as the full transcript for
//! the offline review and as the input of replay verification.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::Asset;
use crate::error::{Error, Result};
use crate::fsio::SharedFs;
use crate::message::Message;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaDelta {
    pub usage: u64,
    pub success: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        session_id: String,
        user_id: String,
        started_at: DateTime<Utc>,
    },
    Message {
        message: Message,
    },
    /// The history prefix before `retained_from` was replaced by `message`.
    Checkpoint {
        message: Message,
        level: u32,
        retained_from: u64,
        asset_index: Vec<Asset>,
    },
    Usage {
        turn: u32,
        skill: String,
        success: bool,
    },
    Feedback {
        turn: u32,
        skill: String,
        from: bool,
        to: bool,
    },
    TurnEnd {
        turn: u32,
        turn_index: u64,
        skill_used: Option<String>,
        success: bool,
        message_count: usize,
        compression_level: u32,
        history_digest: String,
    },
    Ended {
        ended_at: DateTime<Utc>,
        turns: u32,
        message_count: usize,
        compression_level: u32,
        history_digest: String,
        skill_deltas: BTreeMap<String, MetaDelta>,
    },
}

/// SHA-256 over the JSON encoding of the history.
pub fn history_digest(history: &[Message]) -> String {
    let bytes = serde_json::to_vec(history).expect("messages serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn log_path(sessions_dir: &Path, session_id: &str) -> PathBuf {
    sessions_dir.join(format!("{session_id}.jsonl"))
}

#[derive(Debug, Clone)]
pub struct SessionLog {
    path: PathBuf,
    fs: SharedFs,
}

impl SessionLog {
    pub fn new(path: PathBuf, fs: SharedFs) -> Self {
        Self { path, fs }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[LogRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for record in records {
            buf.push_str(&serde_json::to_string(record).map_err(|e| Error::SessionLog(e.to_string()))?);
            buf.push('\n');
        }
        if let Some(parent) = self.path.parent() {
            self.fs.create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.fs
            .append(&self.path, buf.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(&self) -> Result<Vec<LogRecord>> {
        let text = self
            .fs
            .read_to_string(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        parse_records(&text)
    }
}

/// Parses JSONL text; blank lines are skipped. Errors carry the 1-based line number.
pub fn parse_records(text: &str) -> Result<Vec<LogRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Replay {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Every logged message in order, checkpoints excluded.
pub fn transcript(records: &[LogRecord]) -> Vec<Message> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Message { message } => Some(message.clone()),
            _ => None,
        })
        .collect()
}

pub fn is_ended(records: &[LogRecord]) -> bool {
    records.iter().any(|r| matches!(r, LogRecord::Ended { .. }))
}
