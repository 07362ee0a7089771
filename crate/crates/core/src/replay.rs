//! Replays a session log and checks that the recorded turn boundaries and
//! final state are reproduced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{extract_asset_index, next_turn_index};
use crate::error::{Error, Result};
use crate::message::Message;
use crate::session_log::{history_digest, LogRecord, MetaDelta};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    /// Turn the record belongs to; `None` for records outside any turn.
    pub turn: Option<u32>,
    pub line: usize,
    pub field: String,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: Option<String>,
    pub records: usize,
    pub turns: u32,
    pub compressions: u32,
    pub ended: bool,
    pub skill_deltas: BTreeMap<String, MetaDelta>,
    pub divergences: Vec<Divergence>,
}

impl ReplayReport {
    pub fn consistent(&self) -> bool {
        self.divergences.is_empty()
    }
}

struct Replayer {
    report: ReplayReport,
    history: Vec<Message>,
    level: u32,
    /// Skill used per turn, from usage records.
    usage: BTreeMap<u32, String>,
}

impl Replayer {
    fn diverge(&mut self, line: usize, field: &str, expected: impl ToString, found: impl ToString) {
        let expected = expected.to_string();
        let found = found.to_string();
        if expected != found {
            self.report.divergences.push(Divergence {
                turn: Some(self.report.turns + 1),
                line,
                field: field.to_string(),
                expected,
                found,
            });
        }
    }

    fn apply(&mut self, line: usize, record: LogRecord) {
        match record {
            LogRecord::Start { session_id, .. } => self.report.session_id = Some(session_id),
            LogRecord::Message { message } => {
                let expected = next_turn_index(&self.history);
                self.diverge(line, "turn_index", expected, message.turn_index);
                self.history.push(message);
            }
            LogRecord::Checkpoint {
                message,
                level,
                retained_from,
                asset_index,
            } => {
                self.diverge(line, "compression_level", self.level + 1, level);
                let split = self
                    .history
                    .iter()
                    .position(|m| m.turn_index >= retained_from)
                    .unwrap_or(self.history.len());
                let tail = self.history.split_off(split);
                let recomputed = extract_asset_index(&self.history);
                self.diverge(
                    line,
                    "asset_index",
                    serde_json::to_string(&recomputed).unwrap_or_default(),
                    serde_json::to_string(&asset_index).unwrap_or_default(),
                );
                self.history = std::iter::once(message).chain(tail).collect();
                self.level = level;
                self.report.compressions += 1;
            }
            LogRecord::Usage { turn, skill, success } => {
                let entry = self.report.skill_deltas.entry(skill.clone()).or_default();
                entry.usage += 1;
                entry.success += u64::from(success);
                self.usage.insert(turn, skill);
            }
            LogRecord::Feedback { skill, from, to, .. } => {
                let entry = self.report.skill_deltas.entry(skill).or_default();
                entry.success = entry.success + u64::from(to) - u64::from(from);
            }
            LogRecord::TurnEnd {
                turn,
                skill_used,
                message_count,
                compression_level,
                history_digest: digest,
                ..
            } => {
                self.diverge(line, "turn", self.report.turns + 1, turn);
                self.diverge(
                    line,
                    "skill_used",
                    format!("{:?}", self.usage.get(&turn)),
                    format!("{:?}", skill_used.as_ref()),
                );
                self.diverge(line, "message_count", self.history.len(), message_count);
                self.diverge(line, "compression_level", self.level, compression_level);
                self.diverge(line, "history_digest", history_digest(&self.history), digest);
                self.report.turns += 1;
            }
            LogRecord::Ended {
                turns,
                message_count,
                compression_level,
                history_digest: digest,
                skill_deltas,
                ..
            } => {
                let before = self.report.divergences.len();
                self.diverge(line, "turns", self.report.turns, turns);
                self.diverge(line, "message_count", self.history.len(), message_count);
                self.diverge(line, "compression_level", self.level, compression_level);
                self.diverge(line, "history_digest", history_digest(&self.history), digest);
                self.diverge(
                    line,
                    "skill_deltas",
                    serde_json::to_string(&self.report.skill_deltas).unwrap_or_default(),
                    serde_json::to_string(&skill_deltas).unwrap_or_default(),
                );
                for d in &mut self.report.divergences[before..] {
                    d.turn = None;
                }
                self.report.ended = true;
            }
        }
    }
}

/// Replays JSONL text. Malformed lines are errors; mismatches are divergences.
pub fn replay_text(text: &str) -> Result<ReplayReport> {
    let mut replayer = Replayer {
        report: ReplayReport::default(),
        history: Vec::new(),
        level: 0,
        usage: BTreeMap::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(line).map_err(|e| Error::Replay {
            line: i + 1,
            reason: e.to_string(),
        })?;
        replayer.report.records += 1;
        replayer.apply(i + 1, record);
    }
    Ok(replayer.report)
}

pub fn replay_file(path: &Path) -> Result<ReplayReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    replay_text(&text)
}
