//! Event log records and their JSON Lines form.
//!
//! A run's log starts with a `SCENARIO` record carrying the full scenario,
//! followed by everything that happened in `(ts, seq)` order. Operator actions
//! appear as `INPUT` records so a replay can re-apply them at the same instant.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::simnet::{Endpoint, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordKind {
    Scenario,
    Input,
    Phase,
    Discovery,
    Ticket,
    SmsSend,
    SmsDeliver,
    SerialSend,
    SerialDeliver,
    Actuate,
    Ack,
    Queued,
    Drop,
    Timeout,
    AckDiscarded,
    /// Stream keep-alive; never written to a run log.
    Heartbeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts: SimTime,
    pub seq: u64,
    pub kind: RecordKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub payload: Value,
}

impl EventRecord {
    /// One JSON line, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[EventRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    out.flush()
}

pub fn to_jsonl(records: &[EventRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn export_log(path: impl AsRef<Path>, records: &[EventRecord]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), records)
}

/// Parses a JSON Lines log. Line numbers in errors are 1-based. The final line
/// must be newline-terminated; a missing newline means the writer was cut off.
pub fn parse_jsonl(text: &str) -> Result<Vec<EventRecord>, LogError> {
    let mut records = Vec::new();
    let mut last_seq = None;
    let line_count = text.lines().count();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let corrupt = |reason: String| LogError::CorruptLog {
            line: line_no,
            reason,
        };
        let record: EventRecord = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if let Some(prev) = last_seq {
            if record.seq <= prev {
                return Err(corrupt(format!(
                    "seq {} does not follow {prev}",
                    record.seq
                )));
            }
        }
        last_seq = Some(record.seq);
        records.push(record);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(LogError::CorruptLog {
            line: line_count,
            reason: "truncated final line".to_string(),
        });
    }
    Ok(records)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, LogError> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}
