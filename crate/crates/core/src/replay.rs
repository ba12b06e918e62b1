//! Re-executes a logged run from its header and `INPUT` records and checks
//! that the regenerated log is byte-identical.

use std::path::Path;

use serde::Serialize;

use crate::record::{parse_jsonl, EventRecord, LogError, RecordKind};
use crate::scenario::{Scenario, ScenarioError};
use crate::world::{Input, Simulation};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log does not start with a SCENARIO record")]
    MissingHeader,
    #[error("logged scenario is unusable: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("INPUT record seq {seq} is unreadable: {reason}")]
    BadInput { seq: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplaySummary {
    pub matched: bool,
    pub seed: u64,
    pub logged_records: usize,
    pub regenerated_records: usize,
    /// Seq of the first record that differs, when `matched` is false.
    pub first_divergent_seq: Option<u64>,
}

/// Rebuilds a simulation from a log: same scenario, same inputs at the same
/// instants, run up to the last logged timestamp.
pub fn regenerate(records: &[EventRecord]) -> Result<Simulation, ReplayError> {
    let header = records
        .first()
        .filter(|r| r.kind == RecordKind::Scenario)
        .ok_or(ReplayError::MissingHeader)?;
    let scenario: Scenario =
        serde_json::from_value(header.payload.clone()).map_err(ScenarioError::from)?;
    let mut sim = Simulation::new(scenario)?;
    for r in records.iter().filter(|r| r.kind == RecordKind::Input) {
        let (at, input) = Input::from_payload(&r.payload)
            .map_err(|reason| ReplayError::BadInput { seq: r.seq, reason })?;
        sim.step_until(at);
        // A rejected input shows up as a divergence in the comparison.
        let _ = sim.apply(input);
    }
    if let Some(last) = records.last() {
        sim.step_until(last.ts);
    }
    Ok(sim)
}

/// Replays `text` (a JSON Lines log) and compares line by line.
pub fn replay_text(text: &str) -> Result<ReplaySummary, ReplayError> {
    let records = parse_jsonl(text)?;
    let sim = regenerate(&records)?;
    let regenerated: Vec<String> = sim
        .records()
        .iter()
        .map(EventRecord::to_json_line)
        .collect();
    let logged: Vec<&str> = text.lines().collect();

    let first_divergence = (0..logged.len().max(regenerated.len()))
        .find(|&i| logged.get(i).copied() != regenerated.get(i).map(String::as_str));
    let first_divergent_seq = first_divergence.map(|i| {
        records
            .get(i)
            .map(|r| r.seq)
            .or_else(|| sim.records().get(i).map(|r| r.seq))
            .unwrap_or(i as u64)
    });
    Ok(ReplaySummary {
        matched: first_divergence.is_none(),
        seed: sim.scenario().seed,
        logged_records: logged.len(),
        regenerated_records: regenerated.len(),
        first_divergent_seq,
    })
}

pub fn replay_file(path: impl AsRef<Path>) -> Result<ReplaySummary, ReplayError> {
    let text = std::fs::read_to_string(path).map_err(LogError::from)?;
    replay_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::DeviceKind;
    use crate::controller::FailureMode;
    use crate::record::to_jsonl;
    use crate::simnet::{SimTime, SmsChannelConfig};
    use std::num::NonZeroU32;

    fn operator_run() -> String {
        let mut sim = Simulation::new(Scenario::default()).unwrap();
        sim.step_by(SimTime::from_secs_f64(1.25));
        sim.submit("Light On").unwrap();
        sim.step_by(SimTime::from_secs_f64(7.0));
        sim.set_failure(DeviceKind::Fan, NonZeroU32::MIN, FailureMode::Stuck)
            .unwrap();
        sim.submit("fan on").unwrap();
        sim.set_channel(SmsChannelConfig {
            loss_prob: 0.5,
            dup_prob: 0.5,
            ..SmsChannelConfig::default()
        })
        .unwrap();
        sim.submit("main switch on").unwrap();
        sim.step_by(SimTime::from_secs_f64(200.0));
        to_jsonl(sim.records())
    }

    #[test]
    fn replay_of_operator_session_matches() {
        let log = operator_run();
        let summary = replay_text(&log).unwrap();
        assert!(summary.matched, "{summary:?}");
        assert_eq!(summary.logged_records, summary.regenerated_records);
    }

    #[test]
    fn edited_timestamp_reported_at_its_seq() {
        let log = operator_run();
        let mut lines: Vec<String> = log.lines().map(str::to_string).collect();
        let idx = lines
            .iter()
            .position(|l| l.contains("\"SMS_DELIVER\""))
            .unwrap();
        let mut rec: EventRecord = serde_json::from_str(&lines[idx]).unwrap();
        rec.ts = rec.ts + SimTime::from_nanos(1);
        lines[idx] = rec.to_json_line();
        let tampered = lines.join("\n") + "\n";
        let summary = replay_text(&tampered).unwrap();
        assert!(!summary.matched);
        assert_eq!(summary.first_divergent_seq, Some(rec.seq));
    }

    #[test]
    fn truncated_log_is_corrupt() {
        let log = operator_run();
        let cut = &log[..log.len() - 5];
        let lines = cut.lines().count();
        match replay_text(cut) {
            Err(ReplayError::Log(LogError::CorruptLog { line, .. })) => assert_eq!(line, lines),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_header() {
        let log = operator_run();
        let without_header: String = log.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            replay_text(&without_header),
            Err(ReplayError::MissingHeader)
        ));
    }
}
