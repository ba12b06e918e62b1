//! Remote user's phone: turns utterances into encoded SMS bodies and tracks
//! each command until its acknowledgement arrives or retries run out.
//!
//! The wire protocol has no message ids, so an ack resolves the oldest pending
//! ticket whose device, index and action match.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Ack, CodecError, VoiceCommand, WireCommand};
use crate::simnet::SimTime;

pub type TicketId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketState {
    Pending,
    AckedOk,
    AckedFail,
    TimedOut,
}

impl TicketState {
    pub fn is_terminal(self) -> bool {
        self != TicketState::Pending
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TicketState::Pending => "PENDING",
            TicketState::AckedOk => "ACKED_OK",
            TicketState::AckedFail => "ACKED_FAIL",
            TicketState::TimedOut => "TIMED_OUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandTicket {
    pub id: TicketId,
    pub utterance: String,
    pub command: VoiceCommand,
    pub wire: WireCommand,
    pub state: TicketState,
    pub attempts: u32,
    pub submitted_at: SimTime,
    pub resolved_at: Option<SimTime>,
    /// Acknowledgement text that resolved the ticket.
    pub ack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub timeout_s: f64,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout_s: 30.0,
            max_retries: 2,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Vec<(String, String)> {
        if self.timeout_s.is_finite() && self.timeout_s > 0.0 {
            Vec::new()
        } else {
            vec![(
                "timeout_s".to_string(),
                format!("must be > 0, got {}", self.timeout_s),
            )]
        }
    }

    pub fn timeout(&self) -> SimTime {
        SimTime::from_secs_f64(self.timeout_s)
    }
}

/// A freshly submitted command, ready to go out as an SMS.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub ticket: TicketId,
    pub sms_text: String,
    pub timeout_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AckOutcome {
    Resolved {
        ticket: TicketId,
        state: TicketState,
        ack: Ack,
    },
    /// Parsed, but no pending ticket matches.
    Unmatched {
        ack: Ack,
    },
    Malformed {
        error: CodecError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TimeoutOutcome {
    /// Ticket already resolved, or the timer belongs to an earlier attempt.
    Stale,
    Retry {
        sms_text: String,
        attempt: u32,
        timeout_at: SimTime,
    },
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct Client {
    policy: RetryPolicy,
    tickets: BTreeMap<TicketId, CommandTicket>,
    next_id: TicketId,
}

/// SMS body for a wire command: escape-encoded bytes, comma separated.
pub fn sms_body(wire: &WireCommand) -> String {
    codec::encode_stream(wire.as_bytes())
        .expect("wire commands are ASCII")
        .to_string()
}

impl Client {
    pub fn new(policy: RetryPolicy) -> Self {
        Self {
            policy,
            tickets: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn ticket(&self, id: TicketId) -> Option<&CommandTicket> {
        self.tickets.get(&id)
    }

    pub fn tickets(&self) -> impl Iterator<Item = &CommandTicket> {
        self.tickets.values()
    }

    pub fn submit(&mut self, utterance: &str, now: SimTime) -> Result<Submission, CodecError> {
        let command = codec::parse_utterance(utterance)?;
        let wire = codec::render_wire(&command);
        let sms_text = sms_body(&wire);
        let id = self.next_id;
        self.next_id += 1;
        self.tickets.insert(
            id,
            CommandTicket {
                id,
                utterance: utterance.to_string(),
                command,
                wire,
                state: TicketState::Pending,
                attempts: 1,
                submitted_at: now,
                resolved_at: None,
                ack: None,
            },
        );
        Ok(Submission {
            ticket: id,
            sms_text,
            timeout_at: now + self.policy.timeout(),
        })
    }

    pub fn on_ack_sms(&mut self, text: &str, now: SimTime) -> AckOutcome {
        let ack = match codec::parse_ack(text) {
            Ok(ack) => ack,
            Err(error) => return AckOutcome::Malformed { error },
        };
        // BTreeMap iterates by id, and ids increase with submission order.
        let Some(ticket) = self
            .tickets
            .values_mut()
            .find(|t| t.state == TicketState::Pending && ack.answers(&t.command))
        else {
            return AckOutcome::Unmatched { ack };
        };
        ticket.state = if ack.success {
            TicketState::AckedOk
        } else {
            TicketState::AckedFail
        };
        ticket.resolved_at = Some(now);
        ticket.ack = Some(codec::render_ack(&ack));
        AckOutcome::Resolved {
            ticket: ticket.id,
            state: ticket.state,
            ack,
        }
    }

    /// Handles the timer for `attempt` of `id`.
    pub fn on_timeout(&mut self, id: TicketId, attempt: u32, now: SimTime) -> TimeoutOutcome {
        let Some(ticket) = self.tickets.get_mut(&id) else {
            return TimeoutOutcome::Stale;
        };
        if ticket.state.is_terminal() || ticket.attempts != attempt {
            return TimeoutOutcome::Stale;
        }
        if ticket.attempts <= self.policy.max_retries {
            ticket.attempts += 1;
            TimeoutOutcome::Retry {
                sms_text: sms_body(&ticket.wire),
                attempt: ticket.attempts,
                timeout_at: now + self.policy.timeout(),
            }
        } else {
            ticket.state = TicketState::TimedOut;
            ticket.resolved_at = Some(now);
            TimeoutOutcome::TimedOut
        }
    }
}
