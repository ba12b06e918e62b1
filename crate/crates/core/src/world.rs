//! One complete run: the remote phone, the GSM channel, the home relay phone,
//! the serial link and the controller, driven by a single event queue.
//!
//! Message path for one command:
//!
//! ```text
//! user --SMS(encoded wire)--> relay --serial(wire bytes)--> controller
//! user <--SMS(ack text)------ relay <--serial(ack bytes)--- controller
//! ```
//!
//! Operator actions (`submit`, `set_channel`, `set_failure`) are applied only
//! between events, after everything due at the current instant has run, and
//! are logged as `INPUT` records. That is what makes a log replayable.

use std::num::NonZeroU32;

use serde_json::{json, Value};

use crate::client::{AckOutcome, Client, CommandTicket, TicketId, TimeoutOutcome};
use crate::codec::{decode_stream, render_ack, CodecError, DeviceKind, EncodedPayload};
use crate::controller::{Controller, ControllerError, FailureMode, FrameOutcome, HomeSnapshot};
use crate::record::{EventRecord, RecordKind};
use crate::scenario::{Scenario, ScenarioError};
use crate::simnet::{
    Endpoint, EventKind, SerialLinkConfig, SimCore, SimEvent, SimTime, SmsChannelConfig, Timer,
};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
}

/// A replayable operator action.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Command {
        utterance: String,
    },
    Channel(SmsChannelConfig),
    Failure {
        kind: DeviceKind,
        index: NonZeroU32,
        mode: FailureMode,
    },
}

impl Input {
    fn to_payload(&self, at: SimTime) -> Value {
        let mut v = match self {
            Input::Command { utterance } => json!({"op": "command", "utterance": utterance}),
            Input::Channel(cfg) => json!({"op": "channel", "config": cfg}),
            Input::Failure { kind, index, mode } => {
                json!({"op": "failure", "kind": kind, "index": index, "mode": mode})
            }
        };
        v["at_ns"] = json!(at.as_nanos());
        v
    }

    /// Inverse of the payload written for `INPUT` records.
    pub fn from_payload(payload: &Value) -> Result<(SimTime, Input), String> {
        let at = payload["at_ns"]
            .as_u64()
            .map(SimTime::from_nanos)
            .ok_or("missing at_ns")?;
        let field = |name: &str| payload.get(name).cloned().ok_or(format!("missing {name}"));
        let input = match payload["op"].as_str() {
            Some("command") => Input::Command {
                utterance: field("utterance")?
                    .as_str()
                    .ok_or("utterance must be a string")?
                    .to_string(),
            },
            Some("channel") => {
                Input::Channel(serde_json::from_value(field("config")?).map_err(|e| e.to_string())?)
            }
            Some("failure") => Input::Failure {
                kind: serde_json::from_value(field("kind")?).map_err(|e| e.to_string())?,
                index: serde_json::from_value(field("index")?).map_err(|e| e.to_string())?,
                mode: serde_json::from_value(field("mode")?).map_err(|e| e.to_string())?,
            },
            other => return Err(format!("unknown input op {other:?}")),
        };
        Ok((at, input))
    }
}

pub struct Simulation {
    scenario: Scenario,
    core: SimCore,
    sms: SmsChannelConfig,
    serial: SerialLinkConfig,
    controller: Controller,
    client: Client,
    phone_available_at: Option<SimTime>,
    discovery_interval: SimTime,
    pulse: SimTime,
    discovery_attempts: u64,
    processed: u64,
    records: Vec<EventRecord>,
}

impl Simulation {
    /// Validates the scenario, writes the `SCENARIO` header and schedules the
    /// controller boot and every script entry.
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let controller = Controller::new(scenario.device_list()).map_err(|e| {
            ScenarioError::Invalid(vec![crate::scenario::FieldProblem {
                field: "devices".into(),
                message: e.to_string(),
            }])
        })?;
        let settings = &scenario.controller;
        let mut sim = Self {
            core: SimCore::new(scenario.seed),
            sms: scenario.sms.clone(),
            serial: scenario.serial.clone(),
            controller,
            client: Client::new(scenario.retry.clone()),
            phone_available_at: settings.phone_available_at_s.map(SimTime::from_secs_f64),
            discovery_interval: SimTime::from_secs_f64(settings.discovery_interval_s),
            pulse: SimTime::from_secs_f64(settings.pulse_s),
            discovery_attempts: 0,
            processed: 0,
            records: Vec::new(),
            scenario,
        };
        let header = serde_json::to_value(&sim.scenario).expect("scenario serializes");
        sim.record(RecordKind::Scenario, Endpoint::Host, Endpoint::Host, header);
        sim.schedule_timer(SimTime::ZERO, Timer::Boot, Endpoint::Controller);
        for i in 0..sim.scenario.script.len() {
            let at = SimTime::from_secs_f64(sim.scenario.script[i].at_s);
            sim.schedule_timer(at, Timer::Script(i), Endpoint::Host);
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> SimTime {
        self.core.now()
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    /// Number of queue events processed so far.
    pub fn processed_events(&self) -> u64 {
        self.processed
    }

    pub fn pending_events(&self) -> usize {
        self.core.pending()
    }

    pub fn snapshot(&self) -> HomeSnapshot {
        self.controller.snapshot()
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn channel(&self) -> &SmsChannelConfig {
        &self.sms
    }

    pub fn ticket(&self, id: TicketId) -> Option<&CommandTicket> {
        self.client.ticket(id)
    }

    pub fn tickets(&self) -> impl Iterator<Item = &CommandTicket> {
        self.client.tickets()
    }

    /// Processes every event due at or before `t`, then moves the clock to `t`.
    pub fn step_until(&mut self, t: SimTime) {
        while let Some(ev) = self.core.pop_due(t) {
            self.dispatch(ev);
        }
        self.core.advance_to(t);
    }

    pub fn step_by(&mut self, dt: SimTime) {
        let target = self.now() + dt;
        self.step_until(target);
    }

    /// Processes events until the queue is empty or the next one lies past
    /// `horizon`. The clock stays at the last processed event.
    pub fn run_until_quiet(&mut self, horizon: SimTime) {
        while let Some(ev) = self.core.pop_due(horizon) {
            self.dispatch(ev);
        }
    }

    /// Like [`run_until_quiet`](Self::run_until_quiet) but stops as soon as
    /// the ticket leaves PENDING.
    pub fn run_until_resolved(&mut self, id: TicketId, horizon: SimTime) {
        while self.ticket(id).is_some_and(|t| !t.state.is_terminal()) {
            match self.core.pop_due(horizon) {
                Some(ev) => self.dispatch(ev),
                None => break,
            }
        }
        // finish the instant so a later input lands where replay expects it
        self.settle();
    }

    pub fn apply(&mut self, input: Input) -> Result<Option<TicketId>, InputError> {
        match input {
            Input::Command { utterance } => self.submit(&utterance).map(Some),
            Input::Channel(cfg) => self.set_channel(cfg).map(|_| None),
            Input::Failure { kind, index, mode } => {
                self.set_failure(kind, index, mode).map(|_| None)
            }
        }
    }

    /// Operator command: the utterance goes out from the user's phone now.
    pub fn submit(&mut self, utterance: &str) -> Result<TicketId, InputError> {
        crate::codec::parse_utterance(utterance)?;
        self.settle();
        self.log_input(&Input::Command {
            utterance: utterance.to_string(),
        });
        Ok(self.submit_inner(utterance)?)
    }

    pub fn set_channel(&mut self, cfg: SmsChannelConfig) -> Result<(), InputError> {
        if let Some((field, message)) = cfg.validate().into_iter().next() {
            return Err(InputError::Invalid { field, message });
        }
        self.settle();
        self.log_input(&Input::Channel(cfg.clone()));
        self.sms = cfg;
        Ok(())
    }

    pub fn set_failure(
        &mut self,
        kind: DeviceKind,
        index: NonZeroU32,
        mode: FailureMode,
    ) -> Result<(), InputError> {
        mode.validate().map_err(|message| InputError::Invalid {
            field: "mode".into(),
            message,
        })?;
        if self.controller.device(kind, index).is_none() {
            return Err(ControllerError::UnknownDevice { kind, index }.into());
        }
        self.settle();
        self.log_input(&Input::Failure { kind, index, mode });
        self.controller.set_failure(kind, index, mode)?;
        Ok(())
    }

    /// Runs whatever is due at the current instant so inputs always land on
    /// an event boundary.
    fn settle(&mut self) {
        let now = self.now();
        self.step_until(now);
    }

    fn log_input(&mut self, input: &Input) {
        let payload = input.to_payload(self.now());
        self.record(RecordKind::Input, Endpoint::Host, Endpoint::Host, payload);
    }

    fn record(&mut self, kind: RecordKind, src: Endpoint, dst: Endpoint, payload: Value) {
        let seq = self.records.len() as u64;
        self.records.push(EventRecord {
            ts: self.core.now(),
            seq,
            kind,
            src,
            dst,
            payload,
        });
    }

    fn schedule_timer(&mut self, at: SimTime, timer: Timer, owner: Endpoint) {
        self.core
            .schedule_timer(at, timer, owner)
            .expect("timers are never scheduled in the past");
    }

    fn dispatch(&mut self, ev: SimEvent) {
        self.processed += 1;
        match (ev.kind, ev.dst) {
            (EventKind::Timer(timer), _) => self.on_timer(timer),
            (EventKind::SmsDeliver, dst) => {
                let text = String::from_utf8_lossy(&ev.payload).into_owned();
                self.record(RecordKind::SmsDeliver, ev.src, dst, json!({"text": text}));
                match dst {
                    Endpoint::Relay => self.relay_forward(&text),
                    Endpoint::User => self.on_ack_sms(&text),
                    _ => {}
                }
            }
            (EventKind::SerialDeliver, dst) => {
                self.record(
                    RecordKind::SerialDeliver,
                    ev.src,
                    dst,
                    frame_payload(&ev.payload),
                );
                match dst {
                    Endpoint::Controller => self.feed_controller(ev.payload),
                    Endpoint::Relay => self.relay_return(&ev.payload),
                    _ => {}
                }
            }
        }
    }

    fn on_timer(&mut self, timer: Timer) {
        match timer {
            Timer::Boot => {
                self.controller.boot();
                self.log_transitions();
                self.discover();
            }
            Timer::Discovery => self.discover(),
            Timer::PulseDone => self.finish_pulse(),
            Timer::AckSent => {
                let next = self.controller.ack_sent();
                self.log_transitions();
                if let Some(frame) = next {
                    self.feed_controller(frame);
                }
            }
            Timer::Timeout { ticket, attempt } => self.on_timeout(ticket, attempt),
            Timer::Script(i) => {
                let utterance = self.scenario.script[i].utterance.clone();
                if let Err(e) = self.submit_inner(&utterance) {
                    self.record(
                        RecordKind::Drop,
                        Endpoint::Host,
                        Endpoint::User,
                        json!({"reason": e.to_string(), "utterance": utterance}),
                    );
                }
            }
        }
    }

    fn discover(&mut self) {
        self.discovery_attempts += 1;
        let now = self.now();
        let found = self.phone_available_at.is_some_and(|t| now >= t);
        self.record(
            RecordKind::Discovery,
            Endpoint::Controller,
            Endpoint::Relay,
            json!({"attempt": self.discovery_attempts, "found": found}),
        );
        self.controller.discover(found);
        self.log_transitions();
        if !found {
            self.schedule_timer(
                now + self.discovery_interval,
                Timer::Discovery,
                Endpoint::Controller,
            );
        }
    }

    fn log_transitions(&mut self) {
        for (from, to) in self.controller.take_transitions() {
            self.record(
                RecordKind::Phase,
                Endpoint::Controller,
                Endpoint::Controller,
                json!({"from": from, "to": to}),
            );
        }
    }

    fn submit_inner(&mut self, utterance: &str) -> Result<TicketId, CodecError> {
        let sub = self.client.submit(utterance, self.now())?;
        self.log_ticket(sub.ticket);
        self.send_sms(Endpoint::User, Endpoint::Relay, &sub.sms_text);
        self.schedule_timer(
            sub.timeout_at,
            Timer::Timeout {
                ticket: sub.ticket,
                attempt: 1,
            },
            Endpoint::User,
        );
        Ok(sub.ticket)
    }

    fn log_ticket(&mut self, id: TicketId) {
        let t = self.client.ticket(id).expect("ticket exists");
        let payload = json!({
            "ticket": t.id,
            "state": t.state,
            "attempts": t.attempts,
            "utterance": t.utterance,
            "wire": t.wire,
            "ack": t.ack,
        });
        self.record(RecordKind::Ticket, Endpoint::User, Endpoint::User, payload);
    }

    fn send_sms(&mut self, src: Endpoint, dst: Endpoint, text: &str) {
        let sms = self.sms.clone();
        match self.core.sms_send(src, dst, text, &sms) {
            Ok(outcome) => {
                let at: Vec<f64> = outcome.deliveries.iter().map(|t| t.as_secs_f64()).collect();
                self.record(
                    RecordKind::SmsSend,
                    src,
                    dst,
                    json!({"text": text, "deliver_at": at}),
                );
            }
            Err(e) => self.record(
                RecordKind::Drop,
                src,
                dst,
                json!({"reason": e.to_string(), "text": text}),
            ),
        }
    }

    fn send_serial(&mut self, src: Endpoint, dst: Endpoint, frame: &[u8]) -> Option<SimTime> {
        let serial = self.serial.clone();
        match self.core.serial_send(src, dst, frame, &serial) {
            Ok(outcome) => {
                let mut payload = frame_payload(frame);
                payload["deliver_at"] = json!(outcome.deliver_at);
                if let Some((pos, byte)) = outcome.corrupted {
                    payload["corrupted"] = json!({"position": pos, "byte": byte});
                }
                self.record(RecordKind::SerialSend, src, dst, payload);
                Some(outcome.deliver_at)
            }
            Err(e) => {
                self.record(RecordKind::Drop, src, dst, json!({"reason": e.to_string()}));
                None
            }
        }
    }

    /// Relay phone, GSM side: decode the SMS body and push the bytes down the
    /// serial link. The relay does not check the command grammar.
    fn relay_forward(&mut self, text: &str) {
        if !self.controller.is_paired() {
            self.record(
                RecordKind::Drop,
                Endpoint::Relay,
                Endpoint::Controller,
                json!({"reason": "bluetooth link not paired", "text": text}),
            );
            return;
        }
        let frame = text
            .parse::<EncodedPayload>()
            .and_then(|payload| decode_stream(&payload))
            .map_err(|e| e.to_string())
            .and_then(|frame| {
                if frame.is_empty() {
                    Err("empty payload".to_string())
                } else {
                    Ok(frame)
                }
            });
        match frame {
            Ok(frame) => {
                self.send_serial(Endpoint::Relay, Endpoint::Controller, &frame);
            }
            Err(reason) => self.record(
                RecordKind::Drop,
                Endpoint::Relay,
                Endpoint::Controller,
                json!({"reason": reason, "text": text}),
            ),
        }
    }

    /// Relay phone, serial side: whatever the controller sends goes back to
    /// the user as a plain-text SMS.
    fn relay_return(&mut self, frame: &[u8]) {
        let text = String::from_utf8_lossy(frame).into_owned();
        self.send_sms(Endpoint::Relay, Endpoint::User, &text);
    }

    fn feed_controller(&mut self, frame: Vec<u8>) {
        let outcome = self.controller.handle_frame(frame.clone(), self.core.rng());
        self.log_transitions();
        match outcome {
            FrameOutcome::Executing {
                command,
                pulse_sent,
            } => {
                self.record(
                    RecordKind::Actuate,
                    Endpoint::Controller,
                    Endpoint::Controller,
                    json!({
                        "device": command.device,
                        "index": command.index,
                        "action": command.action,
                        "pulse_sent": pulse_sent,
                    }),
                );
                let at = self.now() + self.pulse;
                self.schedule_timer(at, Timer::PulseDone, Endpoint::Controller);
            }
            FrameOutcome::Queued { depth } => {
                let mut payload = frame_payload(&frame);
                payload["depth"] = json!(depth);
                self.record(
                    RecordKind::Queued,
                    Endpoint::Controller,
                    Endpoint::Controller,
                    payload,
                );
            }
            FrameOutcome::Dropped { reason } => {
                let mut payload = frame_payload(&frame);
                payload["reason"] = json!(reason);
                self.record(
                    RecordKind::Drop,
                    Endpoint::Controller,
                    Endpoint::Controller,
                    payload,
                );
            }
        }
    }

    fn finish_pulse(&mut self) {
        let ack = self.controller.finish_pulse();
        self.log_transitions();
        let text = render_ack(&ack);
        self.record(
            RecordKind::Ack,
            Endpoint::Controller,
            Endpoint::Relay,
            json!({"text": text, "success": ack.success}),
        );
        let sent_at = self
            .send_serial(Endpoint::Controller, Endpoint::Relay, text.as_bytes())
            .unwrap_or(self.now());
        self.schedule_timer(sent_at, Timer::AckSent, Endpoint::Controller);
    }

    fn on_ack_sms(&mut self, text: &str) {
        match self.client.on_ack_sms(text, self.now()) {
            AckOutcome::Resolved { ticket, .. } => self.log_ticket(ticket),
            AckOutcome::Unmatched { .. } => self.record(
                RecordKind::AckDiscarded,
                Endpoint::User,
                Endpoint::User,
                json!({"text": text, "reason": "no pending ticket matches"}),
            ),
            AckOutcome::Malformed { error } => self.record(
                RecordKind::AckDiscarded,
                Endpoint::User,
                Endpoint::User,
                json!({"text": text, "reason": error.to_string()}),
            ),
        }
    }

    fn on_timeout(&mut self, ticket: TicketId, attempt: u32) {
        match self.client.on_timeout(ticket, attempt, self.now()) {
            TimeoutOutcome::Stale => {}
            TimeoutOutcome::Retry {
                sms_text,
                attempt: next,
                timeout_at,
            } => {
                self.record(
                    RecordKind::Timeout,
                    Endpoint::User,
                    Endpoint::User,
                    json!({"ticket": ticket, "attempt": attempt}),
                );
                self.log_ticket(ticket);
                self.send_sms(Endpoint::User, Endpoint::Relay, &sms_text);
                self.schedule_timer(
                    timeout_at,
                    Timer::Timeout {
                        ticket,
                        attempt: next,
                    },
                    Endpoint::User,
                );
            }
            TimeoutOutcome::TimedOut => {
                self.record(
                    RecordKind::Timeout,
                    Endpoint::User,
                    Endpoint::User,
                    json!({"ticket": ticket, "attempt": attempt}),
                );
                self.log_ticket(ticket);
            }
        }
    }
}

fn frame_payload(frame: &[u8]) -> Value {
    json!({"frame": frame, "text": String::from_utf8_lossy(frame)})
}
