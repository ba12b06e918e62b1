//! Deterministic discrete-event core.
//!
//! Time is kept in integer nanoseconds. Events dequeue in `(ts, seq)` order,
//! where `seq` is the insertion counter, so simultaneous events keep the order
//! they were scheduled in regardless of the seed.
//!
//! All randomness comes from one [`SimRng`], a ChaCha8 stream seeded with
//! `ChaCha8Rng::seed_from_u64`. ChaCha output is specified bit-for-bit, so the
//! same seed replays the same draws on every platform.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Longest SMS body accepted by the GSM channel.
pub const SMS_MAX_CHARS: usize = 160;
/// Line bits per byte: start bit, 8 data bits, stop bit.
pub const SERIAL_BITS_PER_BYTE: u64 = 10;

const NANOS_PER_SEC: f64 = 1e9;

/// Bytes substituted into a frame when the serial link corrupts it. None of
/// them appear in the command or acknowledgement grammars.
const CORRUPTION_BYTES: [u8; 4] = *b"#?*~";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("event at {ts} is before the current time {now}")]
    PastEvent { ts: SimTime, now: SimTime },
    #[error("SMS of {len} characters exceeds the {SMS_MAX_CHARS} character limit")]
    OversizedSms { len: usize },
    #[error("SMS body is empty")]
    EmptySms,
    #[error("serial frame is empty")]
    EmptyFrame,
}

/// Simulated time in nanoseconds since the start of the run. Serializes as
/// fractional seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl Serialize for SimTime {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_secs_f64())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let secs = f64::deserialize(deserializer)?;
        if !(secs.is_finite() && secs >= 0.0) {
            return Err(serde::de::Error::custom(format!("invalid time {secs}")));
        }
        Ok(SimTime::from_secs_f64(secs))
    }
}

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    /// Rounds to the nearest nanosecond; negative and NaN inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        if secs.is_nan() || secs <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((secs * NANOS_PER_SEC).round() as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC
    }

    pub fn saturating_add_signed(self, delta_ns: i64) -> Self {
        SimTime(self.0.saturating_add_signed(delta_ns))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs_f64())
    }
}

/// Participants on the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    /// Remote user's phone.
    User,
    /// Home phone forwarding between GSM and the serial link.
    Relay,
    /// Appliance microcontroller.
    Controller,
    /// Simulation host (scripted inputs, operator actions).
    Host,
}

impl Endpoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::User => "user",
            Endpoint::Relay => "relay",
            Endpoint::Controller => "controller",
            Endpoint::Host => "host",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmsChannelConfig {
    pub base_delay_s: f64,
    /// Half-width of the uniform jitter around `base_delay_s`.
    pub jitter_s: f64,
    pub loss_prob: f64,
    pub dup_prob: f64,
    /// Extra uniform delay in `[0, reorder_window_s]` per copy.
    pub reorder_window_s: f64,
}

impl Default for SmsChannelConfig {
    fn default() -> Self {
        Self {
            base_delay_s: 2.0,
            jitter_s: 0.5,
            loss_prob: 0.0,
            dup_prob: 0.0,
            reorder_window_s: 0.0,
        }
    }
}

impl SmsChannelConfig {
    /// Fixed 2 s latency and no impairments.
    pub fn ideal() -> Self {
        Self {
            jitter_s: 0.0,
            ..Self::default()
        }
    }

    /// Returns `(field, problem)` pairs for every out-of-range field.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("base_delay_s", self.base_delay_s),
            ("jitter_s", self.jitter_s),
            ("reorder_window_s", self.reorder_window_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push((
                    name.to_string(),
                    format!("must be a finite number >= 0, got {v}"),
                ));
            }
        }
        for (name, v) in [("loss_prob", self.loss_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&v) {
                problems.push((name.to_string(), format!("must be within [0, 1], got {v}")));
            }
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerialLinkConfig {
    pub baud: u32,
    pub corrupt_prob: f64,
}

impl Default for SerialLinkConfig {
    fn default() -> Self {
        Self {
            baud: 9600,
            corrupt_prob: 0.0,
        }
    }
}

impl SerialLinkConfig {
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut problems = Vec::new();
        if self.baud == 0 {
            problems.push(("baud".to_string(), "must be > 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) {
            problems.push((
                "corrupt_prob".to_string(),
                format!("must be within [0, 1], got {}", self.corrupt_prob),
            ));
        }
        problems
    }

    /// Time on the line for `len` bytes.
    pub fn transmit_time(&self, len: usize) -> SimTime {
        let bits = SERIAL_BITS_PER_BYTE * len as u64;
        // round(bits * 1e9 / baud) in integer arithmetic
        let baud = u64::from(self.baud);
        SimTime::from_nanos((bits * 1_000_000_000 + baud / 2) / baud)
    }
}

/// Timer payloads. Ticket ids and attempt numbers belong to the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timer {
    Boot,
    Discovery,
    /// End of the actuation pulse; the controller verifies next.
    PulseDone,
    /// Ack frame has left the controller's serial port.
    AckSent,
    Timeout {
        ticket: u64,
        attempt: u32,
    },
    /// Entry `n` of the scenario script is due.
    Script(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    SmsDeliver,
    SerialDeliver,
    Timer(Timer),
}

impl EventKind {
    pub fn tag(&self) -> &'static str {
        match self {
            EventKind::SmsDeliver => "SMS_DELIVER",
            EventKind::SerialDeliver => "SERIAL_DELIVER",
            EventKind::Timer(_) => "TIMER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub ts: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub payload: Vec<u8>,
}

/// Seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct SimRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True with probability `p`; `p <= 0` never fires and `p >= 1` always
    /// does. One draw is consumed either way.
    pub fn chance(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    /// Uniform integer in `[-half_width, half_width]`.
    pub fn symmetric(&mut self, half_width: u64) -> i64 {
        let hw = half_width.min(i64::MAX as u64) as i64;
        self.inner.random_range(-hw..=hw)
    }

    /// Uniform integer in `[0, upper]`.
    pub fn up_to(&mut self, upper: u64) -> u64 {
        self.inner.random_range(0..=upper)
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.inner.random_range(0..len)
    }
}

/// What happened to one SMS handed to the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsOutcome {
    /// Delivery times; empty when lost, two entries when duplicated.
    pub deliveries: Vec<SimTime>,
}

impl SmsOutcome {
    pub fn lost(&self) -> bool {
        self.deliveries.is_empty()
    }

    pub fn duplicated(&self) -> bool {
        self.deliveries.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialOutcome {
    pub deliver_at: SimTime,
    /// `(position, substituted byte)` when the frame was corrupted.
    pub corrupted: Option<(usize, u8)>,
}

/// Event queue, clock and random stream for one run.
#[derive(Debug)]
pub struct SimCore {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    rng: SimRng,
}

#[derive(Debug, PartialEq, Eq)]
struct Queued(SimEvent);

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.ts, self.0.seq).cmp(&(other.0.ts, other.0.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl SimCore {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            rng: SimRng::new(seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(q)| q.0.ts)
    }

    /// Enqueues an event, assigning its sequence number. Returns the `seq`.
    pub fn schedule(
        &mut self,
        ts: SimTime,
        kind: EventKind,
        src: Endpoint,
        dst: Endpoint,
        payload: Vec<u8>,
    ) -> Result<u64, SimError> {
        if ts < self.now {
            return Err(SimError::PastEvent { ts, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(SimEvent {
            ts,
            seq,
            kind,
            src,
            dst,
            payload,
        })));
        Ok(seq)
    }

    pub fn schedule_timer(
        &mut self,
        ts: SimTime,
        timer: Timer,
        owner: Endpoint,
    ) -> Result<u64, SimError> {
        self.schedule(ts, EventKind::Timer(timer), owner, owner, Vec::new())
    }

    /// Pops the next event due at or before `until`, moving the clock to it.
    pub fn pop_due(&mut self, until: SimTime) -> Option<SimEvent> {
        match self.queue.peek() {
            Some(Reverse(q)) if q.0.ts <= until => {}
            _ => return None,
        }
        let Reverse(Queued(ev)) = self.queue.pop()?;
        self.now = ev.ts;
        Some(ev)
    }

    /// Moves the clock forward to `t` without processing anything. Earlier
    /// targets are ignored.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    /// Processes every event with `ts <= t` through `handler`, which may
    /// schedule further events, then sets the clock to `t`.
    pub fn step_until<F>(&mut self, t: SimTime, mut handler: F) -> Vec<SimEvent>
    where
        F: FnMut(&mut SimCore, &SimEvent),
    {
        let mut processed = Vec::new();
        while let Some(ev) = self.pop_due(t) {
            handler(self, &ev);
            processed.push(ev);
        }
        self.advance_to(t);
        processed
    }

    /// Hands an SMS to the GSM channel.
    ///
    /// Draw order per send: loss, then delay of the first copy, then the
    /// duplicate coin, then the delay of the duplicate.
    pub fn sms_send(
        &mut self,
        src: Endpoint,
        dst: Endpoint,
        text: &str,
        cfg: &SmsChannelConfig,
    ) -> Result<SmsOutcome, SimError> {
        let len = text.chars().count();
        if len == 0 {
            return Err(SimError::EmptySms);
        }
        if len > SMS_MAX_CHARS {
            return Err(SimError::OversizedSms { len });
        }
        let mut deliveries = Vec::new();
        if !self.rng.chance(cfg.loss_prob) {
            deliveries.push(self.sms_delay(cfg));
            if self.rng.chance(cfg.dup_prob) {
                deliveries.push(self.sms_delay(cfg));
            }
        }
        for &ts in &deliveries {
            self.schedule(
                ts,
                EventKind::SmsDeliver,
                src,
                dst,
                text.as_bytes().to_vec(),
            )?;
        }
        Ok(SmsOutcome { deliveries })
    }

    fn sms_delay(&mut self, cfg: &SmsChannelConfig) -> SimTime {
        let base = SimTime::from_secs_f64(cfg.base_delay_s);
        let jitter = self
            .rng
            .symmetric(SimTime::from_secs_f64(cfg.jitter_s).as_nanos());
        let reorder = self
            .rng
            .up_to(SimTime::from_secs_f64(cfg.reorder_window_s).as_nanos());
        let delay = base.saturating_add_signed(jitter) + SimTime::from_nanos(reorder);
        self.now + delay
    }

    /// Puts a frame on the serial link. Delivery happens after the frame's
    /// line time at `cfg.baud`.
    pub fn serial_send(
        &mut self,
        src: Endpoint,
        dst: Endpoint,
        frame: &[u8],
        cfg: &SerialLinkConfig,
    ) -> Result<SerialOutcome, SimError> {
        if frame.is_empty() {
            return Err(SimError::EmptyFrame);
        }
        let mut delivered = frame.to_vec();
        let corrupted = if self.rng.chance(cfg.corrupt_prob) {
            let pos = self.rng.index(frame.len());
            let byte = CORRUPTION_BYTES[self.rng.index(CORRUPTION_BYTES.len())];
            delivered[pos] = byte;
            Some((pos, byte))
        } else {
            None
        };
        let deliver_at = self.now + cfg.transmit_time(frame.len());
        self.schedule(deliver_at, EventKind::SerialDeliver, src, dst, delivered)?;
        Ok(SerialOutcome {
            deliver_at,
            corrupted,
        })
    }
}
