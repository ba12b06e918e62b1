//! Home-side appliance controller.
//!
//! The controller is written sans-IO: methods mutate state and return what
//! happened, and the caller (see [`crate::world`]) turns that into serial
//! frames, timers and log records.
//!
//! Phase graph:
//!
//! ```text
//! INIT -> BT_DISCOVERY -> PAIRED -> IDLE -> EXECUTING -> VERIFYING -> ACKING -> IDLE
//!              ^    |
//!              +----+
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::num::NonZeroU32;

use serde::{Deserialize, Serialize};

use crate::codec::{parse_wire, Ack, DeviceKind, SwitchAction, VoiceCommand};
use crate::simnet::SimRng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("no device {kind} {index} is registered")]
    UnknownDevice { kind: DeviceKind, index: NonZeroU32 },
    #[error("device {kind} {index} is registered twice")]
    DuplicateDevice { kind: DeviceKind, index: NonZeroU32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerPhase {
    Init,
    BtDiscovery,
    Paired,
    Idle,
    Executing,
    Verifying,
    Acking,
}

impl ControllerPhase {
    pub fn can_transition_to(self, next: ControllerPhase) -> bool {
        use ControllerPhase::*;
        matches!(
            (self, next),
            (Init, BtDiscovery)
                | (BtDiscovery, BtDiscovery)
                | (BtDiscovery, Paired)
                | (Paired, Idle)
                | (Idle, Executing)
                | (Executing, Verifying)
                | (Verifying, Acking)
                | (Acking, Idle)
        )
    }

    pub fn as_str(self) -> &'static str {
        use ControllerPhase::*;
        match self {
            Init => "INIT",
            BtDiscovery => "BT_DISCOVERY",
            Paired => "PAIRED",
            Idle => "IDLE",
            Executing => "EXECUTING",
            Verifying => "VERIFYING",
            Acking => "ACKING",
        }
    }
}

impl fmt::Display for ControllerPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Injected actuator fault.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum FailureMode {
    #[default]
    None,
    /// Pulses have no effect on the relay.
    Stuck,
    /// Each pulse is lost with probability `p`.
    Flaky { p: f64 },
}

impl FailureMode {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            FailureMode::Flaky { p } if !(0.0..=1.0).contains(p) => {
                Err(format!("flaky probability must be within [0, 1], got {p}"))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for FailureMode {
    type Err = String;

    /// `none`, `stuck`, `flaky` (p = 0.5) or `flaky:<p>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        let mode = match lower.split_once(':') {
            None if lower == "none" => FailureMode::None,
            None if lower == "stuck" => FailureMode::Stuck,
            None if lower == "flaky" => FailureMode::Flaky { p: 0.5 },
            Some(("flaky", p)) => FailureMode::Flaky {
                p: p.parse()
                    .map_err(|_| format!("bad flaky probability {p:?}"))?,
            },
            _ => return Err(format!("unknown failure mode {s:?}")),
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub kind: DeviceKind,
    pub index: NonZeroU32,
    pub relay_on: bool,
    pub failure_mode: FailureMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub kind: DeviceKind,
    pub index: NonZeroU32,
    pub relay_on: bool,
    pub effective_output: bool,
    pub failure_mode: FailureMode,
}

/// Point-in-time copy of every device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeSnapshot {
    pub supply_on: bool,
    pub devices: Vec<DeviceView>,
}

impl HomeSnapshot {
    pub fn device(&self, kind: DeviceKind, index: u32) -> Option<&DeviceView> {
        self.devices
            .iter()
            .find(|d| d.kind == kind && d.index.get() == index)
    }
}

/// Result of offering a serial frame to the controller.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    /// Parsed and the actuation pulse was sent; call
    /// [`Controller::finish_pulse`] once the pulse completes.
    Executing {
        command: VoiceCommand,
        pulse_sent: bool,
    },
    /// The controller is busy; the frame waits in the intake queue.
    Queued { depth: usize },
    /// Not a valid command, or the controller is not paired yet.
    Dropped { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub discovery_interval_s: f64,
    pub pulse_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            discovery_interval_s: 5.0,
            pulse_s: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Controller {
    phase: ControllerPhase,
    devices: BTreeMap<(DeviceKind, NonZeroU32), DeviceState>,
    intake: VecDeque<Vec<u8>>,
    current: Option<VoiceCommand>,
    transitions: Vec<(ControllerPhase, ControllerPhase)>,
}

impl Controller {
    pub fn new(
        devices: impl IntoIterator<Item = (DeviceKind, NonZeroU32, FailureMode)>,
    ) -> Result<Self, ControllerError> {
        let mut map = BTreeMap::new();
        for (kind, index, failure_mode) in devices {
            let state = DeviceState {
                kind,
                index,
                relay_on: false,
                failure_mode,
            };
            if map.insert((kind, index), state).is_some() {
                return Err(ControllerError::DuplicateDevice { kind, index });
            }
        }
        Ok(Self {
            phase: ControllerPhase::Init,
            devices: map,
            intake: VecDeque::new(),
            current: None,
            transitions: Vec::new(),
        })
    }

    pub fn phase(&self) -> ControllerPhase {
        self.phase
    }

    pub fn is_paired(&self) -> bool {
        !matches!(
            self.phase,
            ControllerPhase::Init | ControllerPhase::BtDiscovery
        )
    }

    pub fn queued_frames(&self) -> usize {
        self.intake.len()
    }

    /// Transitions since the last call, oldest first.
    pub fn take_transitions(&mut self) -> Vec<(ControllerPhase, ControllerPhase)> {
        std::mem::take(&mut self.transitions)
    }

    fn enter(&mut self, next: ControllerPhase) {
        assert!(
            self.phase.can_transition_to(next),
            "illegal controller transition {} -> {}",
            self.phase,
            next
        );
        self.transitions.push((self.phase, next));
        self.phase = next;
    }

    /// Leaves INIT and starts looking for the relay phone.
    pub fn boot(&mut self) {
        if self.phase == ControllerPhase::Init {
            self.enter(ControllerPhase::BtDiscovery);
        }
    }

    /// One discovery round. Returns true once paired.
    pub fn discover(&mut self, phone_present: bool) -> bool {
        if self.phase != ControllerPhase::BtDiscovery {
            return self.is_paired();
        }
        if phone_present {
            self.enter(ControllerPhase::Paired);
            self.enter(ControllerPhase::Idle);
            true
        } else {
            self.enter(ControllerPhase::BtDiscovery);
            false
        }
    }

    /// Offers a received frame. Frames arriving while a command is in flight
    /// wait in FIFO order.
    pub fn handle_frame(&mut self, frame: Vec<u8>, rng: &mut SimRng) -> FrameOutcome {
        match self.phase {
            ControllerPhase::Init | ControllerPhase::BtDiscovery | ControllerPhase::Paired => {
                FrameOutcome::Dropped {
                    reason: "controller not paired".to_string(),
                }
            }
            ControllerPhase::Executing | ControllerPhase::Verifying | ControllerPhase::Acking => {
                self.intake.push_back(frame);
                FrameOutcome::Queued {
                    depth: self.intake.len(),
                }
            }
            ControllerPhase::Idle => self.start(&frame, rng),
        }
    }

    fn start(&mut self, frame: &[u8], rng: &mut SimRng) -> FrameOutcome {
        let command = match std::str::from_utf8(frame)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_wire(text).map_err(|e| e.to_string()))
        {
            Ok(cmd) => cmd,
            Err(reason) => return FrameOutcome::Dropped { reason },
        };
        self.enter(ControllerPhase::Executing);
        self.current = Some(command);
        // An unregistered device gets no pulse and fails verification.
        let pulse_sent = self
            .actuate(command.device, command.index, command.action, rng)
            .unwrap_or(false);
        FrameOutcome::Executing {
            command,
            pulse_sent,
        }
    }

    /// Ends the pulse, checks the relay and produces the acknowledgement.
    /// Panics unless a command is executing.
    pub fn finish_pulse(&mut self) -> Ack {
        let command = self
            .current
            .expect("finish_pulse without an executing command");
        self.enter(ControllerPhase::Verifying);
        let ok = self
            .verify(command.device, command.index, command.action)
            .unwrap_or(false);
        self.enter(ControllerPhase::Acking);
        Ack::for_command(&command, ok)
    }

    /// The ack frame is on its way; return to IDLE. Yields the next queued
    /// frame, which the caller should feed back through `handle_frame`.
    pub fn ack_sent(&mut self) -> Option<Vec<u8>> {
        self.enter(ControllerPhase::Idle);
        self.current = None;
        self.intake.pop_front()
    }

    /// Sends a switching pulse. `Ok(true)` means the pulse went out, not that
    /// the relay moved: a stuck actuator also returns `Ok(true)`.
    pub fn actuate(
        &mut self,
        kind: DeviceKind,
        index: NonZeroU32,
        action: SwitchAction,
        rng: &mut SimRng,
    ) -> Result<bool, ControllerError> {
        let dev = self
            .devices
            .get_mut(&(kind, index))
            .ok_or(ControllerError::UnknownDevice { kind, index })?;
        let takes_effect = match dev.failure_mode {
            FailureMode::None => true,
            FailureMode::Stuck => false,
            FailureMode::Flaky { p } => !rng.chance(p),
        };
        if takes_effect {
            dev.relay_on = action.is_on();
        }
        Ok(true)
    }

    /// True when the relay sits in the state `expected` asks for.
    pub fn verify(
        &self,
        kind: DeviceKind,
        index: NonZeroU32,
        expected: SwitchAction,
    ) -> Result<bool, ControllerError> {
        self.devices
            .get(&(kind, index))
            .map(|d| d.relay_on == expected.is_on())
            .ok_or(ControllerError::UnknownDevice { kind, index })
    }

    pub fn set_failure(
        &mut self,
        kind: DeviceKind,
        index: NonZeroU32,
        mode: FailureMode,
    ) -> Result<(), ControllerError> {
        self.devices
            .get_mut(&(kind, index))
            .map(|d| d.failure_mode = mode)
            .ok_or(ControllerError::UnknownDevice { kind, index })
    }

    pub fn device(&self, kind: DeviceKind, index: NonZeroU32) -> Option<&DeviceState> {
        self.devices.get(&(kind, index))
    }

    /// Supply is on when every registered SUPPLY relay is on; a home with no
    /// SUPPLY device is ungated.
    pub fn snapshot(&self) -> HomeSnapshot {
        let supply_on = self
            .devices
            .values()
            .filter(|d| d.kind == DeviceKind::Supply)
            .all(|d| d.relay_on);
        let devices = self
            .devices
            .values()
            .map(|d| DeviceView {
                kind: d.kind,
                index: d.index,
                relay_on: d.relay_on,
                effective_output: match d.kind {
                    DeviceKind::Supply => d.relay_on,
                    _ => d.relay_on && supply_on,
                },
                failure_mode: d.failure_mode,
            })
            .collect();
        HomeSnapshot { supply_on, devices }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{parse_utterance, render_ack, render_wire};

    const ONE: NonZeroU32 = NonZeroU32::MIN;

    fn home() -> Controller {
        Controller::new(DeviceKind::ALL.map(|k| (k, ONE, FailureMode::None))).unwrap()
    }

    fn paired() -> Controller {
        let mut c = home();
        c.boot();
        assert!(c.discover(true));
        c
    }

    /// Full receive/execute/verify/ack cycle for one frame.
    fn run_frame(c: &mut Controller, frame: &str, rng: &mut SimRng) -> Option<String> {
        match c.handle_frame(frame.as_bytes().to_vec(), rng) {
            FrameOutcome::Executing { .. } => {
                let ack = c.finish_pulse();
                assert!(c.ack_sent().is_none());
                Some(render_ack(&ack))
            }
            FrameOutcome::Dropped { .. } => None,
            FrameOutcome::Queued { .. } => panic!("unexpected queueing"),
        }
    }

    #[test]
    fn boot_and_discovery() {
        let mut c = home();
        assert_eq!(c.phase(), ControllerPhase::Init);
        c.boot();
        assert_eq!(c.phase(), ControllerPhase::BtDiscovery);
        assert!(!c.discover(false));
        assert!(!c.discover(false));
        assert_eq!(c.phase(), ControllerPhase::BtDiscovery);
        assert!(c.discover(true));
        assert_eq!(c.phase(), ControllerPhase::Idle);
        let walk: Vec<_> = c.take_transitions().into_iter().map(|(_, to)| to).collect();
        use ControllerPhase::*;
        assert_eq!(
            walk,
            vec![BtDiscovery, BtDiscovery, BtDiscovery, Paired, Idle]
        );
    }

    #[test]
    fn healthy_and_stuck_acks() {
        let mut rng = SimRng::new(1);
        let mut c = paired();
        assert_eq!(
            run_frame(&mut c, "SON1E", &mut rng).as_deref(),
            Some("SUPPLY 1 on")
        );

        c.set_failure(DeviceKind::Fan, ONE, FailureMode::Stuck)
            .unwrap();
        assert_eq!(
            run_frame(&mut c, "FON1E", &mut rng).as_deref(),
            Some("FAN 1 on 0")
        );
        assert!(!c.device(DeviceKind::Fan, ONE).unwrap().relay_on);
    }

    #[test]
    fn malformed_frame_dropped_in_idle() {
        let mut rng = SimRng::new(1);
        let mut c = paired();
        c.take_transitions();
        assert!(run_frame(&mut c, "S#N1E", &mut rng).is_none());
        assert_eq!(c.phase(), ControllerPhase::Idle);
        assert!(c.take_transitions().is_empty());
        assert!(run_frame(&mut c, "\u{F}", &mut rng).is_none());
        let bad_utf8 = c.handle_frame(vec![0xC3, 0x28], &mut rng);
        assert!(matches!(bad_utf8, FrameOutcome::Dropped { .. }));
    }

    #[test]
    fn unpaired_controller_drops_frames() {
        let mut rng = SimRng::new(1);
        let mut c = home();
        c.boot();
        assert!(matches!(
            c.handle_frame(b"LON1E".to_vec(), &mut rng),
            FrameOutcome::Dropped { .. }
        ));
    }

    #[test]
    fn busy_controller_queues_frames() {
        let mut rng = SimRng::new(1);
        let mut c = paired();
        assert!(matches!(
            c.handle_frame(b"LON1E".to_vec(), &mut rng),
            FrameOutcome::Executing { .. }
        ));
        assert_eq!(
            c.handle_frame(b"FON1E".to_vec(), &mut rng),
            FrameOutcome::Queued { depth: 1 }
        );
        c.finish_pulse();
        let next = c.ack_sent().unwrap();
        assert_eq!(next, b"FON1E");
    }

    #[test]
    fn unknown_device_acks_failure() {
        let mut rng = SimRng::new(1);
        let mut c = paired();
        assert_eq!(
            run_frame(&mut c, "LON2E", &mut rng).as_deref(),
            Some("LIGHT 2 on 0")
        );
        let two = NonZeroU32::new(2).unwrap();
        assert_eq!(
            c.verify(DeviceKind::Light, two, SwitchAction::On),
            Err(ControllerError::UnknownDevice {
                kind: DeviceKind::Light,
                index: two
            })
        );
    }

    #[test]
    fn actuate_semantics() {
        let mut rng = SimRng::new(1);
        let mut c = home();
        assert!(c
            .actuate(DeviceKind::Light, ONE, SwitchAction::On, &mut rng)
            .unwrap());
        assert!(c.device(DeviceKind::Light, ONE).unwrap().relay_on);
        assert!(c
            .actuate(DeviceKind::Light, ONE, SwitchAction::On, &mut rng)
            .unwrap());
        assert!(c.device(DeviceKind::Light, ONE).unwrap().relay_on);

        c.set_failure(DeviceKind::Fan, ONE, FailureMode::Stuck)
            .unwrap();
        assert!(c
            .actuate(DeviceKind::Fan, ONE, SwitchAction::On, &mut rng)
            .unwrap());
        assert!(!c.device(DeviceKind::Fan, ONE).unwrap().relay_on);

        c.set_failure(DeviceKind::Fan, ONE, FailureMode::Flaky { p: 1.0 })
            .unwrap();
        c.actuate(DeviceKind::Fan, ONE, SwitchAction::On, &mut rng)
            .unwrap();
        assert!(!c.device(DeviceKind::Fan, ONE).unwrap().relay_on);
        c.set_failure(DeviceKind::Fan, ONE, FailureMode::Flaky { p: 0.0 })
            .unwrap();
        c.actuate(DeviceKind::Fan, ONE, SwitchAction::On, &mut rng)
            .unwrap();
        assert!(c.device(DeviceKind::Fan, ONE).unwrap().relay_on);

        let three = NonZeroU32::new(3).unwrap();
        assert!(c
            .actuate(DeviceKind::Fan, three, SwitchAction::On, &mut rng)
            .is_err());
    }

    #[test]
    fn verify_semantics() {
        let mut rng = SimRng::new(1);
        let mut c = home();
        c.actuate(DeviceKind::Light, ONE, SwitchAction::On, &mut rng)
            .unwrap();
        assert!(c.verify(DeviceKind::Light, ONE, SwitchAction::On).unwrap());
        assert!(!c.verify(DeviceKind::Fan, ONE, SwitchAction::On).unwrap());
        assert!(c.verify(DeviceKind::Fan, ONE, SwitchAction::Off).unwrap());
    }

    #[test]
    fn snapshot_gating() {
        let mut rng = SimRng::new(1);
        let mut c = home();
        let snap = c.snapshot();
        assert!(snap.devices.iter().all(|d| !d.effective_output));

        c.actuate(DeviceKind::Light, ONE, SwitchAction::On, &mut rng)
            .unwrap();
        assert!(
            !c.snapshot()
                .device(DeviceKind::Light, 1)
                .unwrap()
                .effective_output
        );

        c.actuate(DeviceKind::Supply, ONE, SwitchAction::On, &mut rng)
            .unwrap();
        c.actuate(DeviceKind::Fan, ONE, SwitchAction::On, &mut rng)
            .unwrap();
        let snap = c.snapshot();
        assert!(snap.supply_on);
        assert!(snap.device(DeviceKind::Fan, 1).unwrap().effective_output);
        assert!(snap.device(DeviceKind::Supply, 1).unwrap().effective_output);
    }

    #[test]
    fn duplicate_device_rejected() {
        let err = Controller::new([
            (DeviceKind::Fan, ONE, FailureMode::None),
            (DeviceKind::Fan, ONE, FailureMode::Stuck),
        ])
        .unwrap_err();
        assert!(matches!(err, ControllerError::DuplicateDevice { .. }));
    }

    #[test]
    fn failure_mode_parsing() {
        assert_eq!("stuck".parse::<FailureMode>().unwrap(), FailureMode::Stuck);
        assert_eq!("NONE".parse::<FailureMode>().unwrap(), FailureMode::None);
        assert_eq!(
            "flaky:0.25".parse::<FailureMode>().unwrap(),
            FailureMode::Flaky { p: 0.25 }
        );
        assert!("flaky:2".parse::<FailureMode>().is_err());
        assert!("broken".parse::<FailureMode>().is_err());
    }

    fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut tail in permutations(&rest) {
                tail.insert(0, head.clone());
                out.push(tail);
            }
        }
        out
    }

    #[test]
    fn every_ordering_ends_at_last_command() {
        let utterances = [
            "Main Switch On",
            "Main Switch OFF",
            "Light On",
            "Light Off",
            "Fan On",
            "Fan Off",
        ];
        let orderings = permutations(&utterances);
        assert_eq!(orderings.len(), 720);
        let mut rng = SimRng::new(3);
        for order in orderings {
            let mut c = paired();
            let mut last = BTreeMap::new();
            for u in &order {
                let cmd = parse_utterance(u).unwrap();
                let ack = run_frame(&mut c, render_wire(&cmd).as_str(), &mut rng).unwrap();
                assert!(!ack.ends_with(" 0"));
                last.insert(cmd.device, cmd.action.is_on());
                let snap = c.snapshot();
                for d in &snap.devices {
                    let expected = match d.kind {
                        DeviceKind::Supply => d.relay_on,
                        _ => d.relay_on && snap.supply_on,
                    };
                    assert_eq!(d.effective_output, expected);
                }
            }
            for (kind, on) in last {
                assert_eq!(c.device(kind, ONE).unwrap().relay_on, on, "{order:?}");
            }
        }
    }
}
