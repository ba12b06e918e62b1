//! Scenario files: seed, channel settings, devices and an optional script of
//! timed utterances. Every field has a default, so `{}` is a valid scenario.

use std::fmt;
use std::num::NonZeroU32;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::RetryPolicy;
use crate::codec::{parse_utterance, DeviceKind};
use crate::controller::FailureMode;
use crate::simnet::{SerialLinkConfig, SmsChannelConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldProblem {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {}", format_problems(.0))]
    Invalid(Vec<FieldProblem>),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

fn format_problems(problems: &[FieldProblem]) -> String {
    problems
        .iter()
        .map(|p| format!("{}: {}", p.field, p.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub kind: DeviceKind,
    #[serde(default = "default_index")]
    pub index: u32,
    #[serde(default)]
    pub failure: FailureMode,
}

fn default_index() -> u32 {
    1
}

impl DeviceSpec {
    pub fn healthy(kind: DeviceKind) -> Self {
        Self {
            kind,
            index: 1,
            failure: FailureMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub at_s: f64,
    pub utterance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum RunMode {
    /// The clock moves only when asked to.
    Stepped,
    /// The clock follows wall time scaled by `speed`.
    Realtime {
        #[serde(default = "default_speed")]
        speed: f64,
    },
}

fn default_speed() -> f64 {
    10.0
}

impl Default for RunMode {
    fn default() -> Self {
        RunMode::Realtime {
            speed: default_speed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    /// Gap between Bluetooth discovery rounds.
    pub discovery_interval_s: f64,
    /// Duration of the switching pulse before the relay is checked.
    pub pulse_s: f64,
    /// When the relay phone becomes reachable; `null` means never.
    pub phone_available_at_s: Option<f64>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            discovery_interval_s: 5.0,
            pulse_s: 0.1,
            phone_available_at_s: Some(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub sms: SmsChannelConfig,
    pub serial: SerialLinkConfig,
    pub devices: Vec<DeviceSpec>,
    pub script: Vec<ScriptEntry>,
    pub run_mode: RunMode,
    pub retry: RetryPolicy,
    pub controller: ControllerSettings,
}

impl Default for Scenario {
    /// Seed 42; one supply, one light and one fan, all healthy.
    fn default() -> Self {
        Self {
            seed: 42,
            sms: SmsChannelConfig::default(),
            serial: SerialLinkConfig::default(),
            devices: DeviceKind::ALL
                .into_iter()
                .map(DeviceSpec::healthy)
                .collect(),
            script: Vec::new(),
            run_mode: RunMode::default(),
            retry: RetryPolicy::default(),
            controller: ControllerSettings::default(),
        }
    }
}

/// The six basic commands, in table order.
pub const BASIC_UTTERANCES: [&str; 6] = [
    "Main Switch On",
    "Main Switch OFF",
    "Light On",
    "Light Off",
    "Fan On",
    "Fan Off",
];

impl Scenario {
    /// The six basic commands ten seconds apart over a lossless channel.
    pub fn demo() -> Self {
        Self {
            sms: SmsChannelConfig::ideal(),
            script: BASIC_UTTERANCES
                .iter()
                .enumerate()
                .map(|(i, u)| ScriptEntry {
                    at_s: 10.0 * i as f64,
                    utterance: u.to_string(),
                })
                .collect(),
            run_mode: RunMode::Stepped,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Registered devices as `(kind, index, failure)`; call after `validate`.
    pub fn device_list(&self) -> Vec<(DeviceKind, NonZeroU32, FailureMode)> {
        self.devices
            .iter()
            .filter_map(|d| NonZeroU32::new(d.index).map(|i| (d.kind, i, d.failure)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        let mut push =
            |field: String, message: String| problems.push(FieldProblem { field, message });

        for (field, message) in self.sms.validate() {
            push(format!("sms.{field}"), message);
        }
        for (field, message) in self.serial.validate() {
            push(format!("serial.{field}"), message);
        }
        for (field, message) in self.retry.validate() {
            push(format!("retry.{field}"), message);
        }

        if self.devices.is_empty() {
            push("devices".into(), "at least one device is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            if d.index == 0 {
                push(format!("devices[{i}].index"), "must be >= 1".into());
            }
            if !seen.insert((d.kind, d.index)) {
                push(
                    format!("devices[{i}]"),
                    format!("duplicate device {} {}", d.kind, d.index),
                );
            }
            if let Err(message) = d.failure.validate() {
                push(format!("devices[{i}].failure"), message);
            }
        }

        let mut prev = 0.0;
        for (i, entry) in self.script.iter().enumerate() {
            if !(entry.at_s.is_finite() && entry.at_s >= 0.0) {
                push(
                    format!("script[{i}].at_s"),
                    format!("must be a finite time >= 0, got {}", entry.at_s),
                );
            } else if entry.at_s < prev {
                push(
                    format!("script[{i}].at_s"),
                    format!("must not precede the previous entry ({prev})"),
                );
            } else {
                prev = entry.at_s;
            }
            if let Err(e) = parse_utterance(&entry.utterance) {
                push(format!("script[{i}].utterance"), e.to_string());
            }
        }

        if let RunMode::Realtime { speed } = self.run_mode {
            if !(speed.is_finite() && speed > 0.0) {
                push("run_mode.speed".into(), format!("must be > 0, got {speed}"));
            }
        }

        let c = &self.controller;
        if !(c.discovery_interval_s.is_finite() && c.discovery_interval_s > 0.0) {
            push(
                "controller.discovery_interval_s".into(),
                "must be > 0".into(),
            );
        }
        if !(c.pulse_s.is_finite() && c.pulse_s >= 0.0) {
            push("controller.pulse_s".into(), "must be >= 0".into());
        }
        if let Some(t) = c.phone_available_at_s {
            if !(t.is_finite() && t >= 0.0) {
                push(
                    "controller.phone_available_at_s".into(),
                    "must be >= 0 or null".into(),
                );
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }
}

impl fmt::Display for FieldProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}
