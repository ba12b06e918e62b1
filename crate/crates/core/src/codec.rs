//! Wire formats spoken between the remote phone, the home relay phone and the
//! appliance controller.
//!
//! Three formats live here:
//!
//! - command strings such as `LON1E`: device letter, `ON`/`OFF`, device index,
//!   and an `E` terminator;
//! - acknowledgement strings such as `LIGHT 1 on`, with a trailing ` 0` when
//!   the controller could not confirm the operation;
//! - the payload escape encoding, which lifts byte values `0..=31` into
//!   `255..=286` so that no control characters ride in the message body.
//!
//! Indices above 1 are an extension: the deployed command set only ever uses
//! device number 1, but the grammar accepts any positive decimal index.

use std::fmt;
use std::num::NonZeroU32;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Offset added to byte values in the control range.
pub const ESCAPE_OFFSET: u16 = 255;
/// Highest byte value that gets escaped.
pub const CONTROL_MAX: u8 = 31;
/// Highest value an encoded payload may contain.
pub const PAYLOAD_MAX: u16 = ESCAPE_OFFSET + CONTROL_MAX as u16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("unrecognized utterance: {0:?}")]
    UnrecognizedUtterance(String),
    #[error("malformed wire command {text:?}: {reason}")]
    MalformedWire { text: String, reason: &'static str },
    #[error("malformed acknowledgement {text:?}: {reason}")]
    MalformedAck { text: String, reason: &'static str },
    #[error("byte 255 at position {position} cannot be encoded")]
    UnencodableByte { position: usize },
    #[error("malformed payload at position {position}: {reason}")]
    MalformedPayload { position: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DeviceKind {
    Supply,
    Light,
    Fan,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 3] = [DeviceKind::Supply, DeviceKind::Light, DeviceKind::Fan];

    pub fn wire_letter(self) -> char {
        match self {
            DeviceKind::Supply => 'S',
            DeviceKind::Light => 'L',
            DeviceKind::Fan => 'F',
        }
    }

    pub fn from_wire_letter(letter: char) -> Option<Self> {
        match letter {
            'S' => Some(DeviceKind::Supply),
            'L' => Some(DeviceKind::Light),
            'F' => Some(DeviceKind::Fan),
            _ => None,
        }
    }

    pub fn ack_name(self) -> &'static str {
        match self {
            DeviceKind::Supply => "SUPPLY",
            DeviceKind::Light => "LIGHT",
            DeviceKind::Fan => "FAN",
        }
    }

    pub fn from_ack_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.ack_name() == name)
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.ack_name())
    }
}

impl FromStr for DeviceKind {
    type Err = String;

    /// Case-insensitive ack name (`supply`, `LIGHT`, ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_ack_name(&s.to_ascii_uppercase())
            .ok_or_else(|| format!("unknown device kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SwitchAction {
    On,
    Off,
}

impl SwitchAction {
    pub fn wire(self) -> &'static str {
        match self {
            SwitchAction::On => "ON",
            SwitchAction::Off => "OFF",
        }
    }

    pub fn ack(self) -> &'static str {
        match self {
            SwitchAction::On => "on",
            SwitchAction::Off => "off",
        }
    }

    pub fn is_on(self) -> bool {
        self == SwitchAction::On
    }
}

/// A parsed spoken instruction: which device, what to do, which unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoiceCommand {
    pub device: DeviceKind,
    pub action: SwitchAction,
    pub index: NonZeroU32,
}

impl VoiceCommand {
    /// Returns `None` when `index` is zero.
    pub fn new(device: DeviceKind, action: SwitchAction, index: u32) -> Option<Self> {
        NonZeroU32::new(index).map(|index| Self {
            device,
            action,
            index,
        })
    }
}

/// A command string in canonical form (no surrounding whitespace).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WireCommand(String);

impl WireCommand {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for WireCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Feedback from the controller about one executed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ack {
    pub device: DeviceKind,
    pub index: NonZeroU32,
    pub action: SwitchAction,
    pub success: bool,
}

impl Ack {
    pub fn for_command(cmd: &VoiceCommand, success: bool) -> Self {
        Self {
            device: cmd.device,
            index: cmd.index,
            action: cmd.action,
            success,
        }
    }

    /// True when this ack answers `cmd` (ignoring the success flag).
    pub fn answers(&self, cmd: &VoiceCommand) -> bool {
        self.device == cmd.device && self.index == cmd.index && self.action == cmd.action
    }
}

impl fmt::Display for Ack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.device.ack_name(),
            self.index,
            self.action.ack()
        )?;
        if !self.success {
            f.write_str(" 0")?;
        }
        Ok(())
    }
}

/// Output of the escape encoding. Values are kept as integers because the
/// escaped range does not fit in a byte.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncodedPayload(Vec<u16>);

impl EncodedPayload {
    /// Wraps raw values without checking them; `decode_stream` validates.
    pub fn from_values(values: Vec<u16>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Comma-separated decimal integers, no spaces.
impl fmt::Display for EncodedPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for EncodedPayload {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Ok(Self::default());
        }
        s.split(',')
            .enumerate()
            .map(|(position, field)| {
                if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(CodecError::MalformedPayload {
                        position,
                        reason: format!("not a decimal integer: {field:?}"),
                    });
                }
                field
                    .parse::<u16>()
                    .map_err(|_| CodecError::MalformedPayload {
                        position,
                        reason: format!("value out of range: {field}"),
                    })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

const DEVICE_PHRASES: [(&str, DeviceKind); 3] = [
    ("main switch", DeviceKind::Supply),
    ("light", DeviceKind::Light),
    ("fan", DeviceKind::Fan),
];

/// Parses `<device phrase> <on|off> [index]`, ignoring case and runs of
/// whitespace.
pub fn parse_utterance(text: &str) -> Result<VoiceCommand, CodecError> {
    let unrecognized = || CodecError::UnrecognizedUtterance(text.to_string());
    let normalized = text
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");

    let (device, rest) = DEVICE_PHRASES
        .iter()
        .find_map(|(phrase, kind)| {
            normalized
                .strip_prefix(phrase)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|rest| (*kind, rest))
        })
        .ok_or_else(unrecognized)?;

    let mut tokens = rest.split(' ');
    let action = match tokens.next() {
        Some("on") => SwitchAction::On,
        Some("off") => SwitchAction::Off,
        _ => return Err(unrecognized()),
    };
    let index = match tokens.next() {
        None => NonZeroU32::MIN,
        Some(tok) => parse_index(tok).ok_or_else(unrecognized)?,
    };
    if tokens.next().is_some() {
        return Err(unrecognized());
    }
    Ok(VoiceCommand {
        device,
        action,
        index,
    })
}

pub fn render_wire(cmd: &VoiceCommand) -> WireCommand {
    WireCommand(format!(
        "{}{}{}E",
        cmd.device.wire_letter(),
        cmd.action.wire(),
        cmd.index
    ))
}

/// Inverse of [`render_wire`]. Surrounding whitespace is ignored.
pub fn parse_wire(text: &str) -> Result<VoiceCommand, CodecError> {
    let malformed = |reason| CodecError::MalformedWire {
        text: text.to_string(),
        reason,
    };
    let s = text.trim();
    let mut chars = s.chars();
    let device = chars
        .next()
        .and_then(DeviceKind::from_wire_letter)
        .ok_or_else(|| malformed("unknown device letter"))?;
    let rest = chars.as_str();
    let (action, rest) = if let Some(rest) = rest.strip_prefix("OFF") {
        (SwitchAction::Off, rest)
    } else if let Some(rest) = rest.strip_prefix("ON") {
        (SwitchAction::On, rest)
    } else {
        return Err(malformed("expected ON or OFF"));
    };
    let digits = rest
        .strip_suffix('E')
        .ok_or_else(|| malformed("missing E terminator"))?;
    let index = parse_index(digits).ok_or_else(|| malformed("bad device index"))?;
    Ok(VoiceCommand {
        device,
        action,
        index,
    })
}

pub fn render_ack(ack: &Ack) -> String {
    ack.to_string()
}

/// Inverse of [`render_ack`]. Surrounding whitespace is ignored; fields must
/// be separated by single spaces.
pub fn parse_ack(text: &str) -> Result<Ack, CodecError> {
    let malformed = |reason| CodecError::MalformedAck {
        text: text.to_string(),
        reason,
    };
    let fields: Vec<&str> = text.trim().split(' ').collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(malformed("expected 3 or 4 fields"));
    }
    let device =
        DeviceKind::from_ack_name(fields[0]).ok_or_else(|| malformed("unknown device name"))?;
    let index = parse_index(fields[1]).ok_or_else(|| malformed("bad device index"))?;
    let action = match fields[2] {
        "on" => SwitchAction::On,
        "off" => SwitchAction::Off,
        _ => return Err(malformed("expected on or off")),
    };
    let success = match fields.get(3) {
        None => true,
        Some(&"0") => false,
        Some(_) => return Err(malformed("trailing field must be 0")),
    };
    Ok(Ack {
        device,
        index,
        action,
        success,
    })
}

/// Escapes control-range bytes by adding 255. Byte 255 itself is rejected,
/// since it would collide with the escaped form of 0.
pub fn encode_stream(input: &[u8]) -> Result<EncodedPayload, CodecError> {
    input
        .iter()
        .enumerate()
        .map(|(position, &b)| match b {
            0..=CONTROL_MAX => Ok(u16::from(b) + ESCAPE_OFFSET),
            255 => Err(CodecError::UnencodableByte { position }),
            _ => Ok(u16::from(b)),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(EncodedPayload)
}

pub fn decode_stream(payload: &EncodedPayload) -> Result<Vec<u8>, CodecError> {
    payload
        .0
        .iter()
        .enumerate()
        .map(|(position, &v)| match v {
            0..=31 => Err(CodecError::MalformedPayload {
                position,
                reason: format!("unescaped control value {v}"),
            }),
            32..=254 => Ok(v as u8),
            255..=PAYLOAD_MAX => Ok((v - ESCAPE_OFFSET) as u8),
            _ => Err(CodecError::MalformedPayload {
                position,
                reason: format!("value {v} above {PAYLOAD_MAX}"),
            }),
        })
        .collect()
}

/// Decimal digits, no sign, no leading zero, fits in `u32`, non-zero.
fn parse_index(s: &str) -> Option<NonZeroU32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || s.starts_with('0') {
        return None;
    }
    s.parse::<NonZeroU32>().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmd(device: DeviceKind, action: SwitchAction, index: u32) -> VoiceCommand {
        VoiceCommand::new(device, action, index).unwrap()
    }

    #[test]
    fn utterances() {
        assert_eq!(
            parse_utterance("Light On").unwrap(),
            cmd(DeviceKind::Light, SwitchAction::On, 1)
        );
        assert_eq!(
            parse_utterance("main switch off").unwrap(),
            cmd(DeviceKind::Supply, SwitchAction::Off, 1)
        );
        assert_eq!(
            parse_utterance("  MAIN   Switch\tON  3 ").unwrap(),
            cmd(DeviceKind::Supply, SwitchAction::On, 3)
        );
        for bad in [
            "toaster on",
            "",
            "light",
            "light dim",
            "light on 0",
            "light on 1 2",
            "lights on",
            "fan on -1",
        ] {
            assert!(
                matches!(
                    parse_utterance(bad),
                    Err(CodecError::UnrecognizedUtterance(_))
                ),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn wire_rendering() {
        assert_eq!(
            render_wire(&cmd(DeviceKind::Supply, SwitchAction::On, 1)).as_str(),
            "SON1E"
        );
        assert_eq!(
            render_wire(&cmd(DeviceKind::Fan, SwitchAction::Off, 1)).as_str(),
            "FOFF1E"
        );
        assert_eq!(
            render_wire(&cmd(DeviceKind::Light, SwitchAction::On, 12)).as_str(),
            "LON12E"
        );
    }

    #[test]
    fn wire_parsing() {
        assert_eq!(
            parse_wire("LOFF1E").unwrap(),
            cmd(DeviceKind::Light, SwitchAction::Off, 1)
        );
        assert_eq!(
            parse_wire("SON1E").unwrap(),
            cmd(DeviceKind::Supply, SwitchAction::On, 1)
        );
        assert_eq!(
            parse_wire("SOFF1E ").unwrap(),
            cmd(DeviceKind::Supply, SwitchAction::Off, 1)
        );
        for bad in [
            "XON1E", "LON1", "LON1EE", "LON01E", "LON0E", "LOX1E", "LONE", "lon1e", "L ON1E",
            "S#N1E", "", "LON1E x",
        ] {
            assert!(
                matches!(parse_wire(bad), Err(CodecError::MalformedWire { .. })),
                "{bad:?}"
            );
        }
        assert!(parse_wire("LON99999999999E").is_err());
    }

    #[test]
    fn acks() {
        let light_on = Ack::for_command(&cmd(DeviceKind::Light, SwitchAction::On, 1), true);
        assert_eq!(render_ack(&light_on), "LIGHT 1 on");
        let fan_off_fail = Ack::for_command(&cmd(DeviceKind::Fan, SwitchAction::Off, 1), false);
        assert_eq!(render_ack(&fan_off_fail), "FAN 1 off 0");
        let supply2 = Ack::for_command(&cmd(DeviceKind::Supply, SwitchAction::Off, 2), true);
        assert_eq!(render_ack(&supply2), "SUPPLY 2 off");

        assert_eq!(
            parse_ack("SUPPLY 1 off").unwrap(),
            Ack::for_command(&cmd(DeviceKind::Supply, SwitchAction::Off, 1), true)
        );
        assert_eq!(
            parse_ack("LIGHT 1 on 0").unwrap(),
            Ack::for_command(&cmd(DeviceKind::Light, SwitchAction::On, 1), false)
        );
        for bad in [
            "LIGHT one on",
            "LIGHT 1 ON",
            "LIGHT 1 on 1",
            "LIGHT  1 on",
            "LAMP 1 on",
            "LIGHT 1",
            "LIGHT 1 on 0 0",
            "LIGHT 01 on",
        ] {
            assert!(
                matches!(parse_ack(bad), Err(CodecError::MalformedAck { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn escape_encoding() {
        assert_eq!(
            encode_stream(b"LON1E").unwrap().values(),
            &[76, 79, 78, 49, 69]
        );
        assert!(encode_stream(&[]).unwrap().is_empty());
        assert_eq!(
            encode_stream(&[0, 10, 31, 32]).unwrap().values(),
            &[255, 265, 286, 32]
        );
        assert_eq!(
            encode_stream(&[1, 255]),
            Err(CodecError::UnencodableByte { position: 1 })
        );

        let p = EncodedPayload::from_values(vec![255, 265, 286, 32]);
        assert_eq!(decode_stream(&p).unwrap(), vec![0, 10, 31, 32]);
        assert!(decode_stream(&EncodedPayload::default())
            .unwrap()
            .is_empty());
        for bad in [287, 31, 0, 1000] {
            assert!(matches!(
                decode_stream(&EncodedPayload::from_values(vec![bad])),
                Err(CodecError::MalformedPayload { position: 0, .. })
            ));
        }
    }

    #[test]
    fn payload_text() {
        let p = encode_stream(b"LON1E").unwrap();
        assert_eq!(p.to_string(), "76,79,78,49,69");
        assert_eq!("76,79,78,49,69".parse::<EncodedPayload>().unwrap(), p);
        assert_eq!(
            "".parse::<EncodedPayload>().unwrap(),
            EncodedPayload::default()
        );
        for bad in ["76,,69", "76, 79", "a", "-1", "70000", "76,"] {
            assert!(bad.parse::<EncodedPayload>().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn device_kind_names() {
        assert_eq!("light".parse::<DeviceKind>().unwrap(), DeviceKind::Light);
        assert_eq!("SUPPLY".parse::<DeviceKind>().unwrap(), DeviceKind::Supply);
        assert!("tv".parse::<DeviceKind>().is_err());
    }
}
