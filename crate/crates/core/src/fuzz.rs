//! Seeded property fuzzer for the codec.
//!
//! Each iteration draws one case for each property. The first failure stops
//! the run and is shrunk greedily before being reported. The functions under
//! test are passed in as a [`CodecFns`] table so the fuzzer can be pointed at
//! a deliberately broken implementation to prove it catches bugs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{
    self, Ack, CodecError, DeviceKind, EncodedPayload, SwitchAction, VoiceCommand, WireCommand,
};

#[derive(Clone, Copy)]
pub struct CodecFns {
    pub render_wire: fn(&VoiceCommand) -> WireCommand,
    pub parse_wire: fn(&str) -> Result<VoiceCommand, CodecError>,
    pub render_ack: fn(&Ack) -> String,
    pub parse_ack: fn(&str) -> Result<Ack, CodecError>,
    pub encode: fn(&[u8]) -> Result<EncodedPayload, CodecError>,
    pub decode: fn(&EncodedPayload) -> Result<Vec<u8>, CodecError>,
}

impl CodecFns {
    pub const REAL: CodecFns = CodecFns {
        render_wire: codec::render_wire,
        parse_wire: codec::parse_wire,
        render_ack: codec::render_ack,
        parse_ack: codec::parse_ack,
        encode: codec::encode_stream,
        decode: codec::decode_stream,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    WireRoundTrip,
    AckRoundTrip,
    StreamBijection,
    RejectByte255,
    WireFixpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub property: Property,
    pub iteration: u64,
    pub input: String,
    pub minimized: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub iterations: u64,
    pub cases: u64,
    pub failures: u64,
    pub counterexample: Option<Counterexample>,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Characters the fixpoint property draws from: the grammar alphabet plus a
/// few near misses.
const WIRE_ALPHABET: &[u8] = b"SLFONE0123456789 XoE#";

pub fn run(iterations: u64, seed: u64, fns: &CodecFns) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for iteration in 0..iterations {
        if let Some(cx) = one_iteration(&mut rng, iteration, fns, &mut cases) {
            return FuzzReport {
                seed,
                iterations: iteration + 1,
                cases,
                failures: 1,
                counterexample: Some(cx),
            };
        }
    }
    FuzzReport {
        seed,
        iterations,
        cases,
        failures: 0,
        counterexample: None,
    }
}

/// Every case generated by `run`, in order, rendered as text.
pub fn case_sequence(iterations: u64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..iterations {
        out.push(format!("{:?}", random_command(&mut rng)));
        out.push(format!("{:?}", random_ack(&mut rng)));
        out.push(format!("{:?}", random_bytes(&mut rng)));
        out.push(format!("{:?}", with_255(&mut rng)));
        out.push(format!("{:?}", random_wireish(&mut rng)));
    }
    out
}

fn one_iteration(
    rng: &mut ChaCha8Rng,
    iteration: u64,
    fns: &CodecFns,
    cases: &mut u64,
) -> Option<Counterexample> {
    let fail = |property, input: String, minimized: String| {
        Some(Counterexample {
            property,
            iteration,
            input,
            minimized,
        })
    };

    let cmd = random_command(rng);
    *cases += 1;
    if !wire_round_trips(fns, &cmd) {
        let small = VoiceCommand {
            index: std::num::NonZeroU32::MIN,
            ..cmd
        };
        let minimized = if wire_round_trips(fns, &small) {
            cmd
        } else {
            small
        };
        return fail(
            Property::WireRoundTrip,
            format!("{cmd:?}"),
            format!("{minimized:?}"),
        );
    }

    let ack = random_ack(rng);
    *cases += 1;
    if !ack_round_trips(fns, &ack) {
        let small = Ack {
            index: std::num::NonZeroU32::MIN,
            ..ack
        };
        let minimized = if ack_round_trips(fns, &small) {
            ack
        } else {
            small
        };
        return fail(
            Property::AckRoundTrip,
            format!("{ack:?}"),
            format!("{minimized:?}"),
        );
    }

    let bytes = random_bytes(rng);
    *cases += 1;
    if !stream_bijective(fns, &bytes) {
        let minimized = shrink_bytes(bytes.clone(), |b| !stream_bijective(fns, b));
        return fail(
            Property::StreamBijection,
            format!("{bytes:?}"),
            format!("{minimized:?}"),
        );
    }

    let bytes = with_255(rng);
    *cases += 1;
    if !rejects_255(fns, &bytes) {
        let minimized = shrink_bytes(bytes.clone(), |b| b.contains(&255) && !rejects_255(fns, b));
        return fail(
            Property::RejectByte255,
            format!("{bytes:?}"),
            format!("{minimized:?}"),
        );
    }

    let text = random_wireish(rng);
    *cases += 1;
    if !wire_fixpoint(fns, &text) {
        let minimized = shrink_bytes(text.clone().into_bytes(), |b| {
            std::str::from_utf8(b).is_ok_and(|s| !wire_fixpoint(fns, s))
        });
        return fail(
            Property::WireFixpoint,
            format!("{text:?}"),
            format!("{:?}", String::from_utf8_lossy(&minimized)),
        );
    }
    None
}

fn wire_round_trips(fns: &CodecFns, cmd: &VoiceCommand) -> bool {
    (fns.parse_wire)((fns.render_wire)(cmd).as_str()).as_ref() == Ok(cmd)
}

fn ack_round_trips(fns: &CodecFns, ack: &Ack) -> bool {
    (fns.parse_ack)(&(fns.render_ack)(ack)).as_ref() == Ok(ack)
}

fn stream_bijective(fns: &CodecFns, bytes: &[u8]) -> bool {
    match (fns.encode)(bytes) {
        Ok(payload) => {
            payload.len() == bytes.len()
                && payload
                    .values()
                    .iter()
                    .all(|&v| (32..=codec::PAYLOAD_MAX).contains(&v))
                && (fns.decode)(&payload).as_deref() == Ok(bytes)
        }
        Err(_) => false,
    }
}

fn rejects_255(fns: &CodecFns, bytes: &[u8]) -> bool {
    matches!((fns.encode)(bytes), Err(CodecError::UnencodableByte { .. }))
}

/// `parse_wire` either rejects the text or accepts exactly what
/// `render_wire` would produce for the result.
fn wire_fixpoint(fns: &CodecFns, text: &str) -> bool {
    match (fns.parse_wire)(text) {
        Ok(cmd) => (fns.render_wire)(&cmd).as_str() == text.trim(),
        Err(_) => true,
    }
}

/// Greedy shrink: drop elements, then lower values, while `still_fails`.
fn shrink_bytes(mut input: Vec<u8>, still_fails: impl Fn(&[u8]) -> bool) -> Vec<u8> {
    let mut i = 0;
    while i < input.len() {
        let mut candidate = input.clone();
        candidate.remove(i);
        if still_fails(&candidate) {
            input = candidate;
        } else {
            i += 1;
        }
    }
    for i in 0..input.len() {
        for smaller in [0, 32, input[i] / 2] {
            if smaller < input[i] {
                let mut candidate = input.clone();
                candidate[i] = smaller;
                if still_fails(&candidate) {
                    input = candidate;
                    break;
                }
            }
        }
    }
    input
}

fn random_command(rng: &mut ChaCha8Rng) -> VoiceCommand {
    let device = DeviceKind::ALL[rng.random_range(0..3)];
    let action = if rng.random::<bool>() {
        SwitchAction::On
    } else {
        SwitchAction::Off
    };
    VoiceCommand::new(device, action, rng.random_range(1..=9999)).expect("non-zero index")
}

fn random_ack(rng: &mut ChaCha8Rng) -> Ack {
    let cmd = random_command(rng);
    Ack::for_command(&cmd, rng.random::<bool>())
}

fn random_bytes(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.random_range(0..=32);
    (0..len).map(|_| rng.random_range(0..=254u8)).collect()
}

fn with_255(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut bytes = random_bytes(rng);
    let at = rng.random_range(0..=bytes.len());
    bytes.insert(at, 255);
    bytes
}

fn random_wireish(rng: &mut ChaCha8Rng) -> String {
    // half the cases start from a valid command and get mutated
    if rng.random::<bool>() {
        let mut bytes = codec::render_wire(&random_command(rng)).as_bytes().to_vec();
        let at = rng.random_range(0..bytes.len());
        bytes[at] = WIRE_ALPHABET[rng.random_range(0..WIRE_ALPHABET.len())];
        String::from_utf8(bytes).expect("ASCII alphabet")
    } else {
        let len = rng.random_range(0..=10);
        (0..len)
            .map(|_| WIRE_ALPHABET[rng.random_range(0..WIRE_ALPHABET.len())] as char)
            .collect()
    }
}
