//! Simulated SMS home appliance control.
//!
//! A remote phone turns short spoken phrases ("Light On") into compact wire
//! commands (`LON1E`), escape-encodes them and sends them by SMS. A phone at
//! home forwards each message over a serial link to an appliance controller,
//! which switches the relay, checks it, and answers with an acknowledgement
//! such as `LIGHT 1 on` (or `LIGHT 1 on 0` on failure).
//!
//! Everything runs inside a seeded discrete-event simulation so that runs are
//! reproducible and logs can be replayed byte for byte.

pub mod client;
pub mod codec;
pub mod controller;
pub mod fuzz;
pub mod record;
pub mod replay;
pub mod scenario;
pub mod simnet;
pub mod world;

pub use client::{CommandTicket, RetryPolicy, TicketId, TicketState};
pub use codec::{
    Ack, CodecError, DeviceKind, EncodedPayload, SwitchAction, VoiceCommand, WireCommand,
};
pub use controller::{ControllerError, ControllerPhase, FailureMode, HomeSnapshot};
pub use record::{EventRecord, RecordKind};
pub use scenario::{RunMode, Scenario, ScenarioError};
pub use simnet::{SerialLinkConfig, SimTime, SmsChannelConfig};
pub use world::{Input, InputError, Simulation};
