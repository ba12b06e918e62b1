//! `homelink`: run the service, fire one-shot commands, run scripted
//! scenarios, fuzz the codec and replay logs.
//!
//! Machine-readable results go to stdout as one JSON line; diagnostics go to
//! stderr. Exit codes: 0 success, 1 error, 2 unrecognized utterance,
//! 3 command timed out or was acknowledged as failed, 4 replay divergence.

use std::net::SocketAddr;
use std::num::NonZeroU32;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use homelink_core::codec::parse_utterance;
use homelink_core::record::export_log;
use homelink_core::replay::{replay_file, ReplayError};
use homelink_core::{
    fuzz, CodecError, CommandTicket, DeviceKind, FailureMode, HomeSnapshot, InputError, RunMode,
    Scenario, SimTime, Simulation, SmsChannelConfig, TicketState,
};
use homelink_service::ServiceOptions;
use serde::Serialize;
use serde_json::json;

const EXIT_UTTERANCE: u8 = 2;
const EXIT_COMMAND_FAILED: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

/// Simulated time after which a batch run gives up waiting for quiet.
const HORIZON_S: f64 = 24.0 * 3600.0;

#[derive(Parser)]
#[command(name = "homelink", version, about = "SMS home automation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API and event stream.
    Serve(ServeArgs),
    /// Send one voice command through a fresh simulation and print the ack.
    Send(SendArgs),
    /// Run a scenario file's script to completion.
    Run(RunArgs),
    /// Run the bundled demo: the six basic commands in sequence.
    Demo(DemoArgs),
    /// Fuzz the codec properties.
    Fuzz(FuzzArgs),
    /// Re-execute a log and check it is regenerated byte for byte.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Text,
}

/// Overrides applied on top of the scenario file (or the defaults).
#[derive(Args, Default)]
struct ScenarioFlags {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// SMS loss probability.
    #[arg(long)]
    loss: Option<f64>,
    /// SMS base delay in seconds.
    #[arg(long)]
    delay: Option<f64>,
    /// SMS delay jitter in seconds (uniform, +/-).
    #[arg(long)]
    jitter: Option<f64>,
    /// SMS duplication probability.
    #[arg(long)]
    dup: Option<f64>,
    /// Extra SMS delay drawn from [0, window] seconds.
    #[arg(long)]
    reorder: Option<f64>,
    /// Device fault as KIND[:INDEX]=MODE, e.g. fan=stuck or light:1=flaky:0.3.
    #[arg(long = "failure", value_name = "DEVICE=MODE")]
    failures: Vec<String>,
    /// Seconds to wait for an ack before resending.
    #[arg(long)]
    timeout: Option<f64>,
    /// Resends after the first attempt.
    #[arg(long)]
    retries: Option<u32>,
}

impl ScenarioFlags {
    /// Loads the scenario file, or starts from `fallback`, then applies the
    /// flags and validates the result.
    fn build(&self, fallback: Scenario) -> anyhow::Result<Scenario> {
        let mut scenario = match &self.scenario {
            Some(path) => {
                Scenario::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            None => fallback,
        };
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        let sms = &mut scenario.sms;
        for (slot, value) in [
            (&mut sms.loss_prob, self.loss),
            (&mut sms.base_delay_s, self.delay),
            (&mut sms.jitter_s, self.jitter),
            (&mut sms.dup_prob, self.dup),
            (&mut sms.reorder_window_s, self.reorder),
        ] {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if let Some(t) = self.timeout {
            scenario.retry.timeout_s = t;
        }
        if let Some(r) = self.retries {
            scenario.retry.max_retries = r;
        }
        for spec in &self.failures {
            let (kind, index, mode) = parse_failure(spec)?;
            let device = scenario
                .devices
                .iter_mut()
                .find(|d| d.kind == kind && d.index == index.get())
                .with_context(|| format!("--failure {spec}: no {kind} {index} in the scenario"))?;
            device.failure = mode;
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

fn parse_failure(spec: &str) -> anyhow::Result<(DeviceKind, NonZeroU32, FailureMode)> {
    let Some((device, mode)) = spec.split_once('=') else {
        bail!("--failure expects DEVICE=MODE, got {spec:?}");
    };
    let (kind, index) = match device.split_once(':') {
        Some((kind, index)) => (kind, index.parse::<NonZeroU32>().context("device index")?),
        None => (device, NonZeroU32::MIN),
    };
    let kind: DeviceKind = kind.parse().map_err(anyhow::Error::msg)?;
    let mode: FailureMode = mode.parse().map_err(anyhow::Error::msg)?;
    Ok((kind, index, mode))
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    scenario: ScenarioFlags,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory for the run's JSON Lines log.
    #[arg(long, default_value = "runs")]
    log_dir: PathBuf,
    /// Do not write a run log.
    #[arg(long)]
    no_log: bool,
    /// Advance the clock only through POST /api/sim/step.
    #[arg(long, conflicts_with = "speed")]
    stepped: bool,
    /// Simulated seconds per wall-clock second.
    #[arg(long)]
    speed: Option<f64>,
}

#[derive(Args)]
struct SendArgs {
    utterance: String,
    #[command(flatten)]
    scenario: ScenarioFlags,
    /// Write the run's log here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioFlags,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Send(args) => send(args),
        Command::Run(args) => {
            let scenario = args.scenario.build(Scenario {
                run_mode: RunMode::Stepped,
                ..Scenario::default()
            });
            scenario.and_then(|s| run_script(s, args.log, args.format))
        }
        Command::Demo(args) => {
            let mut scenario = Scenario::demo();
            if let Some(seed) = args.seed {
                scenario.seed = seed;
            }
            run_script(scenario, args.log, args.format)
        }
        Command::Fuzz(args) => Ok(fuzz_codec(args)),
        Command::Replay(args) => replay(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string(value).expect("serializable output")
    );
}

fn serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let mut scenario = args.scenario.build(Scenario::default())?;
    if args.stepped {
        scenario.run_mode = RunMode::Stepped;
    } else if let Some(speed) = args.speed {
        scenario.run_mode = RunMode::Realtime { speed };
        scenario.validate()?;
    }
    let log_dir = if args.no_log {
        None
    } else {
        std::fs::create_dir_all(&args.log_dir)
            .with_context(|| format!("creating {}", args.log_dir.display()))?;
        Some(args.log_dir)
    };
    let options = ServiceOptions {
        log_dir,
        ..ServiceOptions::default()
    };

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        homelink_service::serve(scenario, options, listener, shutdown).await?;
        anyhow::Ok(ExitCode::SUCCESS)
    })
}

#[derive(Serialize)]
struct SendReport<'a> {
    utterance: &'a str,
    wire: &'a str,
    ack: Option<&'a str>,
    state: TicketState,
    attempts: u32,
    resolved_at: Option<SimTime>,
    devices: HomeSnapshot,
}

fn send(args: SendArgs) -> anyhow::Result<ExitCode> {
    // fail fast, before building anything
    if let Err(e) = parse_utterance(&args.utterance) {
        eprintln!("error: {e}");
        print_json(&json!({"utterance": args.utterance, "error": e.to_string()}));
        return Ok(ExitCode::from(EXIT_UTTERANCE));
    }
    let scenario = args.scenario.build(Scenario {
        sms: SmsChannelConfig::ideal(),
        run_mode: RunMode::Stepped,
        ..Scenario::default()
    })?;
    let mut sim = Simulation::new(scenario)?;
    let id = match sim.submit(&args.utterance) {
        Ok(id) => id,
        Err(InputError::Codec(e @ CodecError::UnrecognizedUtterance(_))) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_UTTERANCE));
        }
        Err(e) => return Err(e.into()),
    };
    sim.run_until_quiet(SimTime::from_secs_f64(HORIZON_S));
    if let Some(path) = &args.log {
        export_log(path, sim.records()).with_context(|| format!("writing {}", path.display()))?;
    }

    let ticket = sim.ticket(id).expect("submitted ticket exists");
    let report = SendReport {
        utterance: &args.utterance,
        wire: ticket.wire.as_str(),
        ack: ticket.ack.as_deref(),
        state: ticket.state,
        attempts: ticket.attempts,
        resolved_at: ticket.resolved_at,
        devices: sim.snapshot(),
    };
    match args.format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!("wire:   {}", report.wire);
            println!("ack:    {}", report.ack.unwrap_or("-"));
            println!(
                "state:  {} after {} attempt(s)",
                state_name(report.state),
                report.attempts
            );
            print_devices(&report.devices);
        }
    }
    Ok(exit_for(ticket.state))
}

fn exit_for(state: TicketState) -> ExitCode {
    if state == TicketState::AckedOk {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_COMMAND_FAILED)
    }
}

fn state_name(state: TicketState) -> String {
    serde_json::to_value(state)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn print_devices(snapshot: &HomeSnapshot) {
    for d in &snapshot.devices {
        println!(
            "{} {}: relay {}, output {}",
            d.kind,
            d.index,
            if d.relay_on { "on" } else { "off" },
            if d.effective_output { "on" } else { "off" }
        );
    }
}

#[derive(Serialize)]
struct TicketLine<'a> {
    ticket: u64,
    utterance: &'a str,
    wire: &'a str,
    state: TicketState,
    attempts: u32,
    ack: Option<&'a str>,
}

impl<'a> From<&'a CommandTicket> for TicketLine<'a> {
    fn from(t: &'a CommandTicket) -> Self {
        Self {
            ticket: t.id,
            utterance: &t.utterance,
            wire: t.wire.as_str(),
            state: t.state,
            attempts: t.attempts,
            ack: t.ack.as_deref(),
        }
    }
}

/// Runs the scenario's script until nothing is left to happen. Exits 3 if
/// any command did not end ACKED_OK.
fn run_script(
    scenario: Scenario,
    log: Option<PathBuf>,
    format: Format,
) -> anyhow::Result<ExitCode> {
    let seed = scenario.seed;
    let mut sim = Simulation::new(scenario)?;
    sim.run_until_quiet(SimTime::from_secs_f64(HORIZON_S));
    if let Some(path) = &log {
        export_log(path, sim.records()).with_context(|| format!("writing {}", path.display()))?;
    }
    let tickets: Vec<TicketLine> = sim.tickets().map(TicketLine::from).collect();
    let all_ok = tickets.iter().all(|t| t.state == TicketState::AckedOk);
    match format {
        Format::Json => print_json(&json!({
            "seed": seed,
            "finished_at": sim.now(),
            "records": sim.records().len(),
            "tickets": tickets,
            "devices": sim.snapshot(),
        })),
        Format::Text => {
            for t in &tickets {
                println!(
                    "#{} {:<16} {:<7} {:<11} {}",
                    t.ticket,
                    t.utterance,
                    t.wire,
                    state_name(t.state),
                    t.ack.unwrap_or("-")
                );
            }
            print_devices(&sim.snapshot());
        }
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_COMMAND_FAILED)
    })
}

fn fuzz_codec(args: FuzzArgs) -> ExitCode {
    let report = fuzz::run(args.iterations, args.seed, &fuzz::CodecFns::REAL);
    print_json(&report);
    if let Some(cx) = &report.counterexample {
        eprintln!(
            "counterexample for {:?}: {} (minimized {})",
            cx.property, cx.input, cx.minimized
        );
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn replay(args: ReplayArgs) -> anyhow::Result<ExitCode> {
    let summary = match replay_file(&args.log) {
        Ok(summary) => summary,
        Err(e @ ReplayError::Log(_)) => bail!("{}: {e}", args.log.display()),
        Err(e) => return Err(e.into()),
    };
    print_json(&summary);
    if summary.matched {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "replay diverged at seq {}",
            summary
                .first_divergent_seq
                .map_or("?".into(), |s| s.to_string())
        );
        Ok(ExitCode::from(EXIT_DIVERGED))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use homelink_core::codec::render_wire;

    #[test]
    fn failure_specs() {
        assert_eq!(
            parse_failure("fan=stuck").unwrap(),
            (DeviceKind::Fan, NonZeroU32::MIN, FailureMode::Stuck)
        );
        let (kind, index, mode) = parse_failure("LIGHT:2=flaky:0.25").unwrap();
        assert_eq!(
            (kind, index.get(), mode),
            (DeviceKind::Light, 2, FailureMode::Flaky { p: 0.25 })
        );
        assert!(parse_failure("fan").is_err());
        assert!(parse_failure("fan:0=stuck").is_err());
        assert!(parse_failure("kettle=stuck").is_err());
        assert!(parse_failure("fan=flaky:3").is_err());
    }

    #[test]
    fn flags_override_the_fallback() {
        let flags = ScenarioFlags {
            seed: Some(7),
            loss: Some(1.0),
            retries: Some(0),
            failures: vec!["fan=stuck".into()],
            ..ScenarioFlags::default()
        };
        let s = flags.build(Scenario::default()).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.sms.loss_prob, 1.0);
        assert_eq!(s.retry.max_retries, 0);
        assert_eq!(s.devices[2].failure, FailureMode::Stuck);

        let bad = ScenarioFlags {
            loss: Some(2.0),
            ..ScenarioFlags::default()
        };
        assert!(bad.build(Scenario::default()).is_err());
    }

    #[test]
    fn wire_helper_matches_codec() {
        let cmd = parse_utterance("Light On").unwrap();
        assert_eq!(render_wire(&cmd).as_str(), "LON1E");
    }
}
