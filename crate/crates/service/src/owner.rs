//! The task that owns the simulation. Everything else talks to it through the
//! intake queue, one request at a time.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::num::NonZeroU32;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use homelink_core::record::to_jsonl;
use homelink_core::{
    CommandTicket, DeviceKind, FailureMode, HomeSnapshot, InputError, RunMode, SimTime, Simulation,
    SmsChannelConfig, TicketId,
};
use serde::Serialize;
use tokio::sync::{mpsc, oneshot};

use crate::hub::StreamHub;

pub type Reply<T> = oneshot::Sender<T>;

pub enum Request {
    Command {
        utterance: String,
        reply: Reply<Result<TicketId, InputError>>,
    },
    Ticket {
        id: TicketId,
        reply: Reply<Option<CommandTicket>>,
    },
    Tickets {
        reply: Reply<Vec<CommandTicket>>,
    },
    Devices {
        reply: Reply<HomeSnapshot>,
    },
    SetFailure {
        kind: DeviceKind,
        index: NonZeroU32,
        mode: FailureMode,
        reply: Reply<Result<HomeSnapshot, InputError>>,
    },
    Channel {
        reply: Reply<SmsChannelConfig>,
    },
    SetChannel {
        config: SmsChannelConfig,
        reply: Reply<Result<SmsChannelConfig, InputError>>,
    },
    Step {
        seconds: f64,
        reply: Reply<Result<Status, StepError>>,
    },
    Status {
        reply: Reply<Status>,
    },
    Log {
        reply: Reply<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Status {
    pub now: SimTime,
    pub seed: u64,
    pub run_mode: RunMode,
    pub phase: homelink_core::ControllerPhase,
    pub pending_events: usize,
    pub records: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("stepping is only available in stepped mode")]
    NotStepped,
    #[error("seconds must be a finite number >= 0, got {0}")]
    BadDuration(f64),
}

pub struct Owner {
    sim: Simulation,
    hub: Arc<StreamHub>,
    published: usize,
    log_file: Option<BufWriter<File>>,
}

impl Owner {
    pub fn new(
        sim: Simulation,
        hub: Arc<StreamHub>,
        log_path: Option<PathBuf>,
    ) -> std::io::Result<Self> {
        let log_file = log_path.map(File::create).transpose()?.map(BufWriter::new);
        let mut owner = Self {
            sim,
            hub,
            published: 0,
            log_file,
        };
        owner.publish();
        Ok(owner)
    }

    fn status(&self) -> Status {
        Status {
            now: self.sim.now(),
            seed: self.sim.scenario().seed,
            run_mode: self.sim.scenario().run_mode,
            phase: self.sim.controller().phase(),
            pending_events: self.sim.pending_events(),
            records: self.sim.records().len(),
        }
    }

    /// Pushes records produced since the last call to subscribers and the log
    /// file.
    fn publish(&mut self) {
        let fresh = &self.sim.records()[self.published..];
        if fresh.is_empty() {
            return;
        }
        self.hub.publish(fresh);
        if let Some(out) = self.log_file.as_mut() {
            let written = out
                .write_all(to_jsonl(fresh).as_bytes())
                .and_then(|_| out.flush());
            if let Err(e) = written {
                tracing::error!("cannot append to run log: {e}");
            }
        }
        self.published = self.sim.records().len();
    }

    fn handle(&mut self, req: Request) {
        match req {
            Request::Command { utterance, reply } => {
                let _ = reply.send(self.sim.submit(&utterance));
            }
            Request::Ticket { id, reply } => {
                let _ = reply.send(self.sim.ticket(id).cloned());
            }
            Request::Tickets { reply } => {
                let _ = reply.send(self.sim.tickets().cloned().collect());
            }
            Request::Devices { reply } => {
                let _ = reply.send(self.sim.snapshot());
            }
            Request::SetFailure {
                kind,
                index,
                mode,
                reply,
            } => {
                let result = self
                    .sim
                    .set_failure(kind, index, mode)
                    .map(|_| self.sim.snapshot());
                let _ = reply.send(result);
            }
            Request::Channel { reply } => {
                let _ = reply.send(self.sim.channel().clone());
            }
            Request::SetChannel { config, reply } => {
                let result = self
                    .sim
                    .set_channel(config)
                    .map(|_| self.sim.channel().clone());
                let _ = reply.send(result);
            }
            Request::Step { seconds, reply } => {
                let result = if !matches!(self.sim.scenario().run_mode, RunMode::Stepped) {
                    Err(StepError::NotStepped)
                } else if !(seconds.is_finite() && seconds >= 0.0) {
                    Err(StepError::BadDuration(seconds))
                } else {
                    self.sim.step_by(SimTime::from_secs_f64(seconds));
                    Ok(self.status())
                };
                let _ = reply.send(result);
            }
            Request::Status { reply } => {
                let _ = reply.send(self.status());
            }
            Request::Log { reply } => {
                let _ = reply.send(to_jsonl(self.sim.records()));
            }
        }
        self.publish();
    }

    /// Serves requests until every sender is dropped. In realtime mode the
    /// clock also follows wall time, checked every `tick`.
    pub async fn run(mut self, mut intake: mpsc::Receiver<Request>, tick: Duration) {
        let speed = match self.sim.scenario().run_mode {
            RunMode::Realtime { speed } => Some(speed),
            RunMode::Stepped => None,
        };
        let Some(speed) = speed else {
            while let Some(req) = intake.recv().await {
                self.handle(req);
            }
            return;
        };

        let started = Instant::now();
        let sim_start = self.sim.now();
        let mut ticker = tokio::time::interval(tick);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                req = intake.recv() => match req {
                    Some(req) => self.handle(req),
                    None => return,
                },
                _ = ticker.tick() => {
                    let target = sim_start + SimTime::from_secs_f64(started.elapsed().as_secs_f64() * speed);
                    self.sim.step_until(target);
                    self.publish();
                }
            }
        }
    }
}
