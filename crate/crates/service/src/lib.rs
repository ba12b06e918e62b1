//! HTTP front end for a running simulation.
//!
//! One owner task holds the [`Simulation`]; request handlers talk to it over
//! a bounded queue and get answers back on oneshot channels, so mutations
//! from concurrent clients are applied one at a time. Records flow out
//! through a [`StreamHub`] to server-sent-event subscribers and, optionally,
//! to a JSON Lines file per run.

mod api;
mod hub;
mod owner;

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::Router;
use homelink_core::{Scenario, ScenarioError, Simulation};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};

pub use hub::{StreamHub, Subscription};
pub use owner::Status;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(#[from] ScenarioError),
    #[error("cannot create run log {path}: {source}")]
    RunLog {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Directory for the per-run JSON Lines file; no file when `None`.
    pub log_dir: Option<PathBuf>,
    /// Wall-clock granularity of the realtime clock.
    pub tick: Duration,
    /// Idle gap after which the event stream sends a heartbeat.
    pub heartbeat: Duration,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            log_dir: None,
            tick: Duration::from_millis(50),
            heartbeat: Duration::from_secs(15),
        }
    }
}

/// A started simulation plus the handles the HTTP layer needs.
#[derive(Clone)]
pub struct Service {
    intake: mpsc::Sender<owner::Request>,
    hub: Arc<StreamHub>,
    heartbeat: Duration,
    log_path: Option<PathBuf>,
    /// Flipped to `true` on shutdown so open event streams end.
    closing: Arc<watch::Sender<bool>>,
}

impl Service {
    /// Validates the scenario and spawns the owner task. Must be called from
    /// within a tokio runtime.
    pub fn start(scenario: Scenario, options: ServiceOptions) -> Result<Self, ServiceError> {
        let log_path = options
            .log_dir
            .as_deref()
            .map(|dir| run_log_path(dir, scenario.seed));
        let sim = Simulation::new(scenario)?;
        let hub = StreamHub::new();
        let owner =
            owner::Owner::new(sim, Arc::clone(&hub), log_path.clone()).map_err(|source| {
                ServiceError::RunLog {
                    path: log_path.clone().unwrap_or_default(),
                    source,
                }
            })?;
        let (intake, rx) = mpsc::channel(64);
        tokio::spawn(owner.run(rx, options.tick));
        Ok(Self {
            intake,
            hub,
            heartbeat: options.heartbeat,
            log_path,
            closing: Arc::new(watch::channel(false).0),
        })
    }

    pub fn router(&self) -> Router {
        api::router(self.clone())
    }

    pub fn hub(&self) -> &Arc<StreamHub> {
        &self.hub
    }

    /// Ends every open event stream; new subscribers end immediately too.
    pub fn close_streams(&self) {
        self.closing.send_replace(true);
    }

    /// Where this run's records are being appended, if anywhere.
    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }
}

fn run_log_path(dir: &Path, seed: u64) -> PathBuf {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    dir.join(format!("run-seed{seed}-{started}.jsonl"))
}

/// Starts the simulation and serves the API on `listener` until `shutdown`
/// resolves.
pub async fn serve(
    scenario: Scenario,
    options: ServiceOptions,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let service = Service::start(scenario, options)?;
    if let Some(path) = service.log_path() {
        tracing::info!("writing run log to {}", path.display());
    }
    let closer = service.clone();
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async move {
            shutdown.await;
            closer.close_streams();
        })
        .await?;
    Ok(())
}
