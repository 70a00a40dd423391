//! The work behind each `cmab` subcommand.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context};
use tokio::net::TcpListener;

use cmab_core::engine::{ManualClock, SystemClock};
use cmab_core::persistence::{self, read_log, verify_data_dir, DataDir, Snapshot, VerifyReport};
use cmab_core::simulator::{generate_population, simulate_with, striped_prototypes, SimSummary};
use cmab_core::{load_inventory, Engine, EngineConfig, Inventory};

use crate::api::{self, SharedEngine};

pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub data: PathBuf,
    /// How often open sessions are checked against the timeout.
    pub expiry_interval: Duration,
}

/// Refuse to append to a log that was written under another configuration.
fn prepare_data_dir(data: &Path, inventory: &Inventory, config: &EngineConfig) -> anyhow::Result<()> {
    let dir = DataDir::create(data)?;
    let rendered = inventory.to_yaml(config);
    let has_events = fs::metadata(dir.events_path()).map(|m| m.len() > 0).unwrap_or(false);
    if has_events {
        if let Ok(existing) = fs::read_to_string(dir.config_path()) {
            if existing != rendered {
                bail!(
                    "{} holds events written under a different configuration; see {}",
                    data.display(),
                    dir.config_path().display()
                );
            }
        }
    }
    fs::write(dir.config_path(), rendered)?;
    Ok(())
}

pub async fn serve(inventory: Inventory, config: EngineConfig, opts: ServeOptions) -> anyhow::Result<()> {
    prepare_data_dir(&opts.data, &inventory, &config)?;
    let engine = Engine::open(&opts.data, inventory, config, Arc::new(SystemClock), true)
        .with_context(|| format!("recovering state from {}", opts.data.display()))?;
    tracing::info!(last_seq = engine.state().last_seq, users = engine.state().users.len(), "state recovered");
    let shared: SharedEngine = Arc::new(Mutex::new(engine));

    let listener = TcpListener::bind((opts.host.as_str(), opts.port))
        .await
        .with_context(|| format!("binding {}:{}", opts.host, opts.port))?;
    let addr: SocketAddr = listener.local_addr()?;
    // Scripts read this line to find an ephemeral port.
    println!("listening on http://{addr}");

    let expiry = tokio::spawn(expire_loop(shared.clone(), opts.expiry_interval));
    axum::serve(listener, api::router(shared.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    expiry.abort();

    let mut engine = shared.lock().unwrap_or_else(|p| p.into_inner());
    let path = engine.write_snapshot(&opts.data)?;
    tracing::info!(snapshot = %path.display(), "shut down");
    Ok(())
}

async fn expire_loop(engine: SharedEngine, every: Duration) {
    let mut ticker = tokio::time::interval(every);
    loop {
        ticker.tick().await;
        let expired = engine.lock().unwrap_or_else(|p| p.into_inner()).expire_stale();
        match expired {
            Ok(done) if !done.is_empty() => tracing::info!(count = done.len(), "expired stale sessions"),
            Ok(_) => {}
            Err(e) => tracing::error!("session expiry failed: {e}"),
        }
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutdown requested");
}

pub struct SimulateOptions {
    pub users: usize,
    pub prototypes: usize,
    pub sessions: usize,
    pub seed: u64,
    pub clustering: bool,
    pub sigma: f64,
    pub missing: f64,
    pub jitter: f64,
    pub high: f64,
    pub low: f64,
    pub window: usize,
    pub out: PathBuf,
}

impl SimulateOptions {
    pub fn validate(&self) -> Result<(), String> {
        if self.users == 0 || self.prototypes == 0 || self.sessions == 0 {
            return Err("--users, --prototypes and --sessions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.missing) {
            return Err("--missing must be a probability".into());
        }
        if !(self.sigma >= 0.0 && self.jitter >= 0.0 && self.sigma.is_finite() && self.jitter.is_finite()) {
            return Err("--sigma and --jitter must be finite and non-negative".into());
        }
        if !(self.high.is_finite() && self.low.is_finite()) {
            return Err("--high and --low must be finite".into());
        }
        if self.window == 0 {
            return Err("--window must be positive".into());
        }
        Ok(())
    }
}

/// Run a simulation against an engine logging into `opts.out`, then write
/// the report, a mid-run snapshot and a final snapshot next to the log.
pub fn simulate(inventory: Inventory, mut config: EngineConfig, opts: &SimulateOptions) -> anyhow::Result<SimSummary> {
    if let Err(msg) = opts.validate() {
        bail!(msg);
    }
    let dir = DataDir::create(&opts.out)?;
    if fs::metadata(dir.events_path()).is_ok() || !dir.snapshots()?.is_empty() {
        bail!("{} already holds an event log; choose an empty output directory", opts.out.display());
    }
    config.clustering_enabled = opts.clustering;
    dir.write_config(&inventory, &config)?;

    let protos = striped_prototypes(&inventory, opts.prototypes, opts.high, opts.low);
    let population = generate_population(opts.users, &protos, opts.sigma, opts.missing, opts.jitter, opts.seed);
    let clock = Arc::new(ManualClock::new(0));
    let mut engine = Engine::open(&opts.out, inventory, config, clock.clone(), false)?;
    let midpoint = opts.sessions / 2;
    let report = simulate_with(&population, &mut engine, opts.sessions, opts.seed, Some(&clock), |round, e| {
        if round + 1 == midpoint {
            e.write_snapshot(&opts.out)?;
        }
        Ok(())
    })?;
    engine.write_snapshot(&opts.out)?;
    report.write_files(&opts.out, opts.window)?;
    Ok(report.summary(opts.window))
}

pub enum ReplayOutcome {
    Replayed { events: usize, last_seq: u64, users: usize },
    Verified(VerifyReport),
}

pub fn replay(data: &Path, verify: bool) -> anyhow::Result<ReplayOutcome> {
    let dir = DataDir::existing(data);
    if verify {
        return Ok(ReplayOutcome::Verified(verify_data_dir(data)?));
    }
    let (inventory, config) = load_inventory(dir.config_path())?;
    let records = read_log(dir.events_path())?;
    let state = persistence::replay(&inventory, &config, dir.latest_snapshot()?, &records)?;
    let snapshot = Snapshot::new(&inventory, &config, state);
    Ok(ReplayOutcome::Replayed {
        events: records.len(),
        last_seq: snapshot.as_of_seq(),
        users: snapshot.state.users.len(),
    })
}
