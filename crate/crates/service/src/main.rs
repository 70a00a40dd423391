use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use cmab_core::{load_inventory, EngineConfig, Inventory};
use cmab_service::commands::{self, ReplayOutcome, ServeOptions, SimulateOptions};

#[derive(Parser)]
#[command(name = "cmab", version, about = "Contextual bandit recommendation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API, recovering state from the data directory.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Seconds between checks for timed-out sessions.
        #[arg(long, default_value_t = 30)]
        expiry_interval: u64,
    },
    /// Run synthetic users against a fresh engine and write a report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        users: usize,
        #[arg(long)]
        prototypes: usize,
        /// Sessions per user.
        #[arg(long)]
        sessions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        clustering: Toggle,
        #[arg(long)]
        out: PathBuf,
        /// Rating noise standard deviation.
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// Probability that a session ends without a rating.
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        /// Per-user perturbation of the prototype means.
        #[arg(long, default_value_t = cmab_core::simulator::DEFAULT_JITTER)]
        jitter: f64,
        /// Latent mean of each prototype's favoured interventions.
        #[arg(long, default_value_t = 4.5)]
        high: f64,
        /// Latent mean of every other intervention.
        #[arg(long, default_value_t = 1.0)]
        low: f64,
        /// Window length for best-arm rates in summary.json.
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
    /// Rebuild state from a data directory.
    Replay {
        #[arg(long)]
        data: PathBuf,
        /// Check every snapshot against a full replay of the log.
        #[arg(long)]
        verify: bool,
    },
}

fn load(path: &PathBuf) -> Result<(Inventory, EngineConfig), ExitCode> {
    load_inventory(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn fail(err: anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Serve { config, port, data, host, expiry_interval } => {
            let (inventory, config) = match load(&config) {
                Ok(x) => x,
                Err(code) => return code,
            };
            let opts = ServeOptions { host, port, data, expiry_interval: Duration::from_secs(expiry_interval.max(1)) };
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(r) => r,
                Err(e) => return fail(e.into()),
            };
            match runtime.block_on(commands::serve(inventory, config, opts)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Simulate {
            config,
            users,
            prototypes,
            sessions,
            seed,
            clustering,
            out,
            sigma,
            missing,
            jitter,
            high,
            low,
            window,
        } => {
            let (inventory, config) = match load(&config) {
                Ok(x) => x,
                Err(code) => return code,
            };
            let opts = SimulateOptions {
                users,
                prototypes,
                sessions,
                seed,
                clustering: clustering == Toggle::On,
                sigma,
                missing,
                jitter,
                high,
                low,
                window,
                out,
            };
            if let Err(msg) = opts.validate() {
                eprintln!("error: {msg}");
                return ExitCode::from(2);
            }
            match commands::simulate(inventory, config, &opts) {
                Ok(summary) => {
                    println!(
                        "{} sessions, total regret {:.3}, best-arm rate {:.3}, refits {}, ARI {}",
                        summary.sessions,
                        summary.total_regret,
                        summary.best_arm_rate,
                        summary.refits,
                        summary.ari.map_or("n/a".to_string(), |a| format!("{a:.3}"))
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Replay { data, verify } => match commands::replay(&data, verify) {
            Ok(ReplayOutcome::Replayed { events, last_seq, users }) => {
                println!("replayed {events} events up to seq {last_seq}; {users} users");
                ExitCode::SUCCESS
            }
            Ok(ReplayOutcome::Verified(report)) => {
                println!(
                    "verified {} events up to seq {}; snapshots {:?} match the full replay",
                    report.events, report.last_seq, report.snapshots_checked
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
