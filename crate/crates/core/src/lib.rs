//! Contextual multi-armed bandit engine for recommending just-in-time
//! interventions.
//!
//! * [`inventory`]: the YAML intervention catalog and engine settings.
//! * [`bandit`]: per-arm statistics and UCB1 ranking.
//! * [`clustering`]: preference vectors, k-means and cluster tables.
//! * [`engine`]: one session at a time: cold start from population
//!   statistics, then personal, then cluster-based ranking.
//! * [`persistence`]: event log, snapshots and replay.
//! * [`simulator`]: synthetic users for regret and cluster-recovery runs.

pub mod bandit;
pub mod clustering;
pub mod engine;
pub mod inventory;
pub mod persistence;
pub mod simulator;

pub use bandit::{ucb_score, ArmStats, BanditError, Rating, ScoreTable};
pub use engine::{Engine, EngineError, RecommendationSet, SessionSummary};
pub use inventory::{load_inventory, parse_inventory, EngineConfig, Intervention, Inventory, InventoryError};
pub use persistence::{Scope, SessionEvent};
