//! Session orchestration.
//!
//! Every state change is expressed as an [`EventRecord`]: a command
//! validates against the current state, builds the record, appends it to the
//! event log (when one is attached) and only then applies it. Replaying the
//! log through [`EngineState::apply`] therefore reproduces the live state.

mod state;

use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;

pub use state::{ApplyError, EngineState, Metrics, OpenSession, UserProfile};

use crate::bandit::{BanditError, Rating, ScoreTable};
use crate::clustering::{fit_partition, ClusterAlgorithm, KMeans};
use crate::inventory::{EngineConfig, Inventory};
use crate::persistence::{
    self, DataDir, EventKind, EventLog, EventRecord, PersistError, Scope, SessionEvent, Snapshot,
};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to. Used by the simulator and tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start_ms: i64) -> Self {
        Self(AtomicI64::new(start_ms))
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown context {0:?}")]
    UnknownContext(String),
    #[error("user {0:?} already has an open session")]
    SessionAlreadyOpen(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("intervention {0:?} was not offered in this session")]
    ChoiceNotOffered(String),
    #[error("a choice was already made in this session")]
    ChoiceAlreadyMade,
    #[error("no choice has been made in this session yet")]
    NoChoiceYet,
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecommendationSet {
    pub session_id: String,
    pub user_id: String,
    pub context: String,
    pub arms: Vec<String>,
    pub scope_used: Scope,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmMean {
    pub id: String,
    pub mean: Option<f64>,
    pub pulls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub user_id: String,
    pub scope_used: Scope,
    pub choice: Option<String>,
    pub rating: Option<u8>,
    pub imputed: bool,
    pub imputed_reward: Option<f64>,
    /// The user's session count after this session.
    pub session_num: u64,
    /// Personal-table means for the offered arms in this context.
    pub arm_means: Vec<ArmMean>,
    pub refitted: bool,
}

pub struct Engine {
    inventory: Arc<Inventory>,
    config: EngineConfig,
    state: EngineState,
    algorithm: Box<dyn ClusterAlgorithm>,
    clock: Arc<dyn Clock>,
    log: Option<EventLog>,
}

impl Engine {
    /// In-memory engine with no event log.
    pub fn new(inventory: Inventory, config: EngineConfig) -> Self {
        Self::with_clock(inventory, config, Arc::new(SystemClock))
    }

    pub fn with_clock(inventory: Inventory, config: EngineConfig, clock: Arc<dyn Clock>) -> Self {
        let algorithm = Box::new(KMeans { max_iters: config.kmeans_max_iters });
        Self {
            inventory: Arc::new(inventory),
            config,
            state: EngineState::default(),
            algorithm,
            clock,
            log: None,
        }
    }

    /// Recover state from `dir` (latest snapshot plus log tail) and keep
    /// appending to its event log.
    pub fn open(
        dir: impl AsRef<Path>,
        inventory: Inventory,
        config: EngineConfig,
        clock: Arc<dyn Clock>,
        sync: bool,
    ) -> Result<Self, EngineError> {
        let dir = DataDir::create(dir.as_ref())?;
        let (log, records) = EventLog::open(dir.events_path(), sync)?;
        let snapshot = dir.latest_snapshot()?;
        let state = persistence::replay(&inventory, &config, snapshot, &records)?;
        let mut engine = Self::with_clock(inventory, config, clock);
        engine.state = state;
        engine.log = Some(log);
        Ok(engine)
    }

    pub fn set_cluster_algorithm(&mut self, algorithm: Box<dyn ClusterAlgorithm>) {
        self.algorithm = algorithm;
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn user(&self, user_id: &str) -> Option<&UserProfile> {
        self.state.users.get(user_id)
    }

    pub fn user_cluster(&self, user_id: &str) -> Option<usize> {
        self.state.clusters.membership(user_id)
    }

    pub fn session(&self, session_id: &str) -> Option<&OpenSession> {
        self.state.sessions.get(session_id)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::new(&self.inventory, &self.config, self.state.clone())
    }

    /// Flush the event log and write `snapshot-<seq>.bin` into `dir`.
    pub fn write_snapshot(&mut self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf, EngineError> {
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        let dir = DataDir::create(dir.as_ref())?;
        Ok(dir.write_snapshot(&self.snapshot())?)
    }

    pub fn flush(&mut self) -> Result<(), EngineError> {
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    fn commit(&mut self, event: EventKind) -> Result<u64, EngineError> {
        let record = EventRecord { seq: self.state.last_seq + 1, event };
        if let Some(log) = self.log.as_mut() {
            log.append(&record)?;
        }
        self.state.apply(&self.inventory, &self.config, &record)?;
        Ok(record.seq)
    }

    /// Pick the scope for a user's next session and the table to rank with.
    fn scope_for(&self, user_id: &str) -> (Scope, Option<usize>) {
        let Some(user) = self.state.users.get(user_id) else {
            return (Scope::Global, None);
        };
        if user.session_num == 0 {
            (Scope::Global, None)
        } else if user.session_num < self.config.threshold {
            (Scope::Personal, None)
        } else if self.config.clustering_enabled && self.state.clusters.is_fitted() {
            let c = self
                .state
                .clusters
                .get_cluster(&user.pref_vector)
                .expect("model is fitted");
            (Scope::Cluster, Some(c))
        } else {
            (Scope::Personal, None)
        }
    }

    pub fn start_session(&mut self, user_id: &str, context: &str) -> Result<RecommendationSet, EngineError> {
        let eligible = self
            .inventory
            .eligible_arms(context)
            .map_err(|_| EngineError::UnknownContext(context.to_string()))?;
        if self.state.open_by_user.contains_key(user_id) {
            return Err(EngineError::SessionAlreadyOpen(user_id.to_string()));
        }
        let (scope, cluster) = self.scope_for(user_id);
        let empty = ScoreTable::new();
        let user = self.state.users.get(user_id);
        let personal = user.map(|u| &u.personal_table).unwrap_or(&empty);
        let k = self.inventory.recommend_count();
        let c = self.config.exploration_c;
        let arms: Vec<String> = match (scope, cluster) {
            (Scope::Global, _) => self.state.global.rank_arms(context, &eligible, k, c),
            (Scope::Cluster, Some(idx)) => {
                let own = user.map(|u| &u.observed_table).unwrap_or(&empty);
                let table = self.state.clusters.preview_table(user_id, idx, own);
                table.rank_arms(context, &eligible, k, c)
            }
            _ => personal.rank_arms(context, &eligible, k, c),
        }
        .into_iter()
        .map(|a| a.id.clone())
        .collect();

        let session_id = format!("s{}", self.state.last_seq + 1);
        self.commit(EventKind::SessionStarted {
            session_id: session_id.clone(),
            user_id: user_id.to_string(),
            context: context.to_string(),
            arms: arms.clone(),
            scope,
            cluster,
            timestamp_ms: self.clock.now_ms(),
        })?;
        Ok(RecommendationSet {
            session_id,
            user_id: user_id.to_string(),
            context: context.to_string(),
            arms,
            scope_used: scope,
        })
    }

    pub fn submit_choice(&mut self, session_id: &str, intervention_id: &str) -> Result<(), EngineError> {
        let session = self
            .state
            .sessions
            .get(session_id)
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))?;
        if session.choice.is_some() {
            return Err(EngineError::ChoiceAlreadyMade);
        }
        if !session.arms.iter().any(|a| a == intervention_id) {
            return Err(EngineError::ChoiceNotOffered(intervention_id.to_string()));
        }
        self.commit(EventKind::ChoiceMade {
            session_id: session_id.to_string(),
            choice: intervention_id.to_string(),
            timestamp_ms: self.clock.now_ms(),
        })?;
        Ok(())
    }

    /// Close a session with an explicit rating, or with `None` when the user
    /// gave no feedback.
    pub fn submit_feedback(
        &mut self,
        session_id: &str,
        rating: Option<Rating>,
    ) -> Result<SessionSummary, EngineError> {
        let session = self
            .state
            .sessions
            .get(session_id)
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))?;
        if session.choice.is_none() {
            return Err(EngineError::NoChoiceYet);
        }
        let ev = self.session_event(session, rating);
        self.finish(EventKind::FeedbackGiven(ev))
    }

    /// Close a session that ran out of time. Takes the missing-feedback path;
    /// without a choice nothing is learned.
    pub fn expire_session(&mut self, session_id: &str) -> Result<SessionSummary, EngineError> {
        let session = self
            .state
            .sessions
            .get(session_id)
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))?;
        let ev = self.session_event(session, None);
        self.finish(EventKind::SessionExpired(ev))
    }

    /// Expire every session open longer than the configured timeout.
    pub fn expire_stale(&mut self) -> Result<Vec<SessionSummary>, EngineError> {
        let cutoff = self.clock.now_ms() - (self.config.session_timeout_secs as i64) * 1000;
        let stale: Vec<String> = self
            .state
            .sessions
            .values()
            .filter(|s| s.started_ms <= cutoff)
            .map(|s| s.session_id.clone())
            .collect();
        stale.iter().map(|sid| self.expire_session(sid)).collect()
    }

    fn session_event(&self, session: &OpenSession, rating: Option<Rating>) -> SessionEvent {
        let imputed_reward = match (&session.choice, rating) {
            (Some(choice), None) => self.imputed_reward(&session.user_id, &session.context, choice),
            _ => None,
        };
        SessionEvent {
            session_id: session.session_id.clone(),
            user_id: session.user_id.clone(),
            context: session.context.clone(),
            arms: session.arms.clone(),
            choice: session.choice.clone(),
            rating,
            imputed_reward,
            timestamp_ms: self.clock.now_ms(),
        }
    }

    /// Cluster-mean reward for a missing rating, if the user is clustered and
    /// the cluster has explicit evidence for this arm in this context.
    fn imputed_reward(&self, user_id: &str, context: &str, choice: &str) -> Option<f64> {
        if !(self.config.impute_missing && self.config.clustering_enabled) {
            return None;
        }
        let cluster = self.state.clusters.membership(user_id)?;
        let stats = self.state.clusters.table(cluster).get(context, choice);
        if stats.explicit_pulls == 0 {
            return None;
        }
        stats.mean().map(|m| m.clamp(0.0, 5.0))
    }

    fn finish(&mut self, event: EventKind) -> Result<SessionSummary, EngineError> {
        let (EventKind::FeedbackGiven(ev) | EventKind::SessionExpired(ev)) = &event else {
            unreachable!("finish is only called with session-closing events");
        };
        let ev = ev.clone();
        let scope = self.state.sessions[&ev.session_id].scope;
        self.commit(event)?;
        let refitted = self.maybe_refit()?;

        let user = &self.state.users[&ev.user_id];
        let arm_means = ev
            .arms
            .iter()
            .map(|id| {
                let s = user.personal_table.get(&ev.context, id);
                ArmMean { id: id.clone(), mean: s.mean(), pulls: s.total_pulls() }
            })
            .collect();
        Ok(SessionSummary {
            session_id: ev.session_id.clone(),
            user_id: ev.user_id.clone(),
            scope_used: scope,
            choice: ev.choice.clone(),
            rating: ev.rating.map(Rating::value),
            imputed: ev.imputed(),
            imputed_reward: ev.imputed_reward,
            session_num: user.session_num,
            arm_means,
            refitted,
        })
    }

    fn maybe_refit(&mut self) -> Result<bool, EngineError> {
        if !self.config.clustering_enabled
            || !self.state.metrics.total_sessions.is_multiple_of(self.config.refit_interval)
        {
            return Ok(false);
        }
        self.refit()
    }

    /// Run a full clustering pass over every user with at least `threshold`
    /// completed sessions. Returns `false` when nobody qualifies.
    pub fn refit(&mut self) -> Result<bool, EngineError> {
        let eligible: Vec<(String, Vec<f64>)> = self
            .state
            .users
            .values()
            .filter(|u| u.session_num >= self.config.threshold)
            .map(|u| (u.user_id.clone(), u.pref_vector.values().to_vec()))
            .collect();
        let seed = self.config.seed.wrapping_add(self.state.metrics.refits);
        let Some(partition) =
            fit_partition(self.algorithm.as_ref(), &eligible, self.config.num_clusters, seed)
        else {
            return Ok(false);
        };
        self.commit(EventKind::ModelRefitted {
            centroids: partition.centroids,
            memberships: partition.memberships,
            timestamp_ms: self.clock.now_ms(),
        })?;
        Ok(true)
    }
}
