use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::ScoreTable;
use crate::clustering::{ClusterModel, Partition, PreferenceVector};
use crate::inventory::{EngineConfig, Inventory};
use crate::persistence::{EventKind, EventRecord, Scope, SessionEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    /// Completed sessions.
    pub session_num: u64,
    /// Everything learned about this user, including imputed rewards.
    pub personal_table: ScoreTable,
    /// Explicit and implicit feedback only; the user's contribution to
    /// cluster tables.
    pub observed_table: ScoreTable,
    pub pref_vector: PreferenceVector,
}

impl UserProfile {
    pub fn new(user_id: &str, dim: usize) -> Self {
        Self {
            user_id: user_id.to_string(),
            session_num: 0,
            personal_table: ScoreTable::new(),
            observed_table: ScoreTable::new(),
            pref_vector: PreferenceVector::new(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSession {
    pub session_id: String,
    pub user_id: String,
    pub context: String,
    pub arms: Vec<String>,
    pub scope: Scope,
    pub choice: Option<String>,
    pub started_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total_sessions: u64,
    pub started_by_scope: BTreeMap<Scope, u64>,
    pub refits: u64,
    pub last_refit_seq: Option<u64>,
}

/// Error raised when a record cannot be applied to the current state,
/// which means the log and the state disagree.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {seq} ({kind}) is inconsistent with engine state: {reason}")]
pub struct ApplyError {
    pub seq: u64,
    pub kind: &'static str,
    pub reason: String,
}

/// All mutable engine state. Changes only through [`EngineState::apply`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub last_seq: u64,
    pub global: ScoreTable,
    pub users: BTreeMap<String, UserProfile>,
    pub clusters: ClusterModel,
    pub sessions: BTreeMap<String, OpenSession>,
    pub open_by_user: BTreeMap<String, String>,
    pub metrics: Metrics,
}

impl EngineState {
    pub fn apply(
        &mut self,
        inventory: &Inventory,
        config: &EngineConfig,
        record: &EventRecord,
    ) -> Result<(), ApplyError> {
        let fail = |reason: String| ApplyError { seq: record.seq, kind: record.event.name(), reason };
        if record.seq != self.last_seq + 1 {
            return Err(fail(format!("expected seq {}", self.last_seq + 1)));
        }
        match &record.event {
            EventKind::SessionStarted { session_id, user_id, context, arms, scope, cluster, timestamp_ms } => {
                if self.sessions.contains_key(session_id) || self.open_by_user.contains_key(user_id) {
                    return Err(fail(format!("session {session_id} or user {user_id} already open")));
                }
                self.users
                    .entry(user_id.clone())
                    .or_insert_with(|| UserProfile::new(user_id, inventory.len()));
                if let Some(c) = *cluster {
                    if c >= self.clusters.centroids().len() {
                        return Err(fail(format!("cluster {c} does not exist")));
                    }
                    let users = &self.users;
                    self.clusters.assign(user_id, c, |u| users.get(u).map(|p| &p.observed_table));
                }
                self.sessions.insert(
                    session_id.clone(),
                    OpenSession {
                        session_id: session_id.clone(),
                        user_id: user_id.clone(),
                        context: context.clone(),
                        arms: arms.clone(),
                        scope: *scope,
                        choice: None,
                        started_ms: *timestamp_ms,
                    },
                );
                self.open_by_user.insert(user_id.clone(), session_id.clone());
                *self.metrics.started_by_scope.entry(*scope).or_default() += 1;
            }
            EventKind::ChoiceMade { session_id, choice, .. } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| fail(format!("unknown session {session_id}")))?;
                if s.choice.is_some() || !s.arms.contains(choice) {
                    return Err(fail(format!("invalid choice {choice}")));
                }
                s.choice = Some(choice.clone());
            }
            EventKind::FeedbackGiven(ev) | EventKind::SessionExpired(ev) => {
                self.finish_session(inventory, config, ev).map_err(fail)?;
            }
            EventKind::ModelRefitted { centroids, memberships, .. } => {
                if centroids.is_empty() || memberships.values().any(|&c| c >= centroids.len()) {
                    return Err(fail("membership outside centroid range".into()));
                }
                let users = &self.users;
                self.clusters.install(
                    Partition { centroids: centroids.clone(), memberships: memberships.clone() },
                    |u| users.get(u).map(|p| &p.observed_table),
                );
                self.metrics.refits += 1;
                self.metrics.last_refit_seq = Some(record.seq);
            }
        }
        self.last_seq = record.seq;
        Ok(())
    }

    fn finish_session(
        &mut self,
        inventory: &Inventory,
        config: &EngineConfig,
        ev: &SessionEvent,
    ) -> Result<(), String> {
        let session = self
            .sessions
            .get(&ev.session_id)
            .ok_or_else(|| format!("unknown session {}", ev.session_id))?;
        if session.choice != ev.choice || session.user_id != ev.user_id {
            return Err("event does not match the open session".into());
        }
        if ev.rating.is_some() && ev.choice.is_none() {
            return Err("rating without a choice".into());
        }
        let session = self.sessions.remove(&ev.session_id).expect("checked above");
        self.open_by_user.remove(&session.user_id);
        let user = self
            .users
            .get_mut(&session.user_id)
            .ok_or_else(|| format!("unknown user {}", session.user_id))?;

        if let Some(choice) = &session.choice {
            if let Some(rating) = ev.rating {
                let mut delta = ScoreTable::new();
                delta
                    .apply_feedback(inventory, &session.context, choice, rating)
                    .map_err(|e| e.to_string())?;
                if config.implicit_enabled {
                    let unchosen: Vec<String> =
                        session.arms.iter().filter(|a| *a != choice).cloned().collect();
                    delta
                        .apply_implicit(inventory, &session.context, &unchosen, config.implicit_reward)
                        .map_err(|e| e.to_string())?;
                }
                user.pref_vector.update(inventory, choice, rating).map_err(|e| e.to_string())?;
                user.personal_table.merge(&delta);
                user.observed_table.merge(&delta);
                self.global.merge(&delta);
                self.clusters.fold(&session.user_id, &delta);
            } else if let Some(reward) = ev.imputed_reward {
                let mut delta = ScoreTable::new();
                delta
                    .apply_observation(inventory, &session.context, choice, reward)
                    .map_err(|e| e.to_string())?;
                user.personal_table.merge(&delta);
                self.global.merge(&delta);
            }
        }

        user.session_num += 1;
        self.metrics.total_sessions += 1;
        Ok(())
    }
}
